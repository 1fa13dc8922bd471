#include "repdib/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace repdib {

int CoverageRecord::visited_cells() const {
  int n = 0;
  for (auto v : visits)
    if (v > 0) ++n;
  return n;
}

double CoverageRecord::fraction() const {
  return static_cast<double>(visited_cells()) / reachable_cells;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

int parse_int(const std::string& s, std::int64_t line_no, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ContractError("trajectory: line " + std::to_string(line_no) +
                        ": bad " + what + " value '" + s + "'");
  }
}

}  // namespace

CoverageRecord coverage(std::istream& is, const MazeLayout& layout,
                        std::int64_t max_rows) {
  CoverageRecord rec;
  rec.visits.assign(MazeLayout::kCells, 0);
  {
    auto dist = bfs_distances(layout, 0);
    rec.reachable_cells = 0;
    for (int d : dist)
      if (d >= 0) ++rec.reachable_cells;
  }

  std::string line;
  std::int64_t line_no = 0;
  std::int64_t rows = 0;
  bool any = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("episode", 0) == 0) continue;  // header
    auto fields = split_csv(line);
    if (fields.size() != 6)
      throw ContractError("trajectory: line " + std::to_string(line_no) +
                          ": expected 6 fields, got " +
                          std::to_string(fields.size()));
    const int row = parse_int(fields[2], line_no, "row");
    const int col = parse_int(fields[3], line_no, "col");
    if (!MazeLayout::in_bounds(row, col))
      throw ContractError("trajectory: line " + std::to_string(line_no) +
                          ": cell out of bounds");
    ++rec.visits[MazeLayout::cell_id(row, col)];
    any = true;
    if (++rows == max_rows && max_rows > 0) break;
  }
  if (!any) throw ContractError("trajectory: log holds no rows");
  return rec;
}

CoverageRecord coverage_file(const std::string& path, const MazeLayout& layout,
                             std::int64_t max_rows) {
  std::ifstream is(path);
  if (!is) throw ContractError("trajectory: cannot open " + path);
  return coverage(is, layout, max_rows);
}

CodebookStats codebook_stats(
    const std::vector<std::vector<std::uint64_t>>& usage) {
  CodebookStats stats;
  int total_codes = 0, total_dead = 0;
  stats.min_perplexity = std::numeric_limits<double>::infinity();
  for (const auto& group : usage) {
    double total = 0;
    int dead = 0;
    for (auto u : group) {
      total += static_cast<double>(u);
      if (u == 0) ++dead;
    }
    double perp = 1.0;
    if (total > 0) {
      double h = 0;
      for (auto u : group) {
        if (u == 0) continue;
        const double p = static_cast<double>(u) / total;
        h -= p * std::log(p);
      }
      perp = std::exp(h);
    }
    stats.perplexity.push_back(perp);
    stats.dead_codes.push_back(dead);
    stats.min_perplexity = std::min(stats.min_perplexity, perp);
    total_codes += static_cast<int>(group.size());
    total_dead += dead;
  }
  if (usage.empty()) stats.min_perplexity = 0.0;
  stats.dead_fraction =
      total_codes == 0 ? 0.0 : static_cast<double>(total_dead) / total_codes;
  return stats;
}

Tensor<double> distance_map(const CellEmbedFn& embed, int anchor_row,
                            int anchor_col) {
  const std::vector<float> anchor = embed(anchor_row, anchor_col);
  Tensor<double> map(MazeLayout::kSize, MazeLayout::kSize);
  for (int r = 0; r < MazeLayout::kSize; ++r)
    for (int c = 0; c < MazeLayout::kSize; ++c) {
      const std::vector<float> z = embed(r, c);
      if (z.size() != anchor.size())
        throw ContractError("distance_map: embedding width changed");
      double acc = 0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = static_cast<double>(z[i]) - anchor[i];
        acc += d * d;
      }
      map.at(r, c) = std::sqrt(acc);
    }
  return map;
}

void write_distance_map_csv(std::ostream& os, const Tensor<double>& map) {
  char buf[40];
  for (int r = 0; r < map.rows; ++r) {
    for (int c = 0; c < map.cols; ++c) {
      std::snprintf(buf, sizeof(buf), "%.9g", map.at(r, c));
      os << (c ? "," : "") << buf;
    }
    os << "\n";
  }
}

Tensor<double> read_distance_map_csv(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto fields = split_csv(line);
    std::vector<double> row;
    for (const auto& f : fields) row.push_back(std::stod(f));
    rows.push_back(std::move(row));
  }
  Tensor<double> out(static_cast<int>(rows.size()),
                     rows.empty() ? 0 : static_cast<int>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      out.at(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
  return out;
}

void write_embeddings_csv(std::ostream& os,
                          const std::vector<EmbeddingRow>& rows) {
  if (rows.empty()) throw ContractError("embeddings: nothing to export");
  os << "cell";
  for (std::size_t g = 0; g < rows[0].codes.size(); ++g) os << ",code" << g;
  for (std::size_t i = 0; i < rows[0].z.size(); ++i) os << ",z" << i;
  os << "\n";
  char buf[40];
  for (const auto& row : rows) {
    os << row.cell;
    for (int c : row.codes) os << "," << c;
    for (float v : row.z) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
      os << "," << buf;
    }
    os << "\n";
  }
}

std::vector<EmbeddingRow> read_embeddings_csv(std::istream& is) {
  std::string header;
  if (!std::getline(is, header))
    throw ContractError("embeddings: empty file");
  auto cols = split_csv(header);
  int code_cols = 0, z_cols = 0;
  for (const auto& c : cols) {
    if (c.rfind("code", 0) == 0) ++code_cols;
    if (c.rfind("z", 0) == 0 && c != "cell") ++z_cols;
  }
  std::vector<EmbeddingRow> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto fields = split_csv(line);
    EmbeddingRow row;
    row.cell = std::stoi(fields[0]);
    for (int i = 0; i < code_cols; ++i)
      row.codes.push_back(std::stoi(fields[1 + i]));
    for (int i = 0; i < z_cols; ++i)
      row.z.push_back(std::strtof(fields[1 + code_cols + i].c_str(), nullptr));
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<double> csv_column(std::istream& is, const std::string& column) {
  std::string header;
  if (!std::getline(is, header)) throw ContractError("csv: empty file");
  auto cols = split_csv(header);
  int target = -1;
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (cols[i] == column) target = static_cast<int>(i);
  if (target < 0) throw ContractError("csv: no column named '" + column + "'");
  std::vector<double> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto fields = split_csv(line);
    if (static_cast<int>(fields.size()) <= target)
      throw ContractError("csv: short row while reading '" + column + "'");
    out.push_back(std::stod(fields[target]));
  }
  return out;
}

std::vector<double> csv_column_file(const std::string& path,
                                    const std::string& column) {
  std::ifstream is(path);
  if (!is) throw ContractError("csv: cannot open " + path);
  return csv_column(is, column);
}

}  // namespace repdib
