#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "repdib/maze.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

// Per-cell visit counts accumulated from a trajectory log.
struct CoverageRecord {
  std::vector<std::int64_t> visits;  // one per cell, row-major
  int reachable_cells = MazeLayout::kCells;

  int visited_cells() const;
  double fraction() const;
};

// Parses a trajectory CSV (episode,step,row,col,action,reward). Malformed
// rows raise ContractError naming the line number. `max_rows` limits the
// analysis to a prefix of the log (0 means all rows).
CoverageRecord coverage(std::istream& trajectory_csv, const MazeLayout& layout,
                        std::int64_t max_rows = 0);
CoverageRecord coverage_file(const std::string& path, const MazeLayout& layout,
                             std::int64_t max_rows = 0);

// Usage-histogram health of one codebook group set.
struct CodebookStats {
  std::vector<double> perplexity;  // exp(entropy) per group, in [1, L]
  std::vector<int> dead_codes;     // zero-usage entries per group
  double min_perplexity = 0.0;
  double dead_fraction = 0.0;      // dead entries / total entries
};

CodebookStats codebook_stats(
    const std::vector<std::vector<std::uint64_t>>& usage);

// Deterministic embedding of a rendered cell; components fixed to the full
// evaluation pipeline by the caller.
using CellEmbedFn = std::function<std::vector<float>(int row, int col)>;

// 6x6 matrix of embedding distances to the anchor cell.
Tensor<double> distance_map(const CellEmbedFn& embed, int anchor_row,
                            int anchor_col);

void write_distance_map_csv(std::ostream& os, const Tensor<double>& map);
Tensor<double> read_distance_map_csv(std::istream& is);

// One row per state: cell id, per-group code indices, embedding values
// printed with 9 significant digits (lossless for f32).
struct EmbeddingRow {
  int cell = 0;
  std::vector<int> codes;
  std::vector<float> z;
};

void write_embeddings_csv(std::ostream& os,
                          const std::vector<EmbeddingRow>& rows);
std::vector<EmbeddingRow> read_embeddings_csv(std::istream& is);

// Column extraction from a generic CSV with a header (metrics/eval files).
std::vector<double> csv_column(std::istream& is, const std::string& column);
std::vector<double> csv_column_file(const std::string& path,
                                    const std::string& column);

}  // namespace repdib
