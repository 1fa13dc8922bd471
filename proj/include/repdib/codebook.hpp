#pragma once

#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "repdib/nn.hpp"
#include "repdib/rng.hpp"
#include "repdib/tape.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

enum class CodebookUpdate { gradient, ema };

// Per-call quantization metadata.
struct QuantizeInfo {
  int batch = 0;
  int groups = 0;
  std::vector<int> codes;          // batch x groups, row-major
  std::vector<double> distances;   // batch x groups, Euclidean to chosen code

  int code(int row, int group) const { return codes[row * groups + group]; }
};

// Grouped vector-quantization bottleneck: the latent of width m is split into
// G contiguous segments of width d = m / G, each matched against its own
// L-entry table by nearest-neighbour lookup (ties break to the lowest index).
template <typename S>
struct Codebook {
  int groups = 0;          // G
  int codes_per_group = 0; // L
  int code_dim = 0;        // d
  std::vector<Param<S>> tables;  // one L x d table per group
  std::vector<std::vector<std::uint64_t>> usage;      // G x L call counts
  std::vector<std::vector<std::int64_t>> last_used;   // G x L, step stamps
  double beta_commit = 0.25;
  CodebookUpdate update_mode = CodebookUpdate::gradient;
  double ema_decay = 0.99;
  bool trainable = true;

  Codebook() = default;

  Codebook(const std::string& name, int g, int l, int latent_dim, Rng& rng) {
    if (g <= 0 || l <= 0) throw ContractError("codebook: G and L must be positive");
    if (latent_dim % g != 0)
      throw ContractError("codebook: latent width " +
                          std::to_string(latent_dim) +
                          " is not divisible by group count " +
                          std::to_string(g));
    groups = g;
    codes_per_group = l;
    code_dim = latent_dim / g;
    for (int i = 0; i < g; ++i) {
      Tensor<S> t(l, code_dim);
      for (S& x : t.v) x = static_cast<S>(rng.uniform(-0.1, 0.1));
      tables.emplace_back(name + ".g" + std::to_string(i), std::move(t));
      usage.emplace_back(l, 0);
      last_used.emplace_back(l, 0);
    }
  }

  int latent_dim() const { return groups * code_dim; }

  // Nearest-neighbour lookup only; no counters touched.
  QuantizeInfo lookup(const Tensor<S>& z) const {
    if (z.cols != latent_dim())
      throw ContractError("codebook: input width " + std::to_string(z.cols) +
                          " does not match latent width " +
                          std::to_string(latent_dim()));
    QuantizeInfo info;
    info.batch = z.rows;
    info.groups = groups;
    info.codes.resize(static_cast<std::size_t>(z.rows) * groups);
    info.distances.resize(info.codes.size());
    for (int r = 0; r < z.rows; ++r) {
      for (int g = 0; g < groups; ++g) {
        const S* seg = z.row(r) + g * code_dim;
        const Tensor<S>& table = tables[g].value;
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < codes_per_group; ++j) {
          const S* code = table.row(j);
          double d = 0.0;
          for (int c = 0; c < code_dim; ++c) {
            const double diff = static_cast<double>(seg[c]) - code[c];
            d += diff * diff;
          }
          if (d < best_d) {  // strict: ties keep the lowest index
            best_d = d;
            best = j;
          }
        }
        info.codes[r * groups + g] = best;
        info.distances[r * groups + g] = std::sqrt(best_d);
      }
    }
    return info;
  }

  // Assembles the quantized batch from looked-up indices.
  Tensor<S> assemble(const QuantizeInfo& info) const {
    Tensor<S> out(info.batch, latent_dim());
    for (int r = 0; r < info.batch; ++r)
      for (int g = 0; g < groups; ++g) {
        const S* code = tables[g].value.row(info.code(r, g));
        S* dst = out.row(r) + g * code_dim;
        for (int c = 0; c < code_dim; ++c) dst[c] = code[c];
      }
    return out;
  }

  // Inference path. Counters are incremented per call, per group.
  Tensor<S> quantize(const Tensor<S>& z, QuantizeInfo* info_out = nullptr) {
    QuantizeInfo info = lookup(z);
    count(info);
    Tensor<S> out = assemble(info);
    if (info_out) *info_out = std::move(info);
    return out;
  }

  struct QuantizeOut {
    Var<S> z_q;      // straight-through value
    Var<S> vq_loss;  // sum over groups of mean-over-batch VQ + commitment
    QuantizeInfo info;
  };

  // Training path. Forward value is the exact code concatenation; the
  // backward pass treats quantization as the identity on z_e. The loss is
  // sum_g ( ||sg(c_g) - e_g||^2 + beta * ||c_g - sg(e_g)||^2 ), averaged
  // over the batch.
  QuantizeOut quantize(Tape<S>& t, Var<S> z_e) {
    QuantizeInfo info = lookup(z_e.value());
    count(info);
    Var<S> z_q = straight_through(z_e, assemble(info));

    const int n = z_e.rows();
    Var<S> loss = t.constant(Tensor<S>::scalar(S(0)));
    for (int g = 0; g < groups; ++g) {
      std::vector<int> idx(n);
      for (int r = 0; r < n; ++r) idx[r] = info.code(r, g);
      Var<S> seg = slice_cols(z_e, g * code_dim, (g + 1) * code_dim);
      Var<S> table = trainable && update_mode == CodebookUpdate::gradient
                         ? t.leaf(tables[g])
                         : t.constant(tables[g].value);
      Var<S> picked = gather_rows(table, idx);
      Var<S> codebook_term =
          mean_all(row_sum(square(sub(stop_gradient(seg), picked))));
      Var<S> commit_term =
          mean_all(row_sum(square(sub(seg, stop_gradient(picked)))));
      loss = add(loss, add(codebook_term, scale(commit_term, beta_commit)));
    }
    return {z_q, loss, std::move(info)};
  }

  // EMA update toward the mean of assigned segments; untouched codes stay.
  void apply_ema(const Tensor<S>& z, const QuantizeInfo& info) {
    if (update_mode != CodebookUpdate::ema)
      throw ContractError("codebook: apply_ema called in gradient mode");
    for (int g = 0; g < groups; ++g) {
      std::vector<double> sum(static_cast<std::size_t>(codes_per_group) * code_dim,
                              0.0);
      std::vector<int> count(codes_per_group, 0);
      for (int r = 0; r < info.batch; ++r) {
        const int j = info.code(r, g);
        const S* seg = z.row(r) + g * code_dim;
        for (int c = 0; c < code_dim; ++c)
          sum[static_cast<std::size_t>(j) * code_dim + c] += seg[c];
        ++count[j];
      }
      Tensor<S>& table = tables[g].value;
      for (int j = 0; j < codes_per_group; ++j) {
        if (count[j] == 0) continue;
        for (int c = 0; c < code_dim; ++c) {
          const double mean =
              sum[static_cast<std::size_t>(j) * code_dim + c] / count[j];
          table.at(j, c) = static_cast<S>(
              ema_decay * static_cast<double>(table.at(j, c)) +
              (1.0 - ema_decay) * mean);
        }
      }
    }
  }

  // Reseeds codes not selected for `window` steps to a random recent segment.
  // Returns how many codes were reseeded.
  int reseed_dead(std::int64_t step, std::int64_t window,
                  const Tensor<S>& recent, Rng& rng) {
    if (window <= 0 || recent.rows == 0) return 0;
    int reseeded = 0;
    for (int g = 0; g < groups; ++g) {
      for (int j = 0; j < codes_per_group; ++j) {
        if (step - last_used[g][j] <= window) continue;
        const int r = static_cast<int>(rng.uniform_int(recent.rows));
        const S* seg = recent.row(r) + g * code_dim;
        for (int c = 0; c < code_dim; ++c) tables[g].value.at(j, c) = seg[c];
        last_used[g][j] = step;
        ++reseeded;
      }
    }
    return reseeded;
  }

  void stamp_usage(std::int64_t step, const QuantizeInfo& info) {
    for (int r = 0; r < info.batch; ++r)
      for (int g = 0; g < groups; ++g) last_used[g][info.code(r, g)] = step;
  }

  // Number of expressible discrete states, L^G, as an exact decimal string.
  std::string expressible_states() const {
    std::vector<int> digits{1};  // little-endian decimal
    for (int g = 0; g < groups; ++g) {
      int carry = 0;
      for (auto& d : digits) {
        const int prod = d * codes_per_group + carry;
        d = prod % 10;
        carry = prod / 10;
      }
      while (carry > 0) {
        digits.push_back(carry % 10);
        carry /= 10;
      }
    }
    std::string s;
    for (auto it = digits.rbegin(); it != digits.rend(); ++it)
      s.push_back(static_cast<char>('0' + *it));
    return s;
  }

  // Human-readable dump: group, index, usage, vector components.
  void dump_csv(std::ostream& os) const {
    os << "group,index,usage";
    for (int c = 0; c < code_dim; ++c) os << ",v" << c;
    os << "\n";
    for (int g = 0; g < groups; ++g)
      for (int j = 0; j < codes_per_group; ++j) {
        os << g << "," << j << "," << usage[g][j];
        for (int c = 0; c < code_dim; ++c) {
          char buf[32];
          std::snprintf(buf, sizeof(buf), "%.9g",
                        static_cast<double>(tables[g].value.at(j, c)));
          os << "," << buf;
        }
        os << "\n";
      }
  }

  void collect(std::vector<Param<S>*>& out) {
    for (auto& p : tables) out.push_back(&p);
  }

 private:
  void count(const QuantizeInfo& info) {
    for (int r = 0; r < info.batch; ++r)
      for (int g = 0; g < groups; ++g) ++usage[g][info.code(r, g)];
  }
};

}  // namespace repdib
