#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "repdib/nn.hpp"
#include "repdib/rng.hpp"
#include "repdib/tape.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

// Sinkhorn-Knopp target assignment: exp(scores / temp) is alternately
// column- and row-normalized, ending on a row pass so every row sums to
// exactly 1. After the configured iterations the loop keeps going (bounded)
// until every column sum is within 10% of batch / M, which a strictly
// positive matrix always reaches.
template <typename S>
Tensor<S> sinkhorn_targets(const Tensor<S>& scores, double temp, int iters) {
  ensure_finite(scores, "sinkhorn_targets");
  const int n = scores.rows, m = scores.cols;
  Tensor<S> q(n, m);
  for (int r = 0; r < n; ++r) {
    const S* row = scores.row(r);
    S mx = row[0];
    for (int c = 1; c < m; ++c) mx = std::max(mx, row[c]);
    for (int c = 0; c < m; ++c)
      q.at(r, c) = static_cast<S>(std::exp((row[c] - mx) / temp));
  }
  const double target_col = static_cast<double>(n) / m;
  auto row_pass = [&] {
    for (int r = 0; r < n; ++r) {
      double row = 0.0;
      for (int c = 0; c < m; ++c) row += q.at(r, c);
      for (int c = 0; c < m; ++c)
        q.at(r, c) = static_cast<S>(q.at(r, c) / row);
    }
  };
  auto col_pass = [&] {
    for (int c = 0; c < m; ++c) {
      double col = 0.0;
      for (int r = 0; r < n; ++r) col += q.at(r, c);
      const double f = target_col / col;
      for (int r = 0; r < n; ++r) q.at(r, c) = static_cast<S>(q.at(r, c) * f);
    }
  };
  auto columns_balanced = [&] {
    for (int c = 0; c < m; ++c) {
      double col = 0.0;
      for (int r = 0; r < n; ++r) col += q.at(r, c);
      if (std::abs(col - target_col) > 0.1 * target_col) return false;
    }
    return true;
  };

  row_pass();
  const int kMaxIters = 1000;
  for (int it = 0; it < kMaxIters; ++it) {
    if (it >= iters && columns_balanced()) break;
    col_pass();
    row_pass();
  }
  ensure_finite(q, "sinkhorn_targets");
  return q;
}

// Bank of M unit-norm prototype vectors. Batch embeddings are scored against
// the prototypes; the online side is a tempered softmax, the target side a
// stop-gradient Sinkhorn assignment of the paired embeddings.
template <typename S>
struct PrototypeBank {
  Param<S> protos;  // M x h
  double temp = 0.1;
  int sinkhorn_iters = 3;
  bool ema_target = false;
  double ema_decay = 0.99;
  Tensor<S> target_protos;  // used when ema_target is set
  bool trainable = true;

  PrototypeBank() = default;

  PrototypeBank(const std::string& name, int m, int h, Rng& rng) {
    if (m < 2) throw ContractError("prototypes: need at least 2 prototypes");
    Tensor<S> p(m, h);
    for (S& x : p.v) x = static_cast<S>(rng.normal());
    protos = Param<S>(name, std::move(p));
    normalize_rows(protos.value);
    target_protos = protos.value;
  }

  int count() const { return protos.value.rows; }
  int dim() const { return protos.value.cols; }

  static void normalize_rows(Tensor<S>& t) {
    for (int r = 0; r < t.rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < t.cols; ++c)
        s += static_cast<double>(t.at(r, c)) * t.at(r, c);
      const double norm = std::max(std::sqrt(s), 1e-12);
      for (int c = 0; c < t.cols; ++c)
        t.at(r, c) = static_cast<S>(t.at(r, c) / norm);
    }
  }

  // Call after each optimizer step: restores unit norms and refreshes the
  // EMA target copy.
  void after_update() {
    normalize_rows(protos.value);
    if (ema_target) {
      ema_update(target_protos, protos.value, 1.0 - ema_decay);
      normalize_rows(target_protos);
    } else {
      target_protos = protos.value;
    }
  }

  // Raw target assignment for a batch of embeddings (stop-gradient side).
  Tensor<S> targets(const Tensor<S>& z_next) const {
    const Tensor<S>& p = ema_target ? target_protos : protos.value;
    Tensor<S> zn = z_next;
    normalize_rows(zn);
    Tensor<S> scores(zn.rows, p.rows, S(0));
    for (int r = 0; r < zn.rows; ++r)
      for (int m = 0; m < p.rows; ++m) {
        double acc = 0.0;
        for (int c = 0; c < p.cols; ++c)
          acc += static_cast<double>(zn.at(r, c)) * p.at(m, c);
        scores.at(r, m) = static_cast<S>(acc);
      }
    return sinkhorn_targets(scores, temp, sinkhorn_iters);
  }

  // Cross entropy of softmax scores against fixed targets q.
  Var<S> cross_entropy(Tape<S>& t, Var<S> z, const Tensor<S>& q) const {
    auto& pp = const_cast<Param<S>&>(protos);
    Var<S> p = trainable ? t.leaf(pp) : t.constant(pp.value);
    Var<S> scores = matmul(l2_normalize_rows(z), transpose(p));
    Var<S> log_p = log_softmax_rows(scale(scores, 1.0 / temp));
    const int n = z.rows();
    return scale(total_sum(mul(log_p, t.constant(q))), -1.0 / n);
  }

  // Full prototype loss: -q(s') log p(s), mean over the batch.
  Var<S> loss(Tape<S>& t, Var<S> z, const Tensor<S>& z_next) const {
    if (z.rows() < 2)
      throw ContractError(
          "proto_loss: batch of 1 is degenerate under Sinkhorn");
    return cross_entropy(t, z, targets(z_next));
  }

  void collect(std::vector<Param<S>*>& out) { out.push_back(&protos); }
};

}  // namespace repdib
