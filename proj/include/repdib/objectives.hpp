#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "repdib/nn.hpp"
#include "repdib/rng.hpp"
#include "repdib/tape.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

enum class ObjectiveKind { proto, inverse1, inversek, contrastive };

inline const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::proto: return "proto";
    case ObjectiveKind::inverse1: return "inverse1";
    case ObjectiveKind::inversek: return "inversek";
    default: return "contrastive";
  }
}

// Mean cross entropy of logits against integer labels.
template <typename S>
Var<S> cross_entropy_logits(Tape<S>& t, Var<S> logits,
                            const std::vector<int>& labels) {
  (void)t;
  if (static_cast<int>(labels.size()) != logits.rows())
    throw ContractError("cross_entropy: one label per row required");
  Var<S> log_p = log_softmax_rows(logits);
  Var<S> picked = select_cols(log_p, labels);
  return scale(total_sum(picked), -1.0 / static_cast<double>(labels.size()));
}

// Inverse dynamics: predict the action taken at t from the pair of
// representations (z_t, z_{t+k}). k = 1 is the one-step case.
template <typename S>
Var<S> inverse_loss(Tape<S>& t, const Mlp<S>& head, Var<S> z_t, Var<S> z_tk,
                    const std::vector<int>& actions) {
  if (z_t.rows() != z_tk.rows())
    throw ContractError("inverse_loss: batch sizes disagree");
  Var<S> logits = head.forward(t, concat_cols(z_t, z_tk));
  return cross_entropy_logits(t, logits, actions);
}

// InfoNCE over temporal pairs: row i of z_t matches row i of z_next, with the
// rest of the batch as negatives.
template <typename S>
Var<S> contrastive_loss(Tape<S>& t, Var<S> z_t, Var<S> z_next, double temp,
                        bool symmetric = false) {
  const int n = z_t.rows();
  if (n < 2) throw ContractError("contrastive_loss: batch must be >= 2");
  if (z_next.rows() != n)
    throw ContractError("contrastive_loss: batch sizes disagree");
  Var<S> a = l2_normalize_rows(z_t);
  Var<S> b = l2_normalize_rows(z_next);
  Var<S> scores = scale(matmul(a, transpose(b)), 1.0 / temp);
  std::vector<int> diag(n);
  for (int i = 0; i < n; ++i) diag[i] = i;
  Var<S> loss = cross_entropy_logits(t, scores, diag);
  if (symmetric) {
    Var<S> loss_b = cross_entropy_logits(t, transpose(scores), diag);
    loss = scale(add(loss, loss_b), 0.5);
  }
  return loss;
}

// Q network plus its EMA target copy.
template <typename S>
struct QNetwork {
  Mlp<S> net;
  std::vector<Tensor<S>> target_w, target_b;

  QNetwork() = default;
  QNetwork(const std::string& name, std::vector<int> widths, Rng& rng)
      : net(name, std::move(widths), Activation::relu, rng) {
    sync_target();
  }

  void sync_target() {
    target_w.clear();
    target_b.clear();
    for (auto& p : net.weights) target_w.push_back(p.value);
    for (auto& p : net.biases) target_b.push_back(p.value);
  }

  void ema_target(double tau) {
    for (std::size_t l = 0; l < target_w.size(); ++l) {
      ema_update(target_w[l], net.weights[l].value, tau);
      ema_update(target_b[l], net.biases[l].value, tau);
    }
  }

  Tensor<S> target_forward(const Tensor<S>& x) const {
    Tensor<S> h = x;
    for (std::size_t l = 0; l < target_w.size(); ++l) {
      const Tensor<S>& w = target_w[l];
      const Tensor<S>& b = target_b[l];
      Tensor<S> out(h.rows, w.cols, S(0));
      for (int i = 0; i < h.rows; ++i) {
        S* crow = out.row(i);
        for (int c = 0; c < w.cols; ++c) crow[c] = b.v[c];
        const S* arow = h.row(i);
        for (int k = 0; k < w.rows; ++k) {
          const S aik = arow[k];
          const S* wrow = w.row(k);
          for (int c = 0; c < w.cols; ++c) crow[c] += aik * wrow[c];
        }
      }
      if (l + 1 < target_w.size())
        for (S& x2 : out.v) x2 = x2 > S(0) ? x2 : S(0);
      h = std::move(out);
    }
    return h;
  }

  int greedy_action(const Tensor<S>& z) const {
    Tensor<S> qv = net.forward(z);
    int best = 0;
    for (int a = 1; a < qv.cols; ++a)
      if (qv.at(0, a) > qv.at(0, best)) best = a;
    return best;
  }

  void collect(std::vector<Param<S>*>& out) { net.collect(out); }
};

// One-step TD loss with the bootstrap target r + gamma * (1 - done) *
// max_a Q_target(z', a). The target path carries no gradient.
template <typename S>
Var<S> dqn_loss(Tape<S>& t, QNetwork<S>& q, Var<S> z,
                const std::vector<int>& actions, const std::vector<S>& rewards,
                const Tensor<S>& z_next, const std::vector<bool>& terminal,
                double gamma) {
  const int n = z.rows();
  if (n == 0) throw ContractError("dqn_loss: empty batch");
  if (gamma < 0.0 || gamma >= 1.0)
    throw ContractError("dqn_loss: gamma must lie in [0, 1)");
  if (static_cast<int>(actions.size()) != n ||
      static_cast<int>(rewards.size()) != n ||
      static_cast<int>(terminal.size()) != n || z_next.rows != n)
    throw ContractError("dqn_loss: batch fields disagree");

  Tensor<S> q_next = q.target_forward(z_next);
  Tensor<S> y(n, 1);
  for (int i = 0; i < n; ++i) {
    S best = q_next.at(i, 0);
    for (int a = 1; a < q_next.cols; ++a) best = std::max(best, q_next.at(i, a));
    y.at(i, 0) = rewards[i] +
                 static_cast<S>(terminal[i] ? 0.0 : gamma) * best;
  }
  Var<S> pred = select_cols(q.net.forward(t, z), actions);
  return mean_all(square(sub(pred, t.constant(std::move(y)))));
}

// Weighted composition of the training loss:
//   objective + vq + beta_vib * kl.
// Each component must be a finite scalar; the error names the offender.
template <typename S>
struct LossComponents {
  Var<S> objective;
  Var<S> vq;
  Var<S> kl;
};

template <typename S>
Var<S> total_loss(Tape<S>& t, const LossComponents<S>& c, double beta_vib) {
  (void)t;
  auto check = [](const Var<S>& v, const char* name) {
    if (v.rows() != 1 || v.cols() != 1)
      throw ContractError(std::string("total_loss: component '") + name +
                          "' is not a scalar");
    if (!std::isfinite(static_cast<double>(v.value().item())))
      throw NumericError(std::string("total_loss: component '") + name +
                         "' is not finite");
  };
  check(c.objective, "objective");
  check(c.vq, "vq");
  check(c.kl, "kl");
  return add(add(c.objective, c.vq), scale(c.kl, beta_vib));
}

}  // namespace repdib
