#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "repdib/rng.hpp"
#include "repdib/tape.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

enum class Activation { relu, tanh, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    default: return "identity";
  }
}

// Fully connected stack. The activation applies to hidden layers; the output
// layer is linear. Weights are (in x out) so a batch forward is x * W + b.
template <typename S>
struct Mlp {
  std::vector<int> widths;
  Activation act = Activation::relu;
  std::vector<Param<S>> weights;
  std::vector<Param<S>> biases;
  bool trainable = true;

  Mlp() = default;

  Mlp(const std::string& name, std::vector<int> w, Activation a, Rng& rng)
      : widths(std::move(w)), act(a) {
    if (widths.size() < 2) throw ContractError("mlp: need at least two widths");
    for (int d : widths)
      if (d <= 0) throw ContractError("mlp: widths must be positive");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const int in = widths[l], out = widths[l + 1];
      Tensor<S> wt(in, out);
      const double bound = std::sqrt(6.0 / (in + out));
      for (S& x : wt.v) x = static_cast<S>(rng.uniform(-bound, bound));
      weights.emplace_back(name + ".w" + std::to_string(l), std::move(wt));
      biases.emplace_back(name + ".b" + std::to_string(l),
                          Tensor<S>(1, out, S(0)));
    }
  }

  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }
  std::size_t layer_count() const { return weights.size(); }

  // Parameter count is a pure function of the widths.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      n += static_cast<std::size_t>(widths[l]) * widths[l + 1] + widths[l + 1];
    return n;
  }

  Var<S> forward(Tape<S>& t, Var<S> x) const {
    if (x.cols() != in_dim())
      throw ContractError("mlp: input width " + std::to_string(x.cols()) +
                          " does not match first layer width " +
                          std::to_string(in_dim()));
    Var<S> h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      // Params live on the modules; const_cast only re-registers them as tape
      // leaves, the tape never mutates them during forward.
      auto& wp = const_cast<Param<S>&>(weights[l]);
      auto& bp = const_cast<Param<S>&>(biases[l]);
      Var<S> w = trainable ? t.leaf(wp) : t.constant(wp.value);
      Var<S> b = trainable ? t.leaf(bp) : t.constant(bp.value);
      h = add(matmul(h, w), b);
      if (l + 1 < weights.size()) {
        if (act == Activation::relu) h = relu(h);
        else if (act == Activation::tanh) h = repdib::tanh(h);
      }
    }
    return h;
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    if (x.cols != in_dim())
      throw ContractError("mlp: input width " + std::to_string(x.cols) +
                          " does not match first layer width " +
                          std::to_string(in_dim()));
    Tensor<S> h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const Tensor<S>& w = weights[l].value;
      const Tensor<S>& b = biases[l].value;
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
      if (l + 1 < weights.size()) {
        if (act == Activation::relu) {
          for (S& x2 : out.v) x2 = x2 > S(0) ? x2 : S(0);
        } else if (act == Activation::tanh) {
          for (S& x2 : out.v) x2 = std::tanh(x2);
        }
      }
      h = std::move(out);
    }
    ensure_finite(h, "mlp_forward");
    return h;
  }

  void collect(std::vector<Param<S>*>& out) {
    for (auto& p : weights) out.push_back(&p);
    for (auto& p : biases) out.push_back(&p);
  }
};

// Standard Adam with bias correction. Parameters are registered once; step()
// applies the update and clears gradients.
template <typename S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void add(Param<S>& p) {
    params_.push_back(&p);
    m_.emplace_back(p.value.rows, p.value.cols, S(0));
    v_.emplace_back(p.value.rows, p.value.cols, S(0));
  }

  void add(const std::vector<Param<S>*>& ps) {
    for (auto* p : ps) add(*p);
  }

  void step() {
    // validate first so a bad gradient aborts before any parameter moves
    for (Param<S>* p : params_)
      if (!all_finite(p->grad))
        throw NumericError("adam: non-finite gradient for parameter '" +
                           p->name + "'");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param<S>& p = *params_[i];
      for (std::size_t j = 0; j < p.value.v.size(); ++j) {
        const double g = static_cast<double>(p.grad.v[j]);
        double m = static_cast<double>(m_[i].v[j]);
        double v = static_cast<double>(v_[i].v[j]);
        m = b1_ * m + (1.0 - b1_) * g;
        v = b2_ * v + (1.0 - b2_) * g * g;
        m_[i].v[j] = static_cast<S>(m);
        v_[i].v[j] = static_cast<S>(v);
        const double mhat = m / c1;
        const double vhat = v / c2;
        p.value.v[j] =
            static_cast<S>(static_cast<double>(p.value.v[j]) -
                           lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
      p.zero_grad();
    }
  }

  long steps() const { return t_; }
  double lr() const { return lr_; }
  std::size_t size() const { return params_.size(); }
  const std::vector<Param<S>*>& params() const { return params_; }

  Tensor<S>& moment1(std::size_t i) { return m_[i]; }
  Tensor<S>& moment2(std::size_t i) { return v_[i]; }
  void set_steps(long t) { t_ = t; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Param<S>*> params_;
  std::vector<Tensor<S>> m_, v_;
};

// dst <- (1 - tau) * dst + tau * src
template <typename S>
inline void ema_update(Tensor<S>& dst, const Tensor<S>& src, double tau) {
  if (!dst.same_shape(src)) throw ContractError("ema_update: shape mismatch");
  for (std::size_t i = 0; i < dst.v.size(); ++i)
    dst.v[i] = static_cast<S>((1.0 - tau) * static_cast<double>(dst.v[i]) +
                              tau * static_cast<double>(src.v[i]));
}

}  // namespace repdib
