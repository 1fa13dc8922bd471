#pragma once

#include <cmath>
#include <string>

#include "repdib/nn.hpp"
#include "repdib/rng.hpp"
#include "repdib/tape.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

// Gaussian variational bottleneck. The input of width 2h is split into a mean
// half and a log-sigma half; the stochastic path samples
// z_hat = f(mu + sigma * eps) and pays a KL penalty against a unit Gaussian,
// the deterministic path is f(mu) and consumes no randomness.
template <typename S>
struct VibLayer {
  // log-sigma is clamped to keep sigma away from collapse and blow-up.
  static constexpr double kLogSigmaMin = -6.0;
  static constexpr double kLogSigmaMax = 2.0;

  int half_dim = 0;
  Param<S> proj_w;  // h x h output projection
  Param<S> proj_b;
  bool trainable = true;

  VibLayer() = default;

  VibLayer(const std::string& name, int h, Rng& rng) : half_dim(h) {
    Tensor<S> w(h, h);
    const double bound = std::sqrt(6.0 / (h + h));
    for (S& x : w.v) x = static_cast<S>(rng.uniform(-bound, bound));
    proj_w = Param<S>(name + ".w", std::move(w));
    proj_b = Param<S>(name + ".b", Tensor<S>(1, h, S(0)));
  }

  struct ForwardOut {
    Var<S> z_hat;  // n x h
    Var<S> kl;     // scalar, mean over the batch
  };

  // Stochastic path: reparameterized sample plus closed-form KL
  // 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) per row.
  ForwardOut forward(Tape<S>& t, Var<S> z, Rng& rng) const {
    check_width(z.cols());
    const int h = half_dim, n = z.rows();
    Var<S> mu = slice_cols(z, 0, h);
    Var<S> log_sigma = clamp(slice_cols(z, h, 2 * h), kLogSigmaMin, kLogSigmaMax);
    Var<S> sigma = repdib::exp(log_sigma);

    Tensor<S> eps(n, h);
    for (S& x : eps.v) x = static_cast<S>(rng.normal());
    Var<S> sample = add(mu, mul(sigma, t.constant(eps)));
    Var<S> z_hat = project(t, sample);

    Var<S> per_dim = add_const(
        sub(add(square(mu), square(sigma)), scale(log_sigma, 2.0)), -1.0);
    Var<S> kl = scale(total_sum(per_dim), 0.5 / static_cast<double>(n));
    return {z_hat, kl};
  }

  // Deterministic path: f(mu). Sigma never enters and no rng is touched.
  Var<S> deterministic(Tape<S>& t, Var<S> z) const {
    check_width(z.cols());
    return project(t, slice_cols(z, 0, half_dim));
  }

  Tensor<S> deterministic(const Tensor<S>& z) const {
    check_width(z.cols);
    const int h = half_dim;
    Tensor<S> out(z.rows, h, S(0));
    for (int r = 0; r < z.rows; ++r) {
      const S* mu = z.row(r);
      S* o = out.row(r);
      for (int c = 0; c < h; ++c) o[c] = proj_b.value.v[c];
      for (int k = 0; k < h; ++k) {
        const S m = mu[k];
        const S* wrow = proj_w.value.row(k);
        for (int c = 0; c < h; ++c) o[c] += m * wrow[c];
      }
    }
    ensure_finite(out, "vib_deterministic");
    return out;
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&proj_w);
    out.push_back(&proj_b);
  }

 private:
  void check_width(int cols) const {
    if (cols != 2 * half_dim)
      throw ContractError("vib: input width " + std::to_string(cols) +
                          " is not twice the latent width " +
                          std::to_string(half_dim));
  }

  Var<S> project(Tape<S>& t, Var<S> x) const {
    auto& wp = const_cast<Param<S>&>(proj_w);
    auto& bp = const_cast<Param<S>&>(proj_b);
    Var<S> w = trainable ? t.leaf(wp) : t.constant(wp.value);
    Var<S> b = trainable ? t.leaf(bp) : t.constant(bp.value);
    return add(matmul(x, w), b);
  }
};

}  // namespace repdib
