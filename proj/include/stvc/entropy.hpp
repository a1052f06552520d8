#pragma once

// Entropy models over integer-quantized latents: additive-noise proxy at
// train time, half-away-from-zero rounding at eval, a learned per-channel
// factorized prior (monotone CDF network), and conditional Gaussians whose
// rate term and coder tables share one bin-mass formula.

#include <cmath>
#include <string>
#include <vector>

#include "stvc/nn.hpp"
#include "stvc/range_coder.hpp"
#include "stvc/tensor.hpp"

namespace stvc {

inline constexpr int64_t kMainHalfSupport = 64;   // main latents code over [-64, 63]
inline constexpr int64_t kHyperHalfSupport = 32;  // hyper latents over [-32, 31]

// smallest probability the rate term sees; caps any element at 50 bits
template <class T>
constexpr T prob_guard() {
  return (T)8.881784197001252e-16;  // 2^-50
}

template <class T>
Tensor<T> quantize_train(const Tensor<T>& x, uint64_t seed, uint64_t stream, uint64_t step) {
  Rng rng(derive_seed(seed, stream, step));
  std::vector<T> noise((size_t)x.numel());
  for (auto& v : noise) v = (T)rng.uniform(-0.5, 0.5);
  return add(x, Tensor<T>::from_vector(x.shape(), noise));
}

template <class T>
Tensor<T> quantize_eval(const Tensor<T>& x) {
  return round_haz(x);
}

// sigma floor keeps bins from collapsing below coder resolution
template <class T>
Tensor<T> sigma_from_raw(const Tensor<T>& raw) {
  return add(softplus(raw), 0.01);
}

inline double softplus_inv(double y) { return std::log(std::expm1(y)); }

// mass of [d-1/2, d+1/2] under a zero-mean gaussian; erfc on the small tail
// side so values stay representable far out
inline double gaussian_bin_mass(double d, double sigma) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  double a = (d - 0.5) / sigma, b = (d + 0.5) / sigma;
  if (a + b > 0) return 0.5 * (std::erfc(a * inv_sqrt2) - std::erfc(b * inv_sqrt2));
  return 0.5 * (std::erfc(-b * inv_sqrt2) - std::erfc(-a * inv_sqrt2));
}

// per-element -log2 P(y in its unit bin | mu, sigma); custom op with analytic
// gradients for y, mu, sigma
template <class T>
Tensor<T> discrete_gaussian_bits(const Tensor<T>& y, const Tensor<T>& mu, const Tensor<T>& sigma) {
  contract(y.shape() == mu.shape() && y.shape() == sigma.shape(),
           "discrete_gaussian_bits: shape mismatch");
  auto n = detail::op_node<T>(y.shape(), {y, mu, sigma});
  const T* yv = y.values().data();
  const T* mv = mu.values().data();
  const T* sv = sigma.values().data();
  const double guard = (double)prob_guard<T>();
  const double inv_ln2 = 1.4426950408889634074;
  for (int64_t i = 0; i < y.numel(); ++i) {
    double s = (double)sv[i];
    if (!(s > 0)) throw NumericError("discrete_gaussian_bits: sigma must be positive");
    double p = gaussian_bin_mass((double)yv[i] - (double)mv[i], s);
    n->val[i] = (T)(-std::log(std::max(p, guard)) * inv_ln2);
  }
  if (n->rg) {
    auto yp = y.node();
    auto mp = mu.node();
    auto sp = sigma.node();
    n->backprop = [yp, mp, sp, guard, inv_ln2](detail::Node<T>& self) {
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      if (yp->rg) yp->ensure_grad();
      if (mp->rg) mp->ensure_grad();
      if (sp->rg) sp->ensure_grad();
      for (size_t i = 0; i < self.val.size(); ++i) {
        double g = (double)self.grad[i];
        if (g == 0) continue;
        double d = (double)yp->val[i] - (double)mp->val[i];
        double s = (double)sp->val[i];
        double p = gaussian_bin_mass(d, s);
        if (p <= guard) continue;  // clamped: flat
        double a = (d - 0.5) / s, b = (d + 0.5) / s;
        double pa = std::exp(-0.5 * a * a) * inv_sqrt2pi;
        double pb = std::exp(-0.5 * b * b) * inv_sqrt2pi;
        double dbits_dp = -inv_ln2 / p;
        double dp_dd = (pb - pa) / s;
        double dp_ds = (a * pa - b * pb) / s;
        if (yp->rg) yp->grad[i] += (T)(g * dbits_dp * dp_dd);
        if (mp->rg) mp->grad[i] -= (T)(g * dbits_dp * dp_dd);
        if (sp->rg) sp->grad[i] += (T)(g * dbits_dp * dp_ds);
      }
    };
  }
  return detail::finish(std::move(n), "discrete_gaussian_bits");
}

// coder table for one element: support centered on round(mu), escape carries
// the (always nonzero) tail
inline CdfTable gaussian_table(double mu, double sigma, int64_t half_support) {
  contract(sigma > 0 && half_support >= 1, "gaussian_table: bad arguments");
  int64_t center = std::llround(mu);
  int64_t kmin = center - half_support;
  std::vector<double> p(2 * half_support);
  double sum = 0;
  for (int64_t i = 0; i < 2 * half_support; ++i)
    sum += (p[i] = std::max(0.0, gaussian_bin_mass((double)(kmin + i) - mu, sigma)));
  double tail = std::max(1.0 - sum, 2.220446049250313e-16);
  return freeze_pmf(p, kmin, tail);
}

// learned factorized prior: per channel, a 4-layer monotone network maps a
// real latent value to its CDF. softplus-positive weights and tanh-bounded
// gates keep it increasing for any parameter setting; zero-initialized biases
// and gates make the initial density symmetric around 0.
template <class T>
class FactorizedPrior {
 public:
  FactorizedPrior(ParameterStore<T>& ps, const std::string& prefix, int64_t channels)
      : ps_(&ps), prefix_(prefix), C_(channels) {
    contract(channels >= 1, "FactorizedPrior: channels must be positive");
    static constexpr int64_t widths[5] = {1, 8, 8, 8, 1};
    for (int k = 1; k <= 4; ++k) {
      int64_t fan_in = widths[k - 1], fan_out = widths[k];
      T w0 = (T)softplus_inv(1.0 / (double)fan_in);
      ps.get_or_create(key("w", k), {C_, fan_out, fan_in},
                       [&](std::vector<T>& v) { std::fill(v.begin(), v.end(), w0); });
      ps.get_or_create(key("b", k), {C_, fan_out, 1}, [](std::vector<T>&) {});
      if (k < 4) ps.get_or_create(key("a", k), {C_, fan_out, 1}, [](std::vector<T>&) {});
    }
  }

  int64_t channels() const { return C_; }

  // t: [N, C, P] of evaluation points, returns CDF values in (0, 1)
  Tensor<T> cdf(const Tensor<T>& t) const {
    contract(t.rank() == 3 && t.dim(1) == C_, "FactorizedPrior::cdf: expects [N,C,P]");
    int64_t N = t.dim(0), P = t.dim(2);
    static constexpr int64_t widths[5] = {1, 8, 8, 8, 1};
    auto u = reshape(t, {N, C_, 1, P});
    for (int k = 1; k <= 4; ++k) {
      int64_t in = widths[k - 1], out = widths[k];
      auto w = softplus(ps_->at(key("w", k)));
      auto prod = mul(mul(Tensor<T>::full({N, C_, out, in, P}, 1), reshape(u, {N, C_, 1, in, P})),
                      reshape(w, {C_, out, in, 1}));
      u = add(reshape(sum_axis(prod, 3), {N, C_, out, P}), ps_->at(key("b", k)));
      if (k < 4) u = add(u, mul(tanh(u), tanh(ps_->at(key("a", k)))));
    }
    return sigmoid(reshape(u, {N, C_, P}));
  }

  // y: [N, C, H, W] continuous (noisy or rounded) latents -> per-element bits
  Tensor<T> bits(const Tensor<T>& y) const {
    contract(y.rank() == 4 && y.dim(1) == C_, "FactorizedPrior::bits: expects [N,C,H,W]");
    int64_t N = y.dim(0), H = y.dim(2), W = y.dim(3);
    auto t = reshape(y, {N, C_, H * W});
    auto p = sub(cdf(add(t, 0.5)), cdf(add(t, -0.5)));
    auto bits = mul(log(clamp(p, prob_guard<T>(), (T)2)), -1.4426950408889634074);
    return reshape(bits, {N, C_, H, W});
  }

  // frozen coder table for one channel over [-half_support, half_support)
  CdfTable table(int64_t channel, int64_t half_support) const {
    contract(channel >= 0 && channel < C_, "FactorizedPrior::table: bad channel");
    contract(half_support >= 1, "FactorizedPrior::table: bad support");
    int64_t npts = 2 * half_support + 1;
    std::vector<T> grid((size_t)(C_ * npts));
    for (int64_t c = 0; c < C_; ++c)
      for (int64_t i = 0; i < npts; ++i)
        grid[(size_t)(c * npts + i)] = (T)(-half_support + i) - (T)0.5;
    auto cv = cdf(Tensor<T>::from_vector({1, C_, npts}, grid));
    std::vector<double> p(2 * half_support);
    double sum = 0;
    for (int64_t i = 0; i < 2 * half_support; ++i) {
      double lo = (double)cv.values()[(size_t)(channel * npts + i)];
      double hi = (double)cv.values()[(size_t)(channel * npts + i + 1)];
      sum += (p[i] = std::max(0.0, hi - lo));
    }
    double tail = std::max(1.0 - sum, 2.220446049250313e-16);
    return freeze_pmf(p, -half_support, tail);
  }

 private:
  std::string key(const char* kind, int layer) const {
    return prefix_ + "." + kind + std::to_string(layer);
  }
  ParameterStore<T>* ps_;
  std::string prefix_;
  int64_t C_;
};

}  // namespace stvc
