#pragma once

// Reference implementations and check harnesses used across the test suite.
// Everything here is deliberately naive (nested loops, direct formulas) and
// independent of the library's fast paths, so it can serve as an oracle.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "stvc/tensor.hpp"

namespace ref {

// Direct cross-correlation with symmetric zero padding.
// x: [N,C,H,W], w: [K,C,kh,kw] -> [N,K,Ho,Wo]
template <class T>
std::vector<T> conv2d(const std::vector<T>& x, int64_t N, int64_t C, int64_t H, int64_t W,
                      const std::vector<T>& w, int64_t K, int64_t kh, int64_t kw,
                      int64_t stride, int64_t pad, int64_t& Ho, int64_t& Wo) {
  Ho = (H + 2 * pad - kh) / stride + 1;
  Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<T> y(N * K * Ho * Wo, T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          T acc = 0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t iy = oy * stride + ky - pad;
                int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[((n * C + c) * H + iy) * W + ix] * w[((k * C + c) * kh + ky) * kw + kx];
              }
          y[((n * K + k) * Ho + oy) * Wo + ox] = acc;
        }
  return y;
}

// Transposed convolution as an explicit scatter of input taps.
// x: [N,K,H,W], w: [K,C,kh,kw] -> [N,C,Ho,Wo]
template <class T>
std::vector<T> conv2d_transpose(const std::vector<T>& x, int64_t N, int64_t K, int64_t H, int64_t W,
                                const std::vector<T>& w, int64_t C, int64_t kh, int64_t kw,
                                int64_t stride, int64_t pad, int64_t out_pad,
                                int64_t& Ho, int64_t& Wo) {
  Ho = (H - 1) * stride - 2 * pad + kh + out_pad;
  Wo = (W - 1) * stride - 2 * pad + kw + out_pad;
  std::vector<T> y(N * C * Ho * Wo, T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k)
      for (int64_t iy = 0; iy < H; ++iy)
        for (int64_t ix = 0; ix < W; ++ix) {
          T v = x[((n * K + k) * H + iy) * W + ix];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t oy = iy * stride + ky - pad;
                int64_t ox = ix * stride + kx - pad;
                if (oy < 0 || oy >= Ho || ox < 0 || ox >= Wo) continue;
                y[((n * C + c) * Ho + oy) * Wo + ox] += v * w[((k * C + c) * kh + ky) * kw + kx];
              }
        }
  return y;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace ref

namespace fd {

// Central-difference gradient check. `make_loss` must rebuild the graph from
// the current contents of `inputs` and return the scalar loss tensor.
// Analytic grads come from one backward pass; numeric grads from nudging a
// deterministic sample of elements. Tolerances follow the library contract:
// rel. err <= 1e-5 in double (callers pass looser for float).
template <class T>
void check_grads(const std::function<stvc::Tensor<T>()>& make_loss,
                 std::vector<stvc::Tensor<T>> inputs, double h = 1e-4, double tol = 1e-5,
                 int64_t max_probes_per_input = 64) {
  auto loss = make_loss();
  REQUIRE(loss.numel() == 1);
  for (auto& in : inputs) in.zero_grad();
  stvc::backward(loss);
  std::vector<std::vector<T>> analytic;
  for (auto& in : inputs) analytic.push_back(in.grad());

  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& in = inputs[ti];
    int64_t n = in.numel();
    int64_t step = std::max<int64_t>(1, n / max_probes_per_input);
    for (int64_t i = 0; i < n; i += step) {
      T keep = in.values()[i];
      in.values()[i] = keep + (T)h;
      double lp = (double)make_loss().item();
      in.values()[i] = keep - (T)h;
      double lm = (double)make_loss().item();
      in.values()[i] = keep;
      double num = (lp - lm) / (2 * h);
      double ana = (double)analytic[ti][i];
      double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      INFO("input " << ti << " elem " << i << " analytic " << ana << " numeric " << num);
      REQUIRE(err <= tol);
    }
  }
}

}  // namespace fd
