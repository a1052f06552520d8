#pragma once

// Scale-space volumes and the differentiable warp that samples them.
//
// A volume holds M+2 progressively blurred copies of a frame, all at full
// resolution, laid out [N, L, C, H, W] with level 0 the unfiltered input.
// The warp reads the volume at (x + dx, y + dy, s) with trilinear
// interpolation; all three axes clamp at their borders.

#include <cmath>
#include <vector>

#include "stvc/tensor.hpp"

namespace stvc {

inline std::vector<double> gaussian_kernel(double sigma) {
  contract(sigma >= 0, "gaussian_kernel: negative sigma");
  if (sigma == 0) return {1.0};
  int64_t r = std::max<int64_t>(1, (int64_t)std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double z = 0;
  for (int64_t i = -r; i <= r; ++i) z += (k[i + r] = std::exp(-(double)(i * i) / (2 * sigma * sigma)));
  for (double& v : k) v /= z;
  return k;
}

// cumulative blur variance per level; level k of the volume carries
// var[k] = sigma0^2 (4^k - 1) / 3, the sum of one sigma0 blur per octave
inline std::vector<double> blur_variance_schedule(double sigma0, int levels_m) {
  contract(sigma0 > 0 && levels_m >= 1, "blur_variance_schedule: bad arguments");
  std::vector<double> v(levels_m + 2);
  v[0] = 0;
  for (int k = 1; k <= levels_m + 1; ++k)
    v[k] = v[k - 1] + std::pow(std::pow(2.0, k - 1) * sigma0, 2);
  return v;
}

// separable gaussian with replicated edges
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& x, double sigma) {
  contract(x.rank() == 4, "gaussian_blur: expects [N,C,H,W]");
  auto k = gaussian_kernel(sigma);
  if (k.size() == 1) return x;
  int64_t r = ((int64_t)k.size() - 1) / 2;
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> taps(k.begin(), k.end());
  auto kv = Tensor<T>::from_vector({1, 1, (int64_t)k.size(), 1}, taps);
  auto kh = Tensor<T>::from_vector({1, 1, 1, (int64_t)k.size()}, taps);
  auto flat = reshape(x, {N * C, 1, H, W});
  auto padded = pad_replicate(flat, r, r);
  auto out = conv2d(conv2d(padded, kv, 1, 0), kh, 1, 0);
  return reshape(out, {N, C, H, W});
}

namespace detail {
template <class T>
Tensor<T> stack_levels(const std::vector<Tensor<T>>& lv) {
  std::vector<Tensor<T>> r;
  r.reserve(lv.size());
  for (auto& t : lv)
    r.push_back(reshape(t, {t.dim(0), 1, t.dim(1), t.dim(2), t.dim(3)}));
  return concat(r, 1);
}
}  // namespace detail

// pyramid construction: blur with sigma0 at the current octave, record the
// result upsampled back to full resolution, then halve and repeat
template <class T>
Tensor<T> build_ssv_pyramid(const Tensor<T>& x, double sigma0, int levels_m) {
  contract(x.rank() == 4, "build_ssv_pyramid: expects [N,C,H,W]");
  contract(levels_m >= 1, "build_ssv_pyramid: need at least one octave");
  int64_t div = (int64_t)1 << levels_m;
  contract(x.dim(2) % div == 0 && x.dim(3) % div == 0,
           "build_ssv_pyramid: H and W must divide 2^M, got " + shape_str(x.shape()));
  std::vector<Tensor<T>> levels = {x};
  auto cur = x;
  for (int i = 0; i <= levels_m; ++i) {
    cur = gaussian_blur(cur, sigma0);
    auto full = cur;
    for (int j = 0; j < i; ++j) full = upsample2_bilinear(full);
    levels.push_back(full);
    if (i < levels_m) cur = downsample2(cur);
  }
  return detail::stack_levels(levels);
}

// reference volume: each level blurred directly from the source at the
// cumulative sigma, no resampling anywhere
template <class T>
Tensor<T> build_ssv_blur(const Tensor<T>& x, double sigma0, int levels_m) {
  contract(x.rank() == 4, "build_ssv_blur: expects [N,C,H,W]");
  auto sched = blur_variance_schedule(sigma0, levels_m);
  std::vector<Tensor<T>> levels;
  levels.reserve(sched.size());
  for (double var : sched) levels.push_back(gaussian_blur(x, std::sqrt(var)));
  return detail::stack_levels(levels);
}

// field channels: 0 = x displacement, 1 = y displacement, 2 = absolute scale
template <class T>
Tensor<T> scale_space_warp(const Tensor<T>& ssv, const Tensor<T>& field) {
  contract(ssv.rank() == 5, "scale_space_warp: volume must be [N,L,C,H,W]");
  contract(field.rank() == 4 && field.dim(1) == 3, "scale_space_warp: field must be [N,3,H,W]");
  int64_t N = ssv.dim(0), L = ssv.dim(1), C = ssv.dim(2), H = ssv.dim(3), W = ssv.dim(4);
  contract(field.dim(0) == N && field.dim(2) == H && field.dim(3) == W,
           "scale_space_warp: field " + shape_str(field.shape()) + " does not match volume " +
               shape_str(ssv.shape()));

  auto n = detail::op_node<T>({N, C, H, W}, {ssv, field});
  const T* vol = ssv.values().data();
  const T* fld = field.values().data();

  struct Cell {
    int64_t s0, s1, y0, y1, x0, x1;
    T fs, fy, fx;
    bool s_in, y_in, x_in;  // raw coordinate strictly inside the clamp range
  };
  auto locate = [L, H, W](T dx, T dy, T s, int64_t y, int64_t x) {
    Cell c;
    double rs = (double)s, ry = (double)y + (double)dy, rx = (double)x + (double)dx;
    c.s_in = rs > 0 && rs < (double)(L - 1);
    c.y_in = ry > 0 && ry < (double)(H - 1);
    c.x_in = rx > 0 && rx < (double)(W - 1);
    rs = std::clamp(rs, 0.0, (double)(L - 1));
    ry = std::clamp(ry, 0.0, (double)(H - 1));
    rx = std::clamp(rx, 0.0, (double)(W - 1));
    c.s0 = (int64_t)std::floor(rs);
    c.y0 = (int64_t)std::floor(ry);
    c.x0 = (int64_t)std::floor(rx);
    c.s1 = std::min(c.s0 + 1, L - 1);
    c.y1 = std::min(c.y0 + 1, H - 1);
    c.x1 = std::min(c.x0 + 1, W - 1);
    c.fs = (T)(rs - (double)c.s0);
    c.fy = (T)(ry - (double)c.y0);
    c.fx = (T)(rx - (double)c.x0);
    return c;
  };

  for (int64_t b = 0; b < N; ++b) {
    const T* f = fld + b * 3 * H * W;
    const T* v = vol + b * L * C * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        int64_t p = y * W + x;
        Cell c = locate(f[p], f[H * W + p], f[2 * H * W + p], y, x);
        for (int64_t ch = 0; ch < C; ++ch) {
          auto at = [&](int64_t l, int64_t yy, int64_t xx) {
            return v[((l * C + ch) * H + yy) * W + xx];
          };
          auto bil = [&](int64_t l) {
            return (1 - c.fy) * ((1 - c.fx) * at(l, c.y0, c.x0) + c.fx * at(l, c.y0, c.x1)) +
                   c.fy * ((1 - c.fx) * at(l, c.y1, c.x0) + c.fx * at(l, c.y1, c.x1));
          };
          n->val[((b * C + ch) * H + y) * W + x] = (1 - c.fs) * bil(c.s0) + c.fs * bil(c.s1);
        }
      }
  }

  if (n->rg) {
    auto vp = ssv.node();
    auto fp = field.node();
    n->backprop = [vp, fp, N, L, C, H, W, locate](detail::Node<T>& self) {
      if (vp->rg) vp->ensure_grad();
      if (fp->rg) fp->ensure_grad();
      for (int64_t b = 0; b < N; ++b) {
        const T* f = fp->val.data() + b * 3 * H * W;
        const T* v = vp->val.data() + b * L * C * H * W;
        T* gv = vp->rg ? vp->grad.data() + b * L * C * H * W : nullptr;
        T* gf = fp->rg ? fp->grad.data() + b * 3 * H * W : nullptr;
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x) {
            int64_t p = y * W + x;
            Cell c = locate(f[p], f[H * W + p], f[2 * H * W + p], y, x);
            for (int64_t ch = 0; ch < C; ++ch) {
              T g = self.grad[((b * C + ch) * H + y) * W + x];
              if (g == T(0)) continue;
              auto idx = [&](int64_t l, int64_t yy, int64_t xx) {
                return ((l * C + ch) * H + yy) * W + xx;
              };
              T w00 = (1 - c.fy) * (1 - c.fx), w01 = (1 - c.fy) * c.fx;
              T w10 = c.fy * (1 - c.fx), w11 = c.fy * c.fx;
              if (gv) {
                gv[idx(c.s0, c.y0, c.x0)] += g * (1 - c.fs) * w00;
                gv[idx(c.s0, c.y0, c.x1)] += g * (1 - c.fs) * w01;
                gv[idx(c.s0, c.y1, c.x0)] += g * (1 - c.fs) * w10;
                gv[idx(c.s0, c.y1, c.x1)] += g * (1 - c.fs) * w11;
                gv[idx(c.s1, c.y0, c.x0)] += g * c.fs * w00;
                gv[idx(c.s1, c.y0, c.x1)] += g * c.fs * w01;
                gv[idx(c.s1, c.y1, c.x0)] += g * c.fs * w10;
                gv[idx(c.s1, c.y1, c.x1)] += g * c.fs * w11;
              }
              if (gf) {
                auto at = [&](int64_t l, int64_t yy, int64_t xx) { return v[idx(l, yy, xx)]; };
                auto bil = [&](int64_t l) {
                  return (1 - c.fy) * ((1 - c.fx) * at(l, c.y0, c.x0) + c.fx * at(l, c.y0, c.x1)) +
                         c.fy * ((1 - c.fx) * at(l, c.y1, c.x0) + c.fx * at(l, c.y1, c.x1));
                };
                if (c.s_in) gf[2 * H * W + p] += g * (bil(c.s1) - bil(c.s0));
                if (c.y_in) {
                  auto dy_of = [&](int64_t l) {
                    return (1 - c.fx) * (at(l, c.y1, c.x0) - at(l, c.y0, c.x0)) +
                           c.fx * (at(l, c.y1, c.x1) - at(l, c.y0, c.x1));
                  };
                  gf[H * W + p] += g * ((1 - c.fs) * dy_of(c.s0) + c.fs * dy_of(c.s1));
                }
                if (c.x_in) {
                  auto dx_of = [&](int64_t l) {
                    return (1 - c.fy) * (at(l, c.y0, c.x1) - at(l, c.y0, c.x0)) +
                           c.fy * (at(l, c.y1, c.x1) - at(l, c.y1, c.x0));
                  };
                  gf[p] += g * ((1 - c.fs) * dx_of(c.s0) + c.fs * dx_of(c.s1));
                }
              }
            }
          }
      }
    };
  }
  return detail::finish(std::move(n), "scale_space_warp");
}

}  // namespace stvc
