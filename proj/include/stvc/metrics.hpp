#pragma once

// Evaluation metrics: 8-bit PSNR, bits-per-pixel, Bjontegaard rate delta, and
// the decorrelation (whiteness) report comparing raw frames against the
// transform's normalized residual.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "stvc/common.hpp"
#include "stvc/models.hpp"
#include "stvc/tensor.hpp"

namespace stvc {

inline uint8_t to_u8(double v) {
  double s = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return (uint8_t)s;
}

// Mean over frames of per-frame 10*log10(255^2 / MSE), both sides rounded to
// 8-bit first. A perfect frame contributes +inf, which propagates through the
// mean by IEEE rules.
template <class T>
double psnr(const Tensor<T>& x, const Tensor<T>& xhat) {
  contract(x.shape() == xhat.shape() && x.rank() == 4, "psnr: need matching [T,3,H,W]");
  int64_t tt = x.shape()[0], per = x.numel() / tt;
  const auto& a = x.values();
  const auto& b = xhat.values();
  double acc = 0;
  for (int64_t f = 0; f < tt; ++f) {
    double sse = 0;
    for (int64_t i = 0; i < per; ++i) {
      double d = (double)to_u8((double)a[(size_t)(f * per + i)]) -
                 (double)to_u8((double)b[(size_t)(f * per + i)]);
      sse += d * d;
    }
    double mse = sse / (double)per;
    acc += mse == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(65025.0 / mse);
  }
  return acc / (double)tt;
}

inline double bpp_of(size_t file_bytes, int64_t frames, int64_t height, int64_t width) {
  contract(frames > 0 && height > 0 && width > 0, "bpp_of: empty video");
  return (double)file_bytes * 8.0 / ((double)frames * (double)height * (double)width);
}

struct RdPoint {
  std::string model;
  double quality = 0;  // beta, or level index for vbr streams
  double bpp = 0;
  double psnr = 0;
};

namespace detail {

// least-squares polynomial fit, low order, tiny normal-equation solve
inline std::vector<double> polyfit(const std::vector<double>& x, const std::vector<double>& y,
                                   int order) {
  int n = order + 1;
  std::vector<double> ata((size_t)(n * n), 0.0), atb((size_t)n, 0.0);
  for (size_t k = 0; k < x.size(); ++k) {
    std::vector<double> pw((size_t)n, 1.0);
    for (int i = 1; i < n; ++i) pw[(size_t)i] = pw[(size_t)i - 1] * x[k];
    for (int i = 0; i < n; ++i) {
      atb[(size_t)i] += pw[(size_t)i] * y[k];
      for (int j = 0; j < n; ++j) ata[(size_t)(i * n + j)] += pw[(size_t)i] * pw[(size_t)j];
    }
  }
  // gaussian elimination with partial pivoting
  for (int c = 0; c < n; ++c) {
    int piv = c;
    for (int r = c + 1; r < n; ++r)
      if (std::fabs(ata[(size_t)(r * n + c)]) > std::fabs(ata[(size_t)(piv * n + c)])) piv = r;
    if (piv != c) {
      for (int j = 0; j < n; ++j) std::swap(ata[(size_t)(c * n + j)], ata[(size_t)(piv * n + j)]);
      std::swap(atb[(size_t)c], atb[(size_t)piv]);
    }
    contract(std::fabs(ata[(size_t)(c * n + c)]) > 1e-12, "polyfit: singular system");
    for (int r = 0; r < n; ++r) {
      if (r == c) continue;
      double f = ata[(size_t)(r * n + c)] / ata[(size_t)(c * n + c)];
      for (int j = c; j < n; ++j) ata[(size_t)(r * n + j)] -= f * ata[(size_t)(c * n + j)];
      atb[(size_t)r] -= f * atb[(size_t)c];
    }
  }
  std::vector<double> coef((size_t)n);
  for (int i = 0; i < n; ++i) coef[(size_t)i] = atb[(size_t)i] / ata[(size_t)(i * n + i)];
  return coef;
}

inline double poly_integral(const std::vector<double>& coef, double lo, double hi) {
  double acc = 0, plo = lo, phi = hi;
  for (size_t i = 0; i < coef.size(); ++i) {
    acc += coef[i] * (phi - plo) / (double)(i + 1);
    plo *= lo;
    phi *= hi;
  }
  return acc;
}

}  // namespace detail

// Bjontegaard rate delta in percent: average log-rate gap between the two
// fitted R-D curves over their shared quality range. Negative means `test`
// spends fewer bits than `ref` at matched quality.
inline double bd_rate(std::vector<RdPoint> ref, std::vector<RdPoint> test) {
  contract(ref.size() >= 2 && test.size() >= 2, "bd_rate: need at least 2 points per curve");
  auto prep = [](std::vector<RdPoint>& pts, std::vector<double>& q, std::vector<double>& lr) {
    std::sort(pts.begin(), pts.end(),
              [](const RdPoint& a, const RdPoint& b) { return a.psnr < b.psnr; });
    for (const auto& p : pts) {
      contract(p.bpp > 0 && std::isfinite(p.psnr), "bd_rate: invalid point");
      q.push_back(p.psnr);
      lr.push_back(std::log(p.bpp));
    }
  };
  std::vector<double> qr, lrr, qt, lrt;
  prep(ref, qr, lrr);
  prep(test, qt, lrt);
  double lo = std::max(qr.front(), qt.front());
  double hi = std::min(qr.back(), qt.back());
  contract(hi > lo, "bd_rate: curves do not overlap in quality");
  int order = (int)std::min<size_t>(3, std::min(qr.size(), qt.size()) - 1);
  auto cr = detail::polyfit(qr, lrr, order);
  auto ct = detail::polyfit(qt, lrt, order);
  double gap =
      (detail::poly_integral(ct, lo, hi) - detail::poly_integral(cr, lo, hi)) / (hi - lo);
  return (std::exp(gap) - 1.0) * 100.0;
}

// ---- decorrelation report ------------------------------------------------------

// Pearson correlation over paired samples
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  contract(a.size() == b.size() && a.size() >= 2, "pearson: need matched samples");
  double n = (double)a.size(), sa = 0, sb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  double ma = sa / n, mb = sb / n, cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0 || vb <= 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

// lag-1 temporal correlation: each pixel of frame t paired with the same pixel
// of frame t+1, pooled over the whole clip
template <class T>
double lag1_temporal(const Tensor<T>& clip) {
  contract(clip.rank() == 4 && clip.shape()[0] >= 2, "lag1_temporal: need [T>=2,C,H,W]");
  int64_t tt = clip.shape()[0], per = clip.numel() / tt;
  const auto& v = clip.values();
  std::vector<double> a, b;
  a.reserve((size_t)((tt - 1) * per));
  b.reserve(a.capacity());
  for (int64_t f = 0; f + 1 < tt; ++f)
    for (int64_t i = 0; i < per; ++i) {
      a.push_back((double)v[(size_t)(f * per + i)]);
      b.push_back((double)v[(size_t)((f + 1) * per + i)]);
    }
  return pearson(a, b);
}

// spatial autocorrelation at a pixel offset, averaged over the horizontal and
// vertical directions and pooled over frames/channels
template <class T>
double spatial_autocorr(const Tensor<T>& clip, int64_t offset) {
  contract(clip.rank() == 4, "spatial_autocorr: need [T,C,H,W]");
  int64_t tt = clip.shape()[0], c = clip.shape()[1], h = clip.shape()[2], w = clip.shape()[3];
  contract(offset >= 1 && offset < w && offset < h, "spatial_autocorr: offset out of range");
  const auto& v = clip.values();
  std::vector<double> a, b;
  for (int64_t f = 0; f < tt; ++f)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* p = v.data() + (f * c + ch) * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x + offset < w; ++x) {
          a.push_back((double)p[y * w + x]);
          b.push_back((double)p[y * w + x + offset]);
        }
      for (int64_t y = 0; y + offset < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          a.push_back((double)p[y * w + x]);
          b.push_back((double)p[(y + offset) * w + x]);
        }
    }
  return pearson(a, b);
}

struct WhitenessReport {
  double lag1_input = 0;
  double lag1_resid = 0;
  std::vector<double> spatial_input;  // offsets 1..4
  std::vector<double> spatial_resid;
};

// Runs the codec's eval path over the clip and compares the correlation
// structure of the raw frames against the pre-quantization normalized
// residual. Raw numbers only; callers judge.
template <class T>
WhitenessReport whiteness_diag(const VideoCodec<T>& codec, const Tensor<T>& frames,
                               const ModCtx& mc = {}) {
  contract(frames.rank() == 4 && frames.shape()[0] >= 3, "whiteness_diag: need [T>=3,3,H,W]");
  int64_t tt = frames.shape()[0], h = frames.shape()[2], w = frames.shape()[3];
  auto frame_at = [&](int64_t f) {
    return reshape(slice(frames, 0, f, f + 1), {1, 3, h, w});
  };

  auto ic = codec.iframe_encode(frame_at(0), mc);
  CodecState<T> st{ic.recon, {}, 2};
  std::vector<Tensor<T>> resids;
  for (int64_t f = 1; f < tt; ++f) {
    auto pc = codec.pframe_encode(frame_at(f), st, mc);
    resids.push_back(pc.norm_resid.detach());
    st = CodecState<T>{pc.synth.recon, pc.v, st.t + 1};
  }
  Tensor<T> resid = resids.size() == 1 ? resids[0] : concat(resids, 0);

  WhitenessReport rep;
  rep.lag1_input = lag1_temporal(frames);
  rep.lag1_resid = lag1_temporal(resid);
  for (int64_t d = 1; d <= 4; ++d) {
    rep.spatial_input.push_back(spatial_autocorr(frames, d));
    rep.spatial_resid.push_back(spatial_autocorr(resid, d));
  }
  return rep;
}

}  // namespace stvc
