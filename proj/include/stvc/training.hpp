#pragma once

// Synthetic video source, rate-distortion loss assembly, and the training
// loop. Everything is counter-seeded: batch t of run seed s always sees the
// same clips and the same quantization noise, so a resumed run reproduces the
// original bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <string>
#include <vector>

#include "stvc/models.hpp"

namespace stvc {

// ---- synthetic clips --------------------------------------------------------

struct ClipSpec {
  int64_t frames = 3;
  int64_t height = 64, width = 64;
  int max_sprites = 4;
  double max_speed = 2.0;     // sprite velocity, px/frame
  double max_bg_speed = 1.0;  // background pan, px/frame
  double noise = 0.0;         // additive pixel noise stdev
  double cut_prob = 0.0;      // scene cut probability per transition
  bool still = false;         // force all velocities to zero
};

template <class T>
struct Clip {
  std::vector<Tensor<T>> frames;  // each [1,3,H,W], values in [0,1]
  std::vector<Tensor<T>> flow;    // ground truth [1,2,H,W] per transition (dx,dy)
  std::vector<bool> cut;          // per transition: scene changed, flow meaningless
};

namespace detail {

struct Wave {
  double fx, fy, amp, phase[3];
};

struct Sprite {
  double cx, cy, r, vx, vy;
  double col[3];
  double tex_fx, tex_fy, tex_amp, tex_phase;
};

struct Scene {
  double bg_vx = 0, bg_vy = 0;
  std::vector<Wave> waves;
  std::vector<Sprite> sprites;
};

inline Scene random_scene(Rng& rng, const ClipSpec& sp) {
  Scene sc;
  if (!sp.still) {
    sc.bg_vx = rng.uniform(-sp.max_bg_speed, sp.max_bg_speed);
    sc.bg_vy = rng.uniform(-sp.max_bg_speed, sp.max_bg_speed);
  }
  int nw = (int)rng.uniform_int(3, 5);
  for (int k = 0; k < nw; ++k) {
    Wave w;
    double f = rng.uniform(0.02, 0.09), ang = rng.uniform(0.0, 6.2831853);
    w.fx = f * std::cos(ang);
    w.fy = f * std::sin(ang);
    w.amp = rng.uniform(0.04, 0.12);
    for (int c = 0; c < 3; ++c) w.phase[c] = rng.uniform(0.0, 6.2831853);
    sc.waves.push_back(w);
  }
  int ns = (int)rng.uniform_int(1, sp.max_sprites);
  for (int k = 0; k < ns; ++k) {
    Sprite s;
    s.cx = rng.uniform(0.15, 0.85) * (double)sp.width;
    s.cy = rng.uniform(0.15, 0.85) * (double)sp.height;
    s.r = rng.uniform(0.08, 0.22) * (double)std::min(sp.height, sp.width);
    s.vx = sp.still ? 0.0 : rng.uniform(-sp.max_speed, sp.max_speed);
    s.vy = sp.still ? 0.0 : rng.uniform(-sp.max_speed, sp.max_speed);
    for (int c = 0; c < 3; ++c) s.col[c] = rng.uniform(0.15, 0.9);
    double f = rng.uniform(0.05, 0.15), ang = rng.uniform(0.0, 6.2831853);
    s.tex_fx = f * std::cos(ang);
    s.tex_fy = f * std::sin(ang);
    s.tex_amp = rng.uniform(0.0, 0.15);
    s.tex_phase = rng.uniform(0.0, 6.2831853);
    sc.sprites.push_back(s);
  }
  return sc;
}

}  // namespace detail

// Analytic composition: background waves and anti-aliased textured discs are
// sampled at exact subpixel positions each frame, so motion is alias-free and
// the ground-truth flow is the literal generating velocity.
template <class T>
Clip<T> gen_clip(uint64_t seed, const ClipSpec& sp) {
  Rng rng(seed);
  auto scene = detail::random_scene(rng, sp);
  Clip<T> out;
  const int64_t H = sp.height, W = sp.width;
  const double aa = 1.2;  // edge softness in px

  for (int64_t t = 0; t < sp.frames; ++t) {
    if (t > 0) {
      bool cut = !sp.still && rng.uniform(0.0, 1.0) < sp.cut_prob;
      out.cut.push_back(cut);
      if (cut) scene = detail::random_scene(rng, sp);
    }
    std::vector<T> img((size_t)(3 * H * W));
    std::vector<T> flow((size_t)(2 * H * W));
    double td = (double)t;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double px = (double)x, py = (double)y;
        double val[3];
        double bx = px - scene.bg_vx * td, by = py - scene.bg_vy * td;
        for (int c = 0; c < 3; ++c) {
          double v = 0.45;
          for (auto& w : scene.waves)
            v += w.amp * std::cos(6.2831853 * (w.fx * bx + w.fy * by) + w.phase[c]);
          val[c] = v;
        }
        double fvx = scene.bg_vx, fvy = scene.bg_vy;
        for (auto& s : scene.sprites) {
          double sx = s.cx + s.vx * td, sy = s.cy + s.vy * td;
          double d = std::sqrt((px - sx) * (px - sx) + (py - sy) * (py - sy));
          double alpha = std::clamp((s.r - d) / aa + 0.5, 0.0, 1.0);
          if (alpha <= 0) continue;
          double tex =
              s.tex_amp *
              std::cos(6.2831853 * (s.tex_fx * (px - sx) + s.tex_fy * (py - sy)) + s.tex_phase);
          for (int c = 0; c < 3; ++c) val[c] += alpha * (s.col[c] + tex - val[c]);
          if (alpha > 0.5) {
            fvx = s.vx;
            fvy = s.vy;
          }
        }
        for (int c = 0; c < 3; ++c) {
          double v = val[c];
          if (sp.noise > 0) v += rng.normal(0.0, sp.noise);
          img[(size_t)((c * H + y) * W + x)] = (T)std::clamp(v, 0.0, 1.0);
        }
        flow[(size_t)((0 * H + y) * W + x)] = (T)fvx;
        flow[(size_t)((1 * H + y) * W + x)] = (T)fvy;
      }
    out.frames.push_back(Tensor<T>::from_vector({1, 3, H, W}, std::move(img)));
    if (t > 0) out.flow.push_back(Tensor<T>::from_vector({1, 2, H, W}, std::move(flow)));
  }
  return out;
}

// batch of clips as per-timestep tensors [B,3,H,W]
template <class T>
std::vector<Tensor<T>> gen_batch(uint64_t seed, uint64_t step, int64_t batch,
                                 const ClipSpec& sp) {
  std::vector<std::vector<Tensor<T>>> clips;
  for (int64_t b = 0; b < batch; ++b)
    clips.push_back(gen_clip<T>(derive_seed(seed, (uint64_t)b + 1, step), sp).frames);
  std::vector<Tensor<T>> out;
  for (int64_t t = 0; t < sp.frames; ++t) {
    std::vector<Tensor<T>> parts;
    for (auto& c : clips) parts.push_back(c[(size_t)t]);
    out.push_back(batch == 1 ? parts[0] : concat(parts, 0));
  }
  return out;
}

// ---- loss -------------------------------------------------------------------

template <class T>
struct RdTerms {
  Tensor<T> loss;  // scalar
  double distortion = 0;  // 255^2-scaled mse, mean over batch
  double rate = 0;        // bits per pixel, mean over batch
};

// loss = mean_i [ 255^2 * mse_i + beta_i * 255^2 * bpp_i ] over a clip batch.
// Rate carries the same 255^2 factor as distortion so both sit in matched
// units: the objective is 255^2 * (mse + beta * bpp), and beta keeps its
// usual meaning as the R-D tradeoff against [0,1]-scaled mse. Without the
// factor a beta near 1e-3 would weight rate six orders below distortion and
// the beta ladder could not shape the frontier.
// `betas` holds one weight per sample; pass a single value for fixed-rate.
template <class T>
RdTerms<T> rd_loss(const VideoCodec<T>& codec, const std::vector<Tensor<T>>& frames,
                   const std::vector<double>& betas, const ModCtx& mc, uint64_t seed,
                   uint64_t step) {
  contract(!frames.empty(), "rd_loss: no frames");
  int64_t N = frames[0].dim(0), H = frames[0].dim(2), W = frames[0].dim(3);
  int64_t Tn = (int64_t)frames.size();
  contract((int64_t)betas.size() == N || betas.size() == 1, "rd_loss: betas per sample");

  auto per_sample_sse = [&](const Tensor<T>& x, const Tensor<T>& xr) {
    auto e = sub(x, xr);
    return per_sample_bits(mul(e, e));  // same collapse, just not bits
  };

  auto i = codec.iframe_train(frames[0], mc, seed, step);
  Tensor<T> sse = per_sample_sse(frames[0], i.recon);
  Tensor<T> bits = i.bits;
  CodecState<T> st{i.recon, std::nullopt, 2};
  for (int64_t t = 1; t < Tn; ++t) {
    auto p = codec.pframe_train(frames[(size_t)t], st, mc, seed, step);
    sse = add(sse, per_sample_sse(frames[(size_t)t], p.recon));
    bits = add(bits, p.bits);
    st = {p.recon, p.vq, st.t + 1};
  }

  double px = (double)(Tn * H * W);
  auto d_i = mul(sse, Tensor<T>::from_vector({1}, {(T)(255.0 * 255.0 / (px * 3.0))}));
  auto r_i = mul(bits, Tensor<T>::from_vector({1}, {(T)(1.0 / px)}));

  std::vector<T> bv((size_t)N, (T)(betas[0] * 255.0 * 255.0));
  if (betas.size() > 1)
    for (int64_t n = 0; n < N; ++n) bv[(size_t)n] = (T)(betas[(size_t)n] * 255.0 * 255.0);
  auto beta_t = Tensor<T>::from_vector({N}, std::move(bv));

  RdTerms<T> out{mean(add(d_i, mul(r_i, beta_t))), 0, 0};
  out.distortion = mean(d_i).item();
  out.rate = mean(r_i).item();
  return out;
}

// ---- divergence guard ---------------------------------------------------------

// Trips when the loss sits above 10x the running median for `patience`
// consecutive steps. The median pools up to 2048 past losses, so a plateau of
// garbage values cannot hide itself: the pre-divergence baseline dominates the
// median for at least half the pool length, which is far longer than any
// sensible patience.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(int64_t patience) : patience_(patience) {}

  void observe(double loss) {
    if ((int64_t)hist_.size() >= warmup_) {
      std::vector<double> tmp(hist_.begin(), hist_.end());
      std::nth_element(tmp.begin(), tmp.begin() + (long)tmp.size() / 2, tmp.end());
      double med = tmp[tmp.size() / 2];
      consec_ = loss > 10.0 * med ? consec_ + 1 : 0;
      if (consec_ >= patience_) tripped_ = true;
    }
    hist_.push_back(loss);
    if ((int64_t)hist_.size() > 2048) hist_.pop_front();
  }

  bool tripped() const { return tripped_; }

 private:
  int64_t patience_, warmup_ = 20, consec_ = 0;
  bool tripped_ = false;
  std::deque<double> hist_;
};

// ---- training loop ----------------------------------------------------------

struct TrainConfig {
  int64_t steps = 30000;
  int64_t batch = 8;
  ClipSpec clip;
  double lr = 1e-4;
  int64_t lr_drop_step = 25000;  // lr/10 from this step on
  double beta = 1e-3;            // fixed-rate weight (ignored when the model is vbr)
  uint64_t seed = 1;
  std::string csv_path;    // per-step log, empty to disable
  std::string ckpt_path;   // checkpoint target, empty to disable
  int64_t ckpt_every = 0;  // 0: only at the end (when ckpt_path set)
  int64_t log_every = 25;
  bool verbose = false;
  // divergence guard: abort after this many consecutive steps at >10x the
  // running median loss
  int64_t guard_window = 100;
};

struct TrainResult {
  int64_t steps_run = 0;
  double final_loss = 0;
  double final_distortion = 0;
  double final_rate = 0;
  bool diverged = false;
};

template <class T>
TrainResult train(const VideoCodec<T>& codec, ParameterStore<T>& ps, AdamState<T>& adam,
                  const TrainConfig& tc) {
  const ModelConfig& mcfg = codec.config();
  std::ofstream csv;
  if (!tc.csv_path.empty()) {
    bool fresh = adam.step == 0;
    csv.open(tc.csv_path, fresh ? std::ios::trunc : std::ios::app);
    contract(csv.good(), "train: cannot open csv log " + tc.csv_path);
    if (fresh) csv << "step,loss,distortion,bpp,lr,beta\n";
  }

  DivergenceGuard guard(tc.guard_window);
  TrainResult res;

  while (adam.step < tc.steps) {
    uint64_t step = (uint64_t)adam.step;
    auto frames = gen_batch<T>(derive_seed(tc.seed, 0xDA7A), step, tc.batch, tc.clip);

    ModCtx mc;
    std::vector<double> betas{tc.beta};
    double beta_log = tc.beta;
    if (mcfg.vbr) {
      Rng brng(derive_seed(tc.seed, 0xBE7A, step));
      mc.active = true;
      betas.clear();
      beta_log = 0;
      for (int64_t n = 0; n < tc.batch; ++n) {
        int64_t lvl = brng.uniform_int(0, mcfg.vbr_levels - 1);
        mc.levels.push_back(lvl);
        betas.push_back(mcfg.beta_table[(size_t)lvl]);
        beta_log += betas.back() / (double)tc.batch;
      }
    }

    ps.zero_grad();
    auto terms = rd_loss(codec, frames, betas, mc, derive_seed(tc.seed, 0x401E), step);
    double loss = terms.loss.item();
    if (!std::isfinite(loss)) throw NumericError("train: non-finite loss at step " +
                                                 std::to_string(adam.step));
    backward(terms.loss);
    double lr = (int64_t)step >= tc.lr_drop_step ? tc.lr / 10.0 : tc.lr;
    adam_step(ps, adam, lr);

    res.steps_run += 1;
    res.final_loss = loss;
    res.final_distortion = terms.distortion;
    res.final_rate = terms.rate;

    if (csv.is_open() && ((int64_t)step % tc.log_every == 0 || adam.step == tc.steps)) {
      char line[160];
      std::snprintf(line, sizeof line, "%lld,%.6g,%.6g,%.6g,%.3g,%.6g\n", (long long)step, loss,
                    terms.distortion, terms.rate, lr, beta_log);
      csv << line;
      csv.flush();
    }
    if (tc.verbose && (int64_t)step % tc.log_every == 0)
      std::fprintf(stderr, "step %6lld  loss %.4f  D %.4f  bpp %.4f\n", (long long)step, loss,
                   terms.distortion, terms.rate);

    guard.observe(loss);
    if (guard.tripped()) {
      res.diverged = true;
      break;
    }

    if (!tc.ckpt_path.empty() && tc.ckpt_every > 0 && adam.step % tc.ckpt_every == 0 &&
        adam.step < tc.steps)
      save_checkpoint(ps, &adam, tc.ckpt_path);
  }
  if (!tc.ckpt_path.empty()) save_checkpoint(ps, &adam, tc.ckpt_path);
  return res;
}

// beta ladder for the annealed low-rate recipe: each stage reuses the
// previous stage's weights and tightens the rate penalty
inline std::vector<double> anneal_schedule() {
  return {1.5625e-4, 3.125e-4, 6.25e-4, 1.25e-3, 2.5e-3, 5e-3};
}

}  // namespace stvc
