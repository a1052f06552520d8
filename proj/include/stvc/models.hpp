#pragma once

// The codec model family. One master P-frame forward covers all four
// transforms:
//   x̂_t = h_mu(x̂_{t-1}, w_t) + h_sigma(x̂_{t-1}, w_t) ⊙ g_v(v_t, w_t)
// where h_mu is either a scale-space warp (SSF, STAT_SSF) or a learned
// network (TAT, STAT), h_sigma is a learned full-resolution scalar map
// (exp-parameterized; identically 1 for SSF), and TAT simply has no flow
// latent (its w features enter as zeros). Encoders quantize w first and
// compute v from the resulting prediction residual, so the encoder-side
// reconstruction goes through the exact same synthesis path the decoder runs.

#include <optional>
#include <string>
#include <vector>

#include "stvc/entropy.hpp"
#include "stvc/scale_space.hpp"

namespace stvc {

enum class Transform : uint8_t { TAT = 0, SSF = 1, STAT = 2, STAT_SSF = 3 };
enum class PriorKind : uint8_t { FACTORIZED = 0, SP = 1, TP = 2, TP_PLUS = 3, SP_TP_PLUS = 4 };

inline const char* to_string(Transform t) {
  switch (t) {
    case Transform::TAT: return "tat";
    case Transform::SSF: return "ssf";
    case Transform::STAT: return "stat";
    case Transform::STAT_SSF: return "stat-ssf";
  }
  return "?";
}

inline const char* to_string(PriorKind p) {
  switch (p) {
    case PriorKind::FACTORIZED: return "factorized";
    case PriorKind::SP: return "sp";
    case PriorKind::TP: return "tp";
    case PriorKind::TP_PLUS: return "tp+";
    case PriorKind::SP_TP_PLUS: return "sp-tp+";
  }
  return "?";
}

inline Transform transform_from(const std::string& s) {
  for (auto t : {Transform::TAT, Transform::SSF, Transform::STAT, Transform::STAT_SSF})
    if (s == to_string(t)) return t;
  throw ContractError("unknown transform: " + s);
}

inline PriorKind prior_from(const std::string& s) {
  for (auto p : {PriorKind::FACTORIZED, PriorKind::SP, PriorKind::TP, PriorKind::TP_PLUS,
                 PriorKind::SP_TP_PLUS})
    if (s == to_string(p)) return p;
  throw ContractError("unknown prior: " + s);
}

struct ModelConfig {
  Transform transform = Transform::STAT_SSF;
  PriorKind prior = PriorKind::FACTORIZED;
  bool hyperprior = true;
  bool vbr = false;
  int64_t vbr_levels = 7;
  std::vector<double> beta_table = {1e-2, 5e-3, 2.5e-3, 1e-3, 5e-4, 2.5e-4, 1e-4};
  int64_t channels = 32;
  int64_t hyper_stride = 2;
  int64_t levels_m = 1;
  double sigma0 = 1.5;
  int64_t gop = 12;

  bool has_flow() const { return transform != Transform::TAT; }
  bool warped_mean() const {
    return transform == Transform::SSF || transform == Transform::STAT_SSF;
  }
  bool has_sigma() const { return transform != Transform::SSF; }
  bool temporal() const {
    return prior == PriorKind::TP || prior == PriorKind::TP_PLUS ||
           prior == PriorKind::SP_TP_PLUS;
  }
  bool sp() const { return prior == PriorKind::SP || prior == PriorKind::SP_TP_PLUS; }

  // spatial divisibility the drivers demand of H and W
  int64_t grain() const {
    int64_t g = 16 * (hyperprior ? hyper_stride : 1);
    int64_t m = (int64_t)1 << levels_m;
    return warped_mean() && m > g ? m : g;
  }

  void validate() const {
    contract(channels >= 4, "config: too few channels");
    contract(hyper_stride == 1 || hyper_stride == 2, "config: hyper_stride must be 1 or 2");
    contract(levels_m >= 1 && levels_m <= 5, "config: scale levels out of range");
    contract(sigma0 > 0, "config: sigma0 must be positive");
    contract(gop >= 1, "config: gop must be positive");
    contract(!(temporal() && transform == Transform::TAT),
             "config: temporal priors require a residual latent v (any transform but tat)");
    contract(!(sp() && !has_flow()), "config: structured prior reads w, needs a flow transform");
    contract(!(sp() && !hyperprior), "config: structured prior extends the v hyper branch");
    if (vbr) {
      contract(vbr_levels >= 2, "config: vbr needs at least 2 levels");
      contract((int64_t)beta_table.size() == vbr_levels,
               "config: beta table length must equal vbr levels");
    }
  }
};

template <class T>
struct CodecState {
  Tensor<T> xprev;
  std::optional<Tensor<T>> vprev;
  int64_t t = 2;  // index within the gop; 1 is the I-frame
};

// collapse an elementwise bits tensor [N,C,H,W] to per-sample totals [N]
template <class T>
Tensor<T> per_sample_bits(const Tensor<T>& t) {
  contract(t.rank() == 4, "per_sample_bits: expect rank 4");
  return reshape(sum_axis(sum_axis(sum_axis(t, 3), 2), 1), {t.dim(0)});
}

template <class T>
class VideoCodec {
 public:
  VideoCodec(ParameterStore<T>& ps, uint64_t seed, const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    int64_t C = cfg.channels;
    int64_t vl = cfg.vbr ? cfg.vbr_levels : 0;
    auto rng_for = [&](const char* prefix) { return Rng(derive_seed(seed, fnv1a64(prefix))); };
    auto enc4 = [&](const char* p, int64_t in) {
      Rng r = rng_for(p);
      std::vector<ConvLayer<T>> ls;
      for (int i = 0; i < 4; ++i)
        ls.emplace_back(ps, r, std::string(p) + std::to_string(i), i == 0 ? in : C, C, 5, 2,
                        false, vl);
      return ls;
    };
    auto dec4 = [&](const char* p, int64_t in, int64_t out) {
      Rng r = rng_for(p);
      std::vector<ConvLayer<T>> ls;
      for (int i = 0; i < 4; ++i)
        ls.emplace_back(ps, r, std::string(p) + std::to_string(i), i == 0 ? in : C,
                        i == 3 ? out : C, 5, 2, true, vl);
      return ls;
    };
    auto henc2 = [&](const char* p) {
      Rng r = rng_for(p);
      std::vector<ConvLayer<T>> ls;
      ls.emplace_back(ps, r, std::string(p) + "0", C, C, 3, 1, false, vl);
      ls.emplace_back(ps, r, std::string(p) + "1", C, C, 3, cfg.hyper_stride, false, vl);
      return ls;
    };

    if_enc_ = enc4("if.enc", 3);
    if_dec_ = dec4("if.dec", C, 3);
    if (cfg.hyperprior) {
      if_henc_ = henc2("if.henc");
      {
        Rng r = rng_for("if.hdec");
        if_hdec_.emplace_back(ps, r, "if.hdec0", C, C, 3, cfg.hyper_stride, true, vl);
        if_hdec_.emplace_back(ps, r, "if.hdec1", C, 2 * C, 3, 1, false, vl);
      }
      if_ph_.emplace(ps, "if.ph", C);
    } else {
      if_py_.emplace(ps, "if.py", C);
    }

    if (cfg.has_flow()) {
      fw_ = enc4("pf.fw", 6);
      if (cfg.warped_mean()) gw_ = dec4("pf.gw", C, 3);
    }
    fv_ = enc4("pf.fv", 3);
    gv_ = dec4("pf.gv", 2 * C, 3);

    if (!cfg.warped_mean()) {
      Rng r = rng_for("pf.hmu");
      hmu_x_.emplace_back(ps, r, "pf.hmu.x0", 3, 16, 5, 1, false, vl);
      hmu_x_.emplace_back(ps, r, "pf.hmu.x1", 16, 16, 5, 1, false, vl);
      if (cfg.has_flow()) {
        Rng rw = rng_for("pf.hmu.w");
        for (int i = 0; i < 4; ++i)
          hmu_w_.emplace_back(ps, rw, "pf.hmu.w" + std::to_string(i), i == 0 ? C : 16, 16, 5, 2,
                              true, vl);
      }
      hmu_h_.emplace_back(ps, r, "pf.hmu.h0", 32, 16, 5, 1, false, vl);
      hmu_h_.emplace_back(ps, r, "pf.hmu.h1", 16, 3, 5, 1, false, vl);
    }
    if (cfg.has_sigma()) {
      Rng r = rng_for("pf.hsig");
      hsig_x_.emplace_back(ps, r, "pf.hsig.x0", 3, 8, 5, 2, false, vl);
      hsig_x_.emplace_back(ps, r, "pf.hsig.x1", 8, 8, 5, 2, false, vl);
      if (cfg.has_flow()) {
        Rng rw = rng_for("pf.hsig.w");
        hsig_w_.emplace_back(ps, rw, "pf.hsig.w0", C, 8, 3, 2, true, vl);
        hsig_w_.emplace_back(ps, rw, "pf.hsig.w1", 8, 8, 3, 2, true, vl);
      }
      hsig_h_.emplace_back(ps, r, "pf.hsig.h0", 16, 8, 3, 1, false, vl);
      hsig_h_.emplace_back(ps, r, "pf.hsig.h1", 8, 1, 3, 1, false, vl);
    }

    if (cfg.has_flow()) {
      if (cfg.hyperprior) {
        w_henc_ = henc2("pf.whenc");
        Rng r = rng_for("pf.whdec");
        w_hdec_.emplace_back(ps, r, "pf.whdec0", C, C, 3, cfg.hyper_stride, true, vl);
        w_hdec_.emplace_back(ps, r, "pf.whdec1", C, 2 * C, 3, 1, false, vl);
        pwh_.emplace(ps, "pf.pwh", C);
      } else {
        pw_.emplace(ps, "pf.pw", C);
      }
    }

    if (cfg.temporal()) {
      if (cfg.prior == PriorKind::TP) {
        Rng r = rng_for("pf.tp");
        tp_.emplace_back(ps, r, "pf.tp0", C, C, 3, 1, false, vl);
        tp_.emplace_back(ps, r, "pf.tp1", C, 2 * C, 3, 1, false, vl);
        pv2_.emplace(ps, "pf.pv2", C);
      } else {
        tpx_ = enc4("pf.tpx", 3);
        if (cfg.prior == PriorKind::SP_TP_PLUS) {
          Rng r = rng_for("pf.tpw");
          tpw_.emplace_back(ps, r, "pf.tpw0", C, C, 3, 1, false, vl);
        }
        Rng r = rng_for("pf.tph");
        tph_.emplace_back(ps, r, "pf.tph0",
                          cfg.prior == PriorKind::SP_TP_PLUS ? 2 * C : C, 2 * C, 3, 1, false, vl);
      }
    } else if (cfg.hyperprior) {
      v_henc_ = henc2("pf.vhenc");
      Rng r = rng_for("pf.vhdec");
      v_hdec_.emplace_back(ps, r, "pf.vhdec0", C, C, 3, cfg.hyper_stride, true, vl);
      v_hdec_.emplace_back(ps, r, "pf.vhdec1", cfg.sp() ? 3 * C : C, 2 * C, 3, 1, false, vl);
      if (cfg.sp()) {
        Rng rs = rng_for("pf.sp");
        sp_w_.emplace_back(ps, rs, "pf.spw0", C, C, 3, 1, false, vl);
        sp_wh_.emplace_back(ps, rs, "pf.spwh0", C, C, 3, cfg.hyper_stride, true, vl);
      }
      pvh_.emplace(ps, "pf.pvh", C);
    } else {
      pv_.emplace(ps, "pf.pv", C);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  // ---- network pieces --------------------------------------------------

  Tensor<T> iframe_analyze(const Tensor<T>& x, const ModCtx& mc) const {
    check_frame(x);
    return run(if_enc_, x, mc);
  }
  Tensor<T> iframe_synthesize(const Tensor<T>& y, const ModCtx& mc) const {
    return run(if_dec_, y, mc);
  }
  Tensor<T> iframe_hyper_analyze(const Tensor<T>& y, const ModCtx& mc) const {
    return run(if_henc_, y, mc);
  }
  std::pair<Tensor<T>, Tensor<T>> iframe_hyper_params(const Tensor<T>& yh,
                                                      const ModCtx& mc) const {
    return split_params(run(if_hdec_, yh, mc));
  }

  Tensor<T> flow_analyze(const Tensor<T>& x, const Tensor<T>& xprev, const ModCtx& mc) const {
    return run(fw_, concat({x, xprev}, 1), mc);
  }

  // g_w: raw 3-channel output; displacements linear, scale squashed into
  // [0, M+1)
  Tensor<T> flow_field(const Tensor<T>& w, const ModCtx& mc) const {
    contract(cfg_.warped_mean(), "flow_field: only warped-mean transforms decode a field");
    auto o = run(gw_, w, mc);
    auto dxy = slice(o, 1, 0, 2);
    auto s = mul(sigmoid(slice(o, 1, 2, 3)), (T)(cfg_.levels_m + 1));
    return concat({dxy, s}, 1);
  }

  // h_mu
  Tensor<T> predict(const Tensor<T>& xprev, const std::optional<Tensor<T>>& w,
                    const std::optional<Tensor<T>>& field, const ModCtx& mc) const {
    if (cfg_.warped_mean()) {
      auto ssv = build_ssv_pyramid(xprev, cfg_.sigma0, (int)cfg_.levels_m);
      return scale_space_warp(ssv, *field);
    }
    int64_t N = xprev.dim(0), H = xprev.dim(2), W = xprev.dim(3);
    auto xf = hmu_x_[1].forward(relu(hmu_x_[0].forward(xprev, mc)), mc);
    Tensor<T> wf = Tensor<T>::zeros({N, 16, H, W});
    if (w) wf = run(hmu_w_, *w, mc);
    auto u = relu(hmu_h_[0].forward(concat({xf, wf}, 1), mc));
    return hmu_h_[1].forward(u, mc);
  }

  // h_sigma: one positive scalar per pixel, broadcast over color
  Tensor<T> sigma_map(const Tensor<T>& xprev, const std::optional<Tensor<T>>& w,
                      const ModCtx& mc) const {
    int64_t N = xprev.dim(0), H = xprev.dim(2), W = xprev.dim(3);
    auto xf = hsig_x_[1].forward(relu(hsig_x_[0].forward(xprev, mc)), mc);
    Tensor<T> wf = Tensor<T>::zeros({N, 8, H / 4, W / 4});
    if (w) wf = hsig_w_[1].forward(relu(hsig_w_[0].forward(*w, mc)), mc);
    auto u = relu(hsig_h_[0].forward(concat({xf, wf}, 1), mc));
    auto raw = hsig_h_[1].forward(u, mc);
    return exp(clamp(upsample2_bilinear(upsample2_bilinear(raw)), (T)-8, (T)8));
  }

  Tensor<T> resid_analyze(const Tensor<T>& resid_norm, const ModCtx& mc) const {
    return run(fv_, resid_norm, mc);
  }

  // g_v(v, w): concatenated at latent resolution; zeros stand in for w when
  // the transform has no flow
  Tensor<T> resid_synthesize(const Tensor<T>& v, const std::optional<Tensor<T>>& w,
                             const ModCtx& mc) const {
    Tensor<T> wp = w ? *w
                     : Tensor<T>::zeros({v.dim(0), cfg_.channels, v.dim(2), v.dim(3)});
    return run(gv_, concat({v, wp}, 1), mc);
  }

  Tensor<T> w_hyper_analyze(const Tensor<T>& w, const ModCtx& mc) const {
    return run(w_henc_, w, mc);
  }
  std::pair<Tensor<T>, Tensor<T>> w_hyper_params(const Tensor<T>& wh, const ModCtx& mc) const {
    return split_params(run(w_hdec_, wh, mc));
  }

  Tensor<T> v_hyper_analyze(const Tensor<T>& v, const ModCtx& mc) const {
    return run(v_henc_, v, mc);
  }
  // structured prior: v's parameters read (v^h, w, w^h)
  std::pair<Tensor<T>, Tensor<T>> v_hyper_params(const Tensor<T>& vh,
                                                 const std::optional<Tensor<T>>& w,
                                                 const std::optional<Tensor<T>>& wh,
                                                 const ModCtx& mc) const {
    auto u = relu(v_hdec_[0].forward(vh, mc));
    if (cfg_.sp()) {
      auto uw = relu(sp_w_[0].forward(*w, mc));
      auto uwh = relu(sp_wh_[0].forward(*wh, mc));
      u = concat({u, uw, uwh}, 1);
    }
    return split_params(v_hdec_[1].forward(u, mc));
  }

  // TP: p(v_t | v_{t-1}) for t >= 3; TP+: p(v_t | x̂_{t-1} [, w_t]) for t >= 2
  std::pair<Tensor<T>, Tensor<T>> v_temporal_params(const std::optional<Tensor<T>>& vprev,
                                                    const Tensor<T>& xprev,
                                                    const std::optional<Tensor<T>>& w,
                                                    const ModCtx& mc) const {
    if (cfg_.prior == PriorKind::TP) {
      contract(vprev.has_value(), "v_temporal_params: TP needs the previous residual latent");
      return split_params(tp_[1].forward(relu(tp_[0].forward(*vprev, mc)), mc));
    }
    auto xf = run(tpx_, xprev, mc);
    auto u = cfg_.prior == PriorKind::SP_TP_PLUS ? concat({xf, tpw_[0].forward(*w, mc)}, 1) : xf;
    return split_params(tph_[0].forward(relu(u), mc));
  }

  // TP codes the second frame of each gop with a dedicated factorized prior
  bool v_uses_v2_prior(int64_t t) const { return cfg_.prior == PriorKind::TP && t == 2; }

  // ---- frame drivers: training (noisy) ----------------------------------

  struct IFrameTrain {
    Tensor<T> recon;
    Tensor<T> bits;  // per-sample totals [N]
  };

  IFrameTrain iframe_train(const Tensor<T>& x, const ModCtx& mc, uint64_t seed,
                           uint64_t step) const {
    auto ybar = iframe_analyze(x, mc);
    auto yq = quantize_train(ybar, seed, stream_of(1, 0), step);
    Tensor<T> bits = Tensor<T>::zeros({x.dim(0)});
    if (cfg_.hyperprior) {
      auto yhq = quantize_train(iframe_hyper_analyze(ybar, mc), seed, stream_of(1, 1), step);
      auto [mu, sg] = iframe_hyper_params(yhq, mc);
      bits = add(per_sample_bits(if_ph_->bits(yhq)),
                 per_sample_bits(discrete_gaussian_bits(yq, mu, sg)));
    } else {
      bits = per_sample_bits(if_py_->bits(yq));
    }
    return {iframe_synthesize(yq, mc), bits};
  }

  struct PFrameTrain {
    Tensor<T> recon;
    Tensor<T> bits;        // per-sample totals [N]
    Tensor<T> norm_resid;  // ȳ_t: the transform's pre-quantization output
    std::optional<Tensor<T>> field;
    std::optional<Tensor<T>> sigma;
    Tensor<T> pred;
    Tensor<T> vq;  // noisy residual latent, feeds the next frame's TP chain
  };

  PFrameTrain pframe_train(const Tensor<T>& x, const CodecState<T>& st, const ModCtx& mc,
                           uint64_t seed, uint64_t step) const {
    check_frame(x);
    PFrameTrain out{Tensor<T>::zeros({}), Tensor<T>::zeros({}), Tensor<T>::zeros({}),
                    std::nullopt, std::nullopt, Tensor<T>::zeros({}), Tensor<T>::zeros({})};
    std::optional<Tensor<T>> wq, whq;
    Tensor<T> bits = Tensor<T>::zeros({x.dim(0)});
    if (cfg_.has_flow()) {
      auto wbar = flow_analyze(x, st.xprev, mc);
      wq = quantize_train(wbar, seed, stream_of(st.t, 2), step);
      if (cfg_.hyperprior) {
        whq = quantize_train(w_hyper_analyze(wbar, mc), seed, stream_of(st.t, 3), step);
        auto [mu, sg] = w_hyper_params(*whq, mc);
        bits = add(bits, add(per_sample_bits(pwh_->bits(*whq)),
                             per_sample_bits(discrete_gaussian_bits(*wq, mu, sg))));
      } else {
        bits = add(bits, per_sample_bits(pw_->bits(*wq)));
      }
      if (cfg_.warped_mean()) out.field = flow_field(*wq, mc);
    }
    out.pred = predict(st.xprev, wq, out.field, mc);
    auto resid = sub(x, out.pred);
    if (cfg_.has_sigma()) {
      out.sigma = sigma_map(st.xprev, wq, mc);
      out.norm_resid = divide(resid, *out.sigma);
    } else {
      out.norm_resid = resid;
    }
    auto vbar = resid_analyze(out.norm_resid, mc);
    auto vq = quantize_train(vbar, seed, stream_of(st.t, 4), step);
    out.vq = vq;

    if (cfg_.temporal()) {
      if (v_uses_v2_prior(st.t)) {
        bits = add(bits, per_sample_bits(pv2_->bits(vq)));
      } else {
        auto [mu, sg] = v_temporal_params(st.vprev, st.xprev, wq, mc);
        bits = add(bits, per_sample_bits(discrete_gaussian_bits(vq, mu, sg)));
      }
    } else if (cfg_.hyperprior) {
      auto vhq = quantize_train(v_hyper_analyze(vbar, mc), seed, stream_of(st.t, 5), step);
      auto [mu, sg] = v_hyper_params(vhq, wq, whq, mc);
      bits = add(bits, add(per_sample_bits(pvh_->bits(vhq)),
                           per_sample_bits(discrete_gaussian_bits(vq, mu, sg))));
    } else {
      bits = add(bits, per_sample_bits(pv_->bits(vq)));
    }
    out.bits = bits;

    auto r = resid_synthesize(vq, wq, mc);
    out.recon = cfg_.has_sigma() ? add(out.pred, mul(r, *out.sigma)) : add(out.pred, r);
    return out;
  }

  // ---- frame drivers: coding (rounded, closed loop) ----------------------

  struct IFrameCoded {
    Tensor<T> y;
    std::optional<Tensor<T>> yh, mu, sg;
    Tensor<T> recon;
    double bits = 0;
  };

  IFrameCoded iframe_encode(const Tensor<T>& x, const ModCtx& mc) const {
    IFrameCoded out;
    auto ybar = iframe_analyze(x, mc);
    out.y = quantize_eval(ybar).detach();
    if (cfg_.hyperprior) {
      out.yh = quantize_eval(iframe_hyper_analyze(ybar, mc)).detach();
      auto [mu, sg] = iframe_hyper_params(*out.yh, mc);
      out.mu = mu;
      out.sg = sg;
      out.bits = sum(if_ph_->bits(*out.yh)).item() +
                 sum(discrete_gaussian_bits(out.y, mu, sg)).item();
    } else {
      out.bits = sum(if_py_->bits(out.y)).item();
    }
    out.recon = iframe_synthesize(out.y, mc);
    return out;
  }

  struct PFrameSynth {
    Tensor<T> recon;
    Tensor<T> pred;
    std::optional<Tensor<T>> field, sigma;
  };

  PFrameSynth pframe_synthesize(const std::optional<Tensor<T>>& w, const Tensor<T>& v,
                                const Tensor<T>& xprev, const ModCtx& mc) const {
    PFrameSynth out{Tensor<T>::zeros({}), Tensor<T>::zeros({}), std::nullopt, std::nullopt};
    if (cfg_.warped_mean()) out.field = flow_field(*w, mc);
    out.pred = predict(xprev, w, out.field, mc);
    auto r = resid_synthesize(v, w, mc);
    if (cfg_.has_sigma()) {
      out.sigma = sigma_map(xprev, w, mc);
      out.recon = add(out.pred, mul(r, *out.sigma));
    } else {
      out.recon = add(out.pred, r);
    }
    return out;
  }

  struct PFrameCoded {
    std::optional<Tensor<T>> w, wh, mu_w, sg_w;
    Tensor<T> v;
    std::optional<Tensor<T>> vh, mu_v, sg_v;
    const FactorizedPrior<T>* v_fprior = nullptr;  // set when v is factorized-coded
    PFrameSynth synth;
    Tensor<T> norm_resid;
    double bits = 0;
  };

  PFrameCoded pframe_encode(const Tensor<T>& x, const CodecState<T>& st, const ModCtx& mc) const {
    check_frame(x);
    PFrameCoded out;
    out.v = Tensor<T>::zeros({});
    out.norm_resid = Tensor<T>::zeros({});
    double bits = 0;
    std::optional<Tensor<T>> field;
    if (cfg_.has_flow()) {
      auto wbar = flow_analyze(x, st.xprev, mc);
      out.w = quantize_eval(wbar).detach();
      if (cfg_.hyperprior) {
        out.wh = quantize_eval(w_hyper_analyze(wbar, mc)).detach();
        auto [mu, sg] = w_hyper_params(*out.wh, mc);
        out.mu_w = mu;
        out.sg_w = sg;
        bits += sum(pwh_->bits(*out.wh)).item() +
                sum(discrete_gaussian_bits(*out.w, mu, sg)).item();
      } else {
        bits += sum(pw_->bits(*out.w)).item();
      }
      if (cfg_.warped_mean()) field = flow_field(*out.w, mc);
    }
    auto pred = predict(st.xprev, out.w, field, mc);
    auto resid = sub(x, pred);
    if (cfg_.has_sigma()) out.norm_resid = divide(resid, sigma_map(st.xprev, out.w, mc));
    else out.norm_resid = resid;
    auto vbar = resid_analyze(out.norm_resid, mc);
    out.v = quantize_eval(vbar).detach();

    if (cfg_.temporal()) {
      if (v_uses_v2_prior(st.t)) {
        out.v_fprior = &*pv2_;
        bits += sum(pv2_->bits(out.v)).item();
      } else {
        auto [mu, sg] = v_temporal_params(st.vprev, st.xprev, out.w, mc);
        out.mu_v = mu;
        out.sg_v = sg;
        bits += sum(discrete_gaussian_bits(out.v, mu, sg)).item();
      }
    } else if (cfg_.hyperprior) {
      out.vh = quantize_eval(v_hyper_analyze(vbar, mc)).detach();
      auto [mu, sg] = v_hyper_params(*out.vh, out.w, out.wh, mc);
      out.mu_v = mu;
      out.sg_v = sg;
      bits += sum(pvh_->bits(*out.vh)).item() +
              sum(discrete_gaussian_bits(out.v, mu, sg)).item();
    } else {
      out.v_fprior = &*pv_;
      bits += sum(pv_->bits(out.v)).item();
    }
    out.bits = bits;
    // the encoder-side reconstruction IS the decoder path on rounded latents
    out.synth = pframe_synthesize(out.w, out.v, st.xprev, mc);
    return out;
  }

  // ---- priors exposed for the bitstream layer ----------------------------

  const FactorizedPrior<T>* iframe_hyper_prior() const { return if_ph_ ? &*if_ph_ : nullptr; }
  const FactorizedPrior<T>* iframe_prior() const { return if_py_ ? &*if_py_ : nullptr; }
  const FactorizedPrior<T>* w_hyper_prior() const { return pwh_ ? &*pwh_ : nullptr; }
  const FactorizedPrior<T>* w_prior() const { return pw_ ? &*pw_ : nullptr; }
  const FactorizedPrior<T>* v_hyper_prior() const { return pvh_ ? &*pvh_ : nullptr; }
  const FactorizedPrior<T>* v_prior() const { return pv_ ? &*pv_ : nullptr; }
  const FactorizedPrior<T>* v2_prior() const { return pv2_ ? &*pv2_ : nullptr; }

  // latent grid for a frame of the given size
  std::pair<int64_t, int64_t> latent_hw(int64_t H, int64_t W) const {
    return {H / 16, W / 16};
  }
  std::pair<int64_t, int64_t> hyper_hw(int64_t H, int64_t W) const {
    return {H / 16 / cfg_.hyper_stride, W / 16 / cfg_.hyper_stride};
  }

 private:
  static std::pair<Tensor<T>, Tensor<T>> split_params(const Tensor<T>& p) {
    int64_t C = p.dim(1) / 2;
    return {slice(p, 1, 0, C), sigma_from_raw(slice(p, 1, C, 2 * C))};
  }

  static uint64_t stream_of(int64_t t, int64_t kind) { return (uint64_t)t * 16 + (uint64_t)kind; }

  void check_frame(const Tensor<T>& x) const {
    contract(x.rank() == 4 && x.dim(1) == 3, "codec: frames are [N,3,H,W]");
    int64_t g = cfg_.grain();
    contract(x.dim(2) % g == 0 && x.dim(3) % g == 0,
             "codec: H and W must be multiples of " + std::to_string(g) + ", got " +
                 shape_str(x.shape()));
  }

  Tensor<T> run(const std::vector<ConvLayer<T>>& ls, const Tensor<T>& x, const ModCtx& mc) const {
    auto y = x;
    for (size_t i = 0; i < ls.size(); ++i) {
      if (i) y = relu(y);
      y = ls[i].forward(y, mc);
    }
    return y;
  }

  ModelConfig cfg_;
  std::vector<ConvLayer<T>> if_enc_, if_dec_, if_henc_, if_hdec_;
  std::vector<ConvLayer<T>> fw_, gw_, fv_, gv_;
  std::vector<ConvLayer<T>> hmu_x_, hmu_w_, hmu_h_;
  std::vector<ConvLayer<T>> hsig_x_, hsig_w_, hsig_h_;
  std::vector<ConvLayer<T>> w_henc_, w_hdec_, v_henc_, v_hdec_, sp_w_, sp_wh_;
  std::vector<ConvLayer<T>> tp_, tpx_, tpw_, tph_;
  std::optional<FactorizedPrior<T>> if_ph_, if_py_, pwh_, pw_, pvh_, pv_, pv2_;
};

}  // namespace stvc
