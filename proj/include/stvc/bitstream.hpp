#pragma once

// Container format and the interleaved entropy-coded stream.
//
// Layout (all integers big-endian):
//   magic "STVC", version u16
//   config: transform u8, prior u8, flags u8 (bit0 hyper, bit1 vbr),
//           vbr_levels u8, channels u16, hyper_stride u8, levels_m u8,
//           gop u16, sigma0 f64, beta count u8 + f64 each
//   width u32, height u32 (original, pre-padding), frames u32, level u8
//   model hash u64
//   chunk count u32, then per chunk: offset u64 (relative to the chunk
//   region), payload length u32
//   chunks, one per frame, each framed as len u32 + crc32 u32 + payload
//   global crc32 u32 over every preceding byte
//
// Validation order on read: magic and version, global crc, config, dims,
// chunk table, then per-chunk crc as frames decode. The decoder side of the
// model runs on decoded latents only, so an encoder/decoder pair agreeing on
// parameters reproduces the encoder's reconstruction bit for bit.

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "stvc/models.hpp"
#include "stvc/range_coder.hpp"

namespace stvc {

inline constexpr uint16_t kContainerVersion = 1;
inline constexpr int64_t kLatentCap = 1 << 20;  // sanity bound on decoded escape values

namespace bitio {

inline void put8(std::vector<uint8_t>& b, uint8_t v) { b.push_back(v); }
inline void put16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back((uint8_t)(v >> 8));
  b.push_back((uint8_t)v);
}
inline void put32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 3; i >= 0; --i) b.push_back((uint8_t)(v >> (8 * i)));
}
inline void put64(std::vector<uint8_t>& b, uint64_t v) {
  for (int i = 7; i >= 0; --i) b.push_back((uint8_t)(v >> (8 * i)));
}
inline void putf64(std::vector<uint8_t>& b, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  put64(b, u);
}

struct Reader {
  const uint8_t* p;
  size_t n, o = 0;
  void need(size_t k) const {
    if (o + k > n) throw DataError("container: truncated header");
  }
  uint8_t u8() {
    need(1);
    return p[o++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = (uint16_t)((p[o] << 8) | p[o + 1]);
    o += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | p[o + (size_t)i];
    o += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | p[o + (size_t)i];
    o += 8;
    return v;
  }
  double f64() {
    uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
};

}  // namespace bitio

struct StreamHeader {
  ModelConfig cfg;
  uint32_t width = 0, height = 0, frames = 0;
  uint8_t level = 0;
  uint64_t model_hash = 0;
  std::vector<std::pair<uint64_t, uint32_t>> chunks;  // offset, payload length
  size_t chunks_base = 0;
};

inline bool config_equal(const ModelConfig& a, const ModelConfig& b) {
  return a.transform == b.transform && a.prior == b.prior && a.hyperprior == b.hyperprior &&
         a.vbr == b.vbr && a.vbr_levels == b.vbr_levels && a.beta_table == b.beta_table &&
         a.channels == b.channels && a.hyper_stride == b.hyper_stride &&
         a.levels_m == b.levels_m && a.sigma0 == b.sigma0 && a.gop == b.gop;
}

inline void write_config(std::vector<uint8_t>& b, const ModelConfig& c) {
  bitio::put8(b, (uint8_t)c.transform);
  bitio::put8(b, (uint8_t)c.prior);
  bitio::put8(b, (uint8_t)((c.hyperprior ? 1 : 0) | (c.vbr ? 2 : 0)));
  bitio::put8(b, (uint8_t)c.vbr_levels);
  bitio::put16(b, (uint16_t)c.channels);
  bitio::put8(b, (uint8_t)c.hyper_stride);
  bitio::put8(b, (uint8_t)c.levels_m);
  bitio::put16(b, (uint16_t)c.gop);
  bitio::putf64(b, c.sigma0);
  bitio::put8(b, (uint8_t)c.beta_table.size());
  for (double v : c.beta_table) bitio::putf64(b, v);
}

inline ModelConfig read_config(bitio::Reader& r) {
  ModelConfig c;
  uint8_t t = r.u8(), p = r.u8(), flags = r.u8();
  if (t > 3) throw DataError("container: unknown transform id");
  if (p > 4) throw DataError("container: unknown prior id");
  if (flags > 3) throw DataError("container: unknown config flags");
  c.transform = (Transform)t;
  c.prior = (PriorKind)p;
  c.hyperprior = (flags & 1) != 0;
  c.vbr = (flags & 2) != 0;
  c.vbr_levels = r.u8();
  c.channels = r.u16();
  c.hyper_stride = r.u8();
  c.levels_m = r.u8();
  c.gop = r.u16();
  c.sigma0 = r.f64();
  uint8_t nb = r.u8();
  c.beta_table.clear();
  for (uint8_t i = 0; i < nb; ++i) c.beta_table.push_back(r.f64());
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw DataError(std::string("container: bad config: ") + e.what());
  }
  return c;
}

// ---- latent <-> symbols -----------------------------------------------------

template <class T>
void code_factorized(RangeEncoder& enc, const Tensor<T>& x, const FactorizedPrior<T>& prior,
                     int64_t half_support) {
  contract(x.rank() == 4 && x.dim(0) == 1, "code_factorized: expect [1,C,h,w]");
  int64_t C = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (int64_t c = 0; c < C; ++c) {
    auto tab = prior.table(c, half_support);
    for (int64_t i = 0; i < hw; ++i)
      enc.encode(tab, (int64_t)std::llround((double)x.values()[(size_t)(c * hw + i)]));
  }
}

template <class T>
Tensor<T> decode_factorized(RangeDecoder& dec, const FactorizedPrior<T>& prior, const Shape& s,
                            int64_t half_support) {
  contract(s.size() == 4 && s[0] == 1, "decode_factorized: expect [1,C,h,w]");
  int64_t C = s[1], hw = s[2] * s[3];
  std::vector<T> out((size_t)(C * hw));
  for (int64_t c = 0; c < C; ++c) {
    auto tab = prior.table(c, half_support);
    for (int64_t i = 0; i < hw; ++i) {
      int64_t k = dec.decode(tab);
      if (k < -kLatentCap || k > kLatentCap) throw DataError("decode: latent out of range");
      out[(size_t)(c * hw + i)] = (T)k;
    }
  }
  return Tensor<T>::from_vector(s, std::move(out));
}

template <class T>
void code_gaussian(RangeEncoder& enc, const Tensor<T>& x, const Tensor<T>& mu,
                   const Tensor<T>& sg, int64_t half_support) {
  contract(x.shape() == mu.shape() && x.shape() == sg.shape(), "code_gaussian: shape mismatch");
  for (size_t i = 0; i < x.values().size(); ++i) {
    auto tab = gaussian_table((double)mu.values()[i], (double)sg.values()[i], half_support);
    enc.encode(tab, (int64_t)std::llround((double)x.values()[i]));
  }
}

template <class T>
Tensor<T> decode_gaussian(RangeDecoder& dec, const Tensor<T>& mu, const Tensor<T>& sg,
                          int64_t half_support) {
  std::vector<T> out(mu.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    auto tab = gaussian_table((double)mu.values()[i], (double)sg.values()[i], half_support);
    int64_t k = dec.decode(tab);
    if (k < -kLatentCap || k > kLatentCap) throw DataError("decode: latent out of range");
    out[i] = (T)k;
  }
  return Tensor<T>::from_vector(mu.shape(), std::move(out));
}

// ---- frame padding ----------------------------------------------------------

template <class T>
Tensor<T> pad_frame_br(const Tensor<T>& x, int64_t Hp, int64_t Wp) {
  contract(x.rank() == 4, "pad_frame_br: expect [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  contract(Hp >= H && Wp >= W, "pad_frame_br: target smaller than frame");
  if (Hp == H && Wp == W) return x;
  std::vector<T> out((size_t)(N * C * Hp * Wp));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < Hp; ++y) {
        int64_t sy = y < H ? y : H - 1;
        const T* src = &x.values()[(size_t)(((n * C + c) * H + sy) * W)];
        T* dst = &out[(size_t)(((n * C + c) * Hp + y) * Wp)];
        for (int64_t xx = 0; xx < Wp; ++xx) dst[xx] = src[xx < W ? xx : W - 1];
      }
  return Tensor<T>::from_vector({N, C, Hp, Wp}, std::move(out));
}

template <class T>
Tensor<T> crop_frame(const Tensor<T>& x, int64_t H, int64_t W) {
  if (x.dim(2) == H && x.dim(3) == W) return x;
  return slice(slice(x, 2, 0, H), 3, 0, W);
}

// ---- video encode -----------------------------------------------------------

template <class T>
struct EncodedVideo {
  std::vector<uint8_t> bytes;
  std::vector<Tensor<T>> recons;  // cropped to original dims
  double analytic_bits = 0;       // model estimate, excludes container overhead
};

template <class T>
EncodedVideo<T> encode_video(const VideoCodec<T>& codec, uint64_t model_hash,
                             const std::vector<Tensor<T>>& frames, uint8_t level = 0) {
  contract(!frames.empty(), "encode_video: no frames");
  const ModelConfig& cfg = codec.config();
  contract(!cfg.vbr || level < cfg.vbr_levels, "encode_video: rate level out of range");
  int64_t H = frames[0].dim(2), W = frames[0].dim(3);
  for (auto& f : frames)
    contract(f.rank() == 4 && f.dim(0) == 1 && f.dim(1) == 3 && f.dim(2) == H && f.dim(3) == W,
             "encode_video: frames must share shape [1,3,H,W]");
  int64_t g = cfg.grain();
  int64_t Hp = (H + g - 1) / g * g, Wp = (W + g - 1) / g * g;

  ModCtx mc;
  if (cfg.vbr) {
    mc.active = true;
    mc.levels = {(int64_t)level};
  }

  EncodedVideo<T> out;
  std::vector<std::vector<uint8_t>> chunks;
  CodecState<T> st;
  for (size_t i = 0; i < frames.size(); ++i) {
    auto x = pad_frame_br(frames[i], Hp, Wp);
    RangeEncoder enc;
    if ((int64_t)i % cfg.gop == 0) {
      auto r = codec.iframe_encode(x, mc);
      if (r.yh) {
        code_factorized(enc, *r.yh, *codec.iframe_hyper_prior(), kHyperHalfSupport);
        code_gaussian(enc, r.y, *r.mu, *r.sg, kMainHalfSupport);
      } else {
        code_factorized(enc, r.y, *codec.iframe_prior(), kMainHalfSupport);
      }
      out.analytic_bits += r.bits;
      st = {r.recon, std::nullopt, 2};
    } else {
      auto r = codec.pframe_encode(x, st, mc);
      if (r.w) {
        if (r.wh) {
          code_factorized(enc, *r.wh, *codec.w_hyper_prior(), kHyperHalfSupport);
          code_gaussian(enc, *r.w, *r.mu_w, *r.sg_w, kMainHalfSupport);
        } else {
          code_factorized(enc, *r.w, *codec.w_prior(), kMainHalfSupport);
        }
      }
      if (r.vh) code_factorized(enc, *r.vh, *codec.v_hyper_prior(), kHyperHalfSupport);
      if (r.v_fprior) code_factorized(enc, r.v, *r.v_fprior, kMainHalfSupport);
      else code_gaussian(enc, r.v, *r.mu_v, *r.sg_v, kMainHalfSupport);
      out.analytic_bits += r.bits;
      st = {r.synth.recon, r.v, st.t + 1};
    }
    chunks.push_back(write_chunk(enc.finish()));
    out.recons.push_back(crop_frame(st.xprev, H, W));
  }

  std::vector<uint8_t>& b = out.bytes;
  b = {'S', 'T', 'V', 'C'};
  bitio::put16(b, kContainerVersion);
  write_config(b, cfg);
  bitio::put32(b, (uint32_t)W);
  bitio::put32(b, (uint32_t)H);
  bitio::put32(b, (uint32_t)frames.size());
  bitio::put8(b, level);
  bitio::put64(b, model_hash);
  bitio::put32(b, (uint32_t)chunks.size());
  uint64_t off = 0;
  for (auto& c : chunks) {
    bitio::put64(b, off);
    bitio::put32(b, (uint32_t)(c.size() - 8));  // payload length, sans chunk framing
    off += c.size();
  }
  for (auto& c : chunks) b.insert(b.end(), c.begin(), c.end());
  bitio::put32(b, crc32(b.data(), b.size()));
  return out;
}

// ---- video decode -----------------------------------------------------------

inline StreamHeader read_header(const uint8_t* data, size_t n) {
  if (n < 10) throw DataError("container: too short");
  if (std::memcmp(data, "STVC", 4) != 0) throw DataError("container: bad magic");
  bitio::Reader r{data, n - 4, 4};
  if (r.u16() != kContainerVersion) throw DataError("container: unsupported version");
  {
    uint32_t want = 0;
    for (int i = 0; i < 4; ++i) want = (want << 8) | data[n - 4 + (size_t)i];
    if (crc32(data, n - 4) != want) throw DataError("container: global crc mismatch");
  }
  StreamHeader h;
  h.cfg = read_config(r);
  h.width = r.u32();
  h.height = r.u32();
  h.frames = r.u32();
  h.level = r.u8();
  h.model_hash = r.u64();
  if (h.width == 0 || h.height == 0 || h.width > 65535 || h.height > 65535)
    throw DataError("container: bad frame dims");
  if (h.frames == 0 || h.frames > (1u << 20)) throw DataError("container: bad frame count");
  if (h.cfg.vbr && h.level >= h.cfg.vbr_levels) throw DataError("container: bad rate level");
  uint32_t nchunks = r.u32();
  if (nchunks != h.frames) throw DataError("container: chunk count != frame count");
  uint64_t expect = 0;
  for (uint32_t i = 0; i < nchunks; ++i) {
    uint64_t off = r.u64();
    uint32_t len = r.u32();
    if (off != expect) throw DataError("container: chunk table not contiguous");
    expect = off + 8 + (uint64_t)len;
    h.chunks.emplace_back(off, len);
  }
  h.chunks_base = r.o;
  if (h.chunks_base + expect != n - 4) throw DataError("container: chunk region size mismatch");
  return h;
}

template <class T>
struct DecodedVideo {
  StreamHeader header;
  std::vector<Tensor<T>> frames;  // cropped to original dims
};

template <class T>
DecodedVideo<T> decode_video(const VideoCodec<T>& codec, uint64_t model_hash,
                             const uint8_t* data, size_t n) {
  DecodedVideo<T> out;
  out.header = read_header(data, n);
  const StreamHeader& h = out.header;
  if (!config_equal(codec.config(), h.cfg))
    throw DataError("container: stream was coded with a different configuration");
  if (h.model_hash != model_hash)
    throw DataError("container: stream was coded with different model parameters");

  const ModelConfig& cfg = codec.config();
  int64_t g = cfg.grain();
  int64_t Hp = ((int64_t)h.height + g - 1) / g * g, Wp = ((int64_t)h.width + g - 1) / g * g;
  auto [lh, lw] = codec.latent_hw(Hp, Wp);
  auto [hh, hw] = codec.hyper_hw(Hp, Wp);
  Shape main_shape{1, cfg.channels, lh, lw};
  Shape hyper_shape{1, cfg.channels, hh, hw};

  ModCtx mc;
  if (cfg.vbr) {
    mc.active = true;
    mc.levels = {(int64_t)h.level};
  }

  CodecState<T> st;
  for (uint32_t i = 0; i < h.frames; ++i) {
    size_t at = h.chunks_base + h.chunks[(size_t)i].first;
    auto payload = read_chunk(data, n - 4, at);
    if (payload.size() != h.chunks[(size_t)i].second)
      throw DataError("container: chunk table length mismatch");
    RangeDecoder dec(payload.data(), payload.size());
    if ((int64_t)i % cfg.gop == 0) {
      Tensor<T> y = Tensor<T>::zeros({});
      if (cfg.hyperprior) {
        auto yh = decode_factorized(dec, *codec.iframe_hyper_prior(), hyper_shape,
                                    kHyperHalfSupport);
        auto [mu, sg] = codec.iframe_hyper_params(yh, mc);
        y = decode_gaussian(dec, mu, sg, kMainHalfSupport);
      } else {
        y = decode_factorized(dec, *codec.iframe_prior(), main_shape, kMainHalfSupport);
      }
      st = {codec.iframe_synthesize(y, mc), std::nullopt, 2};
    } else {
      std::optional<Tensor<T>> w, wh;
      if (cfg.has_flow()) {
        if (cfg.hyperprior) {
          wh = decode_factorized(dec, *codec.w_hyper_prior(), hyper_shape, kHyperHalfSupport);
          auto [mu, sg] = codec.w_hyper_params(*wh, mc);
          w = decode_gaussian(dec, mu, sg, kMainHalfSupport);
        } else {
          w = decode_factorized(dec, *codec.w_prior(), main_shape, kMainHalfSupport);
        }
      }
      Tensor<T> v = Tensor<T>::zeros({});
      if (cfg.temporal()) {
        if (codec.v_uses_v2_prior(st.t)) {
          v = decode_factorized(dec, *codec.v2_prior(), main_shape, kMainHalfSupport);
        } else {
          auto [mu, sg] = codec.v_temporal_params(st.vprev, st.xprev, w, mc);
          v = decode_gaussian(dec, mu, sg, kMainHalfSupport);
        }
      } else if (cfg.hyperprior) {
        auto vh = decode_factorized(dec, *codec.v_hyper_prior(), hyper_shape, kHyperHalfSupport);
        auto [mu, sg] = codec.v_hyper_params(vh, w, wh, mc);
        v = decode_gaussian(dec, mu, sg, kMainHalfSupport);
      } else {
        v = decode_factorized(dec, *codec.v_prior(), main_shape, kMainHalfSupport);
      }
      auto s = codec.pframe_synthesize(w, v, st.xprev, mc);
      st = {s.recon, v, st.t + 1};
    }
    out.frames.push_back(crop_frame(st.xprev, (int64_t)h.height, (int64_t)h.width));
  }
  return out;
}

}  // namespace stvc
