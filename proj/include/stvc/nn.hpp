#pragma once

// Named parameter storage, the Adam optimizer, checkpoint serialization, and
// the conv layer wrapper (optionally rate-conditioned) that the codec
// networks are assembled from.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stvc/tensor.hpp"

namespace stvc {

inline constexpr uint16_t kCheckpointVersion = 1;

template <class T>
void kaiming_uniform_fill(std::vector<T>& v, int64_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / (double)fan_in);
  for (auto& x : v) x = (T)rng.uniform(-bound, bound);
}

template <class T>
class ParameterStore {
 public:
  template <class Init>
  Tensor<T>& get_or_create(const std::string& name, const Shape& shape, Init&& init) {
    auto it = params_.find(name);
    if (it != params_.end()) {
      contract(it->second.shape() == shape, "parameter " + name + " exists with shape " +
                                                shape_str(it->second.shape()) + ", requested " +
                                                shape_str(shape));
      return it->second;
    }
    auto t = Tensor<T>::zeros(shape, true);
    init(t.values());
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    contract(it != params_.end(), "unknown parameter " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    contract(it != params_.end(), "unknown parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto& [k, v] : params_) out.push_back(k);
    return out;
  }
  int64_t total_values() const {
    int64_t n = 0;
    for (auto& [k, v] : params_) n += v.numel();
    return n;
  }
  std::map<std::string, Tensor<T>>& all() { return params_; }
  const std::map<std::string, Tensor<T>>& all() const { return params_; }

  void zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
  }

 private:
  std::map<std::string, Tensor<T>> params_;  // ordered: iteration must be stable
};

// ---- Adam ------------------------------------------------------------------

template <class T>
struct AdamState {
  int64_t step = 0;
  std::map<std::string, std::vector<T>> m, v;
  std::set<std::string> skipped;  // params that had no gradient at some step
};

template <class T>
void adam_step(ParameterStore<T>& params, AdamState<T>& st, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  st.step += 1;
  double bc1 = 1.0 - std::pow(beta1, (double)st.step);
  double bc2 = 1.0 - std::pow(beta2, (double)st.step);
  for (auto& [name, p] : params.all()) {
    auto& node = *p.node();
    if (node.grad.empty()) {
      if (st.skipped.insert(name).second)
        std::fprintf(stderr, "adam: parameter %s has no gradient, skipping\n", name.c_str());
      continue;
    }
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m.assign(node.val.size(), T(0));
    if (v.empty()) v.assign(node.val.size(), T(0));
    for (size_t i = 0; i < node.val.size(); ++i) {
      double g = (double)node.grad[i];
      m[i] = (T)(beta1 * (double)m[i] + (1 - beta1) * g);
      v[i] = (T)(beta2 * (double)v[i] + (1 - beta2) * g * g);
      double mh = (double)m[i] / bc1, vh = (double)v[i] / bc2;
      node.val[i] = (T)((double)node.val[i] - lr * mh / (std::sqrt(vh) + eps));
    }
  }
}

// ---- checkpoint io ----------------------------------------------------------

namespace detail {

inline void put_u16(std::string& b, uint16_t v) {
  b.push_back((char)(v & 0xff));
  b.push_back((char)(v >> 8));
}
inline void put_u32(std::string& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((char)((v >> (8 * i)) & 0xff));
}
template <class T>
void put_values(std::string& b, const std::vector<T>& v) {
  size_t off = b.size();
  b.resize(off + v.size() * sizeof(T));
  std::memcpy(b.data() + off, v.data(), v.size() * sizeof(T));
}

struct ByteReader {
  const unsigned char* p;
  size_t n, o = 0;
  void need(size_t k) const {
    if (o + k > n) throw DataError("checkpoint: truncated");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = p[o] | (uint16_t)p[o + 1] << 8;
    o += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = p[o] | (uint32_t)p[o + 1] << 8 | (uint32_t)p[o + 2] << 16 |
                 (uint32_t)p[o + 3] << 24;
    o += 4;
    return v;
  }
  std::string bytes(size_t k) {
    need(k);
    std::string s((const char*)p + o, k);
    o += k;
    return s;
  }
};

template <class T> constexpr uint8_t dtype_code();
template <> constexpr uint8_t dtype_code<float>() { return 0; }
template <> constexpr uint8_t dtype_code<double>() { return 1; }

template <class T>
void put_record(std::string& b, const std::string& name, const Shape& shape,
                const std::vector<T>& vals) {
  contract(name.size() <= 0xffff, "checkpoint: name too long");
  put_u16(b, (uint16_t)name.size());
  b.append(name);
  b.push_back((char)dtype_code<T>());
  b.push_back((char)shape.size());
  for (int64_t e : shape) put_u32(b, (uint32_t)e);
  put_values(b, vals);
}

}  // namespace detail

inline const std::string kOptStepName = "__opt/adam.t";
inline const std::string kOptMPrefix = "__opt/adam.m/";
inline const std::string kOptVPrefix = "__opt/adam.v/";

template <class T>
std::string serialize_store(const ParameterStore<T>& ps, const AdamState<T>* opt) {
  std::string b = "STCK";
  detail::put_u16(b, kCheckpointVersion);
  uint32_t count = (uint32_t)ps.all().size();
  if (opt) count += 1 + (uint32_t)opt->m.size() + (uint32_t)opt->v.size();
  detail::put_u32(b, count);
  for (auto& [name, p] : ps.all()) detail::put_record(b, name, p.shape(), p.values());
  if (opt) {
    detail::put_record<T>(b, kOptStepName, {1}, {(T)opt->step});
    for (auto& [name, m] : opt->m)
      detail::put_record(b, kOptMPrefix + name, {(int64_t)m.size()}, m);
    for (auto& [name, v] : opt->v)
      detail::put_record(b, kOptVPrefix + name, {(int64_t)v.size()}, v);
  }
  return b;
}

template <class T>
std::string serialize_store(const ParameterStore<T>& ps) {
  return serialize_store(ps, (const AdamState<T>*)nullptr);
}

template <class T>
void save_checkpoint(const ParameterStore<T>& ps, const AdamState<T>* opt,
                     const std::string& path) {
  auto bytes = serialize_store(ps, opt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("checkpoint: cannot open " + path + " for writing");
  f.write(bytes.data(), (std::streamsize)bytes.size());
  if (!f) throw DataError("checkpoint: short write to " + path);
}

template <class T>
void load_checkpoint_bytes(const unsigned char* data, size_t size, ParameterStore<T>& out,
                           AdamState<T>* opt) {
  detail::ByteReader r{data, size};
  if (r.bytes(4) != "STCK") throw DataError("checkpoint: bad magic");
  uint16_t ver = r.u16();
  if (ver != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(ver));
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nl = r.u16();
    std::string name = r.bytes(nl);
    r.need(2);
    uint8_t dtype = data[r.o++];
    uint8_t rank = data[r.o++];
    if (dtype != detail::dtype_code<T>())
      throw DataError("checkpoint: dtype mismatch for " + name);
    Shape shape(rank);
    int64_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape[d] = r.u32();
      n *= shape[d];
    }
    r.need((size_t)n * sizeof(T));
    std::vector<T> vals((size_t)n);
    std::memcpy(vals.data(), data + r.o, (size_t)n * sizeof(T));
    r.o += (size_t)n * sizeof(T);

    if (name == kOptStepName) {
      if (opt) opt->step = (int64_t)vals[0];
    } else if (name.rfind(kOptMPrefix, 0) == 0) {
      if (opt) opt->m[name.substr(kOptMPrefix.size())] = std::move(vals);
    } else if (name.rfind(kOptVPrefix, 0) == 0) {
      if (opt) opt->v[name.substr(kOptVPrefix.size())] = std::move(vals);
    } else {
      if (out.has(name)) {
        auto& p = out.at(name);
        contract(p.shape() == shape, "checkpoint: shape clash for " + name);
        p.values() = std::move(vals);
      } else {
        out.get_or_create(name, shape, [&](std::vector<T>& v) { v = std::move(vals); });
      }
    }
  }
  if (r.o != size) throw DataError("checkpoint: trailing bytes");
}

template <class T>
void load_checkpoint(const std::string& path, ParameterStore<T>& out, AdamState<T>* opt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  load_checkpoint_bytes(bytes.data(), bytes.size(), out, opt);
}

// FNV-1a over the serialized parameter records; identifies a trained model.
template <class T>
uint64_t store_hash(const ParameterStore<T>& ps) {
  auto bytes = serialize_store(ps);
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---- layers ----------------------------------------------------------------

// Per-sample conditioning handle for variable-rate models: levels[i] selects
// the modulation row applied to batch element i.
struct ModCtx {
  bool active = false;
  std::vector<int64_t> levels;
};

template <class T>
struct ConvLayer {
  Tensor<T> w, b, gamma, delta;
  int64_t in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0, out_pad = 0;
  bool transpose = false;
  bool modulated = false;

  ConvLayer() = default;
  ConvLayer(ParameterStore<T>& ps, Rng& rng, const std::string& prefix, int64_t in_ch,
            int64_t out_ch, int64_t k, int64_t stride, bool transpose, int64_t vbr_levels)
      : in_ch(in_ch), out_ch(out_ch), k(k), stride(stride), pad((k - 1) / 2),
        out_pad(transpose ? stride - 1 : 0), transpose(transpose), modulated(vbr_levels > 0) {
    contract(k % 2 == 1, "ConvLayer: even kernels unsupported, got k=" + std::to_string(k));
    Shape wshape = transpose ? Shape{in_ch, out_ch, k, k} : Shape{out_ch, in_ch, k, k};
    int64_t fan_in = in_ch * k * k;
    w = ps.get_or_create(prefix + ".w", wshape,
                         [&](std::vector<T>& v) { kaiming_uniform_fill(v, fan_in, rng); });
    b = ps.get_or_create(prefix + ".b", {out_ch}, [](std::vector<T>& v) {});
    if (modulated) {
      gamma = ps.get_or_create(prefix + ".gamma", {vbr_levels, out_ch}, [](std::vector<T>& v) {
        std::fill(v.begin(), v.end(), T(1));
      });
      delta = ps.get_or_create(prefix + ".delta", {vbr_levels, out_ch}, [](std::vector<T>& v) {});
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const ModCtx& mc) const {
    auto y = transpose ? conv2d_transpose(x, w, stride, pad, out_pad) : conv2d(x, w, stride, pad);
    y = add(y, reshape(b, {out_ch, 1, 1}));
    if (modulated && mc.active) {
      int64_t n = x.dim(0);
      contract((int64_t)mc.levels.size() == n, "ConvLayer: modulation levels size " +
                                                   std::to_string(mc.levels.size()) +
                                                   " for batch " + std::to_string(n));
      auto g = reshape(embedding_rows(gamma, mc.levels), {n, out_ch, 1, 1});
      auto d = reshape(embedding_rows(delta, mc.levels), {n, out_ch, 1, 1});
      y = add(mul(y, g), d);
    }
    return y;
  }
};

}  // namespace stvc
