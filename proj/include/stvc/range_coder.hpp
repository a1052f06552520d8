#pragma once

// Bit-exact entropy coding of integer symbols against frozen cumulative
// frequency tables. 64-bit range coder, 16-bit renormalization, frequency
// precision 2^16; out-of-support values go through an escape bucket followed
// by a raw 32-bit payload. Streams are framed as length/crc32/payload chunks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stvc/common.hpp"

namespace stvc {

namespace detail {
constexpr std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> t{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
    t[i] = c;
  }
  return t;
}
inline constexpr auto kCrcTable = make_crc_table();
}  // namespace detail

inline uint32_t crc32(const uint8_t* d, size_t n) {
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = (c >> 8) ^ detail::kCrcTable[(c ^ d[i]) & 0xFFu];
  return ~c;
}

// cumulative frequencies over [kmin, kmin+nsym) plus an optional trailing
// escape bucket; cum.back() == 2^16 and every bucket holds at least 1
struct CdfTable {
  int64_t kmin = 0;
  int64_t nsym = 0;
  bool has_escape = false;
  std::vector<uint32_t> cum;
};

inline CdfTable freeze_pmf(const std::vector<double>& p, int64_t kmin, double tail_mass) {
  contract(!p.empty(), "freeze_pmf: empty pmf");
  contract((int64_t)p.size() <= 32768, "freeze_pmf: support wider than 2^15 symbols");
  contract(std::isfinite(tail_mass) && tail_mass >= 0, "freeze_pmf: bad tail mass");
  for (double v : p)
    contract(std::isfinite(v) && v >= 0, "freeze_pmf: pmf entries must be finite, nonnegative");

  bool esc = tail_mass > 0;
  size_t nb = p.size() + (esc ? 1 : 0);
  std::vector<double> desired(nb);
  for (size_t i = 0; i < p.size(); ++i) desired[i] = p[i] * 65536.0;
  if (esc) desired.back() = tail_mass * 65536.0;

  std::vector<int64_t> f(nb);
  int64_t total = 0;
  for (size_t i = 0; i < nb; ++i) total += (f[i] = std::max<int64_t>(1, std::llround(desired[i])));

  // push total to exactly 2^16, one unit at a time toward the bucket whose
  // rounding gap is largest; floor-clamped buckets never shrink below 1
  while (total != 65536) {
    bool shrink = total > 65536;
    int64_t best = -1, candidates = 0;
    double bestgap = -1e300;
    for (size_t i = 0; i < nb; ++i) {
      if (shrink && f[i] <= 1) continue;
      ++candidates;
      double gap = shrink ? (double)f[i] - desired[i] : desired[i] - (double)f[i];
      if (gap > bestgap) {
        bestgap = gap;
        best = (int64_t)i;
      }
    }
    contract(best >= 0, "freeze_pmf: cannot renormalize to 2^16");
    if (candidates == 1 && shrink) {
      int64_t take = std::min(total - 65536, f[best] - 1);
      f[best] -= take;
      total -= take;
      contract(take > 0, "freeze_pmf: cannot renormalize to 2^16");
    } else {
      f[best] += shrink ? -1 : 1;
      total += shrink ? -1 : 1;
    }
  }

  CdfTable t;
  t.kmin = kmin;
  t.nsym = (int64_t)p.size();
  t.has_escape = esc;
  t.cum.resize(nb + 1);
  t.cum[0] = 0;
  for (size_t i = 0; i < nb; ++i) t.cum[i + 1] = t.cum[i] + (uint32_t)f[i];
  return t;
}

inline CdfTable freeze_pmf(const std::vector<double>& p, int64_t kmin) {
  double s = 0;
  for (double v : p) s += v;
  return freeze_pmf(p, kmin, std::max(0.0, 1.0 - s));
}

class RangeEncoder {
 public:
  void encode_bucket(const CdfTable& t, int64_t bucket) {
    contract(bucket >= 0 && bucket + 1 < (int64_t)t.cum.size(), "range encoder: bucket out of range");
    step(t.cum[bucket], t.cum[bucket + 1] - t.cum[bucket]);
  }

  void encode_raw16(uint32_t v) {
    contract(v <= 0xFFFFu, "range encoder: raw16 out of range");
    step(v, 1);
  }

  void encode(const CdfTable& t, int64_t symbol) {
    int64_t b = symbol - t.kmin;
    if (b >= 0 && b < t.nsym) {
      encode_bucket(t, b);
      return;
    }
    contract(t.has_escape, "range encoder: symbol outside support and table has no escape");
    contract(symbol >= INT32_MIN && symbol <= INT32_MAX, "range encoder: symbol beyond 32 bits");
    encode_bucket(t, t.nsym);
    uint32_t u = (uint32_t)(int32_t)symbol;
    encode_raw16(u >> 16);
    encode_raw16(u & 0xFFFFu);
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 4; ++i) {
      emit((uint16_t)(low_ >> 48));
      low_ <<= 16;
    }
    std::vector<uint8_t> out(words_.size() * 2);
    for (size_t i = 0; i < words_.size(); ++i) {
      out[2 * i] = (uint8_t)(words_[i] >> 8);
      out[2 * i + 1] = (uint8_t)(words_[i] & 0xFFu);
    }
    return out;
  }

 private:
  void step(uint64_t cum, uint64_t freq) {
    uint64_t r = range_ >> 16;
    uint64_t before = low_;
    low_ += r * cum;
    if (low_ < before) carry();
    range_ = r * freq;
    while (range_ < (1ull << 48)) {
      emit((uint16_t)(low_ >> 48));
      low_ <<= 16;
      range_ <<= 16;
    }
  }

  void emit(uint16_t w) { words_.push_back(w); }

  void carry() {
    int64_t i = (int64_t)words_.size() - 1;
    while (i >= 0 && words_[i] == 0xFFFFu) words_[i--] = 0;
    contract(i >= 0, "range encoder: carry underflow");  // unreachable for valid tables
    ++words_[i];
  }

  std::vector<uint16_t> words_;
  uint64_t low_ = 0, range_ = ~0ull;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t n) : p_(data), n_(n) {
    if (n < 8 || n % 2 != 0) throw DataError("range decoder: payload truncated");
    for (int i = 0; i < 4; ++i) code_ = (code_ << 16) | next16();
  }

  int64_t decode_bucket(const CdfTable& t) {
    uint64_t r = range_ >> 16;
    uint64_t v = (code_ - low_) / r;
    if (v > 65535) v = 65535;
    auto it = std::upper_bound(t.cum.begin(), t.cum.end(), (uint32_t)v);
    int64_t b = (int64_t)(it - t.cum.begin()) - 1;
    step(r, t.cum[b], t.cum[b + 1] - t.cum[b]);
    return b;
  }

  uint32_t decode_raw16() {
    uint64_t r = range_ >> 16;
    uint64_t v = (code_ - low_) / r;
    if (v > 65535) v = 65535;
    step(r, v, 1);
    return (uint32_t)v;
  }

  int64_t decode(const CdfTable& t) {
    int64_t b = decode_bucket(t);
    if (t.has_escape && b == t.nsym) {
      uint32_t hi = decode_raw16(), lo = decode_raw16();
      return (int64_t)(int32_t)((hi << 16) | lo);
    }
    return t.kmin + b;
  }

 private:
  void step(uint64_t r, uint64_t cum, uint64_t freq) {
    low_ += r * cum;
    range_ = r * freq;
    while (range_ < (1ull << 48)) {
      code_ = (code_ << 16) | next16();
      low_ <<= 16;
      range_ <<= 16;
    }
  }

  uint16_t next16() {
    if (pos_ + 2 > n_) throw DataError("range decoder: stream underrun");
    uint16_t w = (uint16_t)((p_[pos_] << 8) | p_[pos_ + 1]);
    pos_ += 2;
    return w;
  }

  const uint8_t* p_;
  size_t n_, pos_ = 0;
  uint64_t low_ = 0, range_ = ~0ull, code_ = 0;
};

// chunk layout: u32 payload length, u32 crc32 of payload, payload; big-endian
inline std::vector<uint8_t> write_chunk(const std::vector<uint8_t>& payload) {
  contract(payload.size() <= 0xFFFFFFFFull, "write_chunk: payload too large");
  uint32_t len = (uint32_t)payload.size();
  uint32_t c = crc32(payload.data(), payload.size());
  std::vector<uint8_t> out;
  out.reserve(8 + payload.size());
  for (int i = 3; i >= 0; --i) out.push_back((uint8_t)(len >> (8 * i)));
  for (int i = 3; i >= 0; --i) out.push_back((uint8_t)(c >> (8 * i)));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline std::vector<uint8_t> read_chunk(const uint8_t* data, size_t size, size_t& offset) {
  if (offset + 8 > size) throw DataError("read_chunk: header truncated");
  auto u32 = [&](size_t at) {
    return ((uint32_t)data[at] << 24) | ((uint32_t)data[at + 1] << 16) |
           ((uint32_t)data[at + 2] << 8) | (uint32_t)data[at + 3];
  };
  uint32_t len = u32(offset), want = u32(offset + 4);
  if (offset + 8 + (size_t)len > size) throw DataError("read_chunk: length exceeds buffer");
  uint32_t got = crc32(data + offset + 8, len);
  if (got != want) throw DataError("read_chunk: crc mismatch");
  std::vector<uint8_t> payload(data + offset + 8, data + offset + 8 + len);
  offset += 8 + (size_t)len;
  return payload;
}

}  // namespace stvc
