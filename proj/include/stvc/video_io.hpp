#pragma once

// Frame I/O. Clip container: magic "RGBV", u32 W, u32 H, u32 T (big endian,
// like the codec container), then T frames of planar 8-bit RGB (R, G, B
// planes).
// Values map to [0,1] via /255 on load and round-to-nearest on save.
// Single images move through binary PPM (P6, maxval 255).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stvc/bitstream.hpp"
#include "stvc/common.hpp"
#include "stvc/tensor.hpp"

namespace stvc {

inline constexpr char kVideoMagic[4] = {'R', 'G', 'B', 'V'};
inline constexpr int64_t kMaxVideoDim = 1 << 16;

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  contract(f.good(), "read_file: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  contract(f.good(), "write_file: cannot open " + path);
  f.write((const char*)bytes.data(), (std::streamsize)bytes.size());
  contract(f.good(), "write_file: short write to " + path);
}

template <class T>
std::vector<uint8_t> video_to_bytes(const Tensor<T>& clip) {
  contract(clip.rank() == 4 && clip.shape()[1] == 3, "video_to_bytes: need [T,3,H,W]");
  int64_t tt = clip.shape()[0], h = clip.shape()[2], w = clip.shape()[3];
  std::vector<uint8_t> out;
  out.reserve((size_t)(16 + clip.numel()));
  out.insert(out.end(), kVideoMagic, kVideoMagic + 4);
  bitio::put32(out, (uint32_t)w);
  bitio::put32(out, (uint32_t)h);
  bitio::put32(out, (uint32_t)tt);
  for (T v : clip.values()) {
    double s = std::lround(std::clamp((double)v, 0.0, 1.0) * 255.0);
    out.push_back((uint8_t)s);
  }
  return out;
}

template <class T>
Tensor<T> video_from_bytes(const std::vector<uint8_t>& bytes) {
  bitio::Reader rd{bytes.data(), bytes.size()};
  rd.need(16);
  if (std::memcmp(bytes.data(), kVideoMagic, 4) != 0) throw DataError("video: bad magic");
  rd.o = 4;
  int64_t w = (int64_t)rd.u32(), h = (int64_t)rd.u32(), tt = (int64_t)rd.u32();
  if (w <= 0 || h <= 0 || tt <= 0 || w > kMaxVideoDim || h > kMaxVideoDim || tt > kMaxVideoDim)
    throw DataError("video: absurd dimensions");
  size_t want = (size_t)tt * 3 * (size_t)h * (size_t)w;
  if (bytes.size() != 16 + want) throw DataError("video: size mismatch");
  auto clip = Tensor<T>::zeros({tt, 3, h, w});
  auto& v = clip.values();
  for (size_t i = 0; i < want; ++i) v[i] = (T)(bytes[16 + i] / 255.0);
  return clip;
}

template <class T>
void save_video(const std::string& path, const Tensor<T>& clip) {
  write_file(path, video_to_bytes(clip));
}

template <class T>
Tensor<T> load_video(const std::string& path) {
  return video_from_bytes<T>(read_file(path));
}

// ---- PPM -----------------------------------------------------------------------

template <class T>
void save_ppm(const std::string& path, const Tensor<T>& frame) {
  contract(frame.rank() == 3 && frame.shape()[0] == 3, "save_ppm: need [3,H,W]");
  int64_t h = frame.shape()[1], w = frame.shape()[2];
  std::vector<uint8_t> out;
  char head[64];
  int n = std::snprintf(head, sizeof head, "P6\n%lld %lld\n255\n", (long long)w, (long long)h);
  out.insert(out.end(), head, head + n);
  const auto& v = frame.values();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        double s = std::lround(std::clamp((double)v[(size_t)((c * h + y) * w + x)], 0.0, 1.0) * 255.0);
        out.push_back((uint8_t)s);
      }
  write_file(path, out);
}

template <class T>
Tensor<T> load_ppm(const std::string& path) {
  auto bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') ++pos;
    if (start == pos) throw DataError("ppm: truncated header in " + path);
    return std::string(bytes.begin() + (long)start, bytes.begin() + (long)pos);
  };
  if (token() != "P6") throw DataError("ppm: not a binary P6 file: " + path);
  int64_t w = 0, h = 0, maxv = 0;
  try {
    w = std::stoll(token());
    h = std::stoll(token());
    maxv = std::stoll(token());
  } catch (const std::exception&) {
    throw DataError("ppm: malformed header in " + path);
  }
  if (w <= 0 || h <= 0 || w > kMaxVideoDim || h > kMaxVideoDim)
    throw DataError("ppm: absurd dimensions in " + path);
  if (maxv != 255) throw DataError("ppm: only maxval 255 supported: " + path);
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw DataError("ppm: missing pixel separator in " + path);
  ++pos;  // single whitespace after maxval
  size_t want = (size_t)w * (size_t)h * 3;
  if (bytes.size() - pos != want) throw DataError("ppm: pixel payload size mismatch in " + path);
  auto frame = Tensor<T>::zeros({3, h, w});
  auto& v = frame.values();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        v[(size_t)((c * h + y) * w + x)] = (T)(bytes[pos + (size_t)((y * w + x) * 3 + c)] / 255.0);
  return frame;
}

// Frame extraction/stacking between [T,3,H,W] clips and [3,H,W] frames.
template <class T>
Tensor<T> clip_frame(const Tensor<T>& clip, int64_t t) {
  contract(clip.rank() == 4, "clip_frame: need [T,C,H,W]");
  return reshape(slice(clip, 0, t, t + 1),
                 {clip.shape()[1], clip.shape()[2], clip.shape()[3]});
}

template <class T>
Tensor<T> stack_frames(const std::vector<Tensor<T>>& frames) {
  contract(!frames.empty(), "stack_frames: empty");
  std::vector<Tensor<T>> rows;
  for (const auto& f : frames) {
    contract(f.rank() == 3, "stack_frames: need [C,H,W] frames");
    rows.push_back(reshape(f, {1, f.shape()[0], f.shape()[1], f.shape()[2]}));
  }
  return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

}  // namespace stvc
