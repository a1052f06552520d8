#include <catch2/catch_amalgamated.hpp>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "stvc/plot.hpp"
#include "stvc/video_io.hpp"

using namespace stvc;
using D = double;

namespace {

Tensor<D> grid_clip(uint64_t seed, int64_t t, int64_t h, int64_t w) {
  Rng rng(seed);
  auto x = Tensor<D>::zeros({t, 3, h, w});
  for (D& v : x.values()) v = (D)rng.uniform_int(0, 255) / 255.0;
  return x;
}

std::string tmp_path(const char* name) { return std::string("/tmp/stvc_io_") + name; }

}  // namespace

TEST_CASE("raw video container round trips exactly", "[video_io]") {
  auto clip = grid_clip(3, 4, 6, 10);
  auto bytes = video_to_bytes(clip);
  REQUIRE(bytes.size() == 16u + 4u * 3u * 6u * 10u);
  CHECK(bytes[0] == 'R');
  CHECK(bytes[1] == 'G');
  CHECK(bytes[2] == 'B');
  CHECK(bytes[3] == 'V');

  auto back = video_from_bytes<D>(bytes);
  REQUIRE(back.shape() == clip.shape());
  for (int64_t i = 0; i < clip.numel(); ++i)
    REQUIRE(back.values()[(size_t)i] == clip.values()[(size_t)i]);

  auto path = tmp_path("clip.rgbv");
  save_video(path, clip);
  auto loaded = load_video<D>(path);
  for (int64_t i = 0; i < clip.numel(); ++i)
    REQUIRE(loaded.values()[(size_t)i] == clip.values()[(size_t)i]);
  std::remove(path.c_str());
}

TEST_CASE("raw video container rejects malformed bytes", "[video_io]") {
  auto bytes = video_to_bytes(grid_clip(4, 2, 4, 4));

  SECTION("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    REQUIRE_THROWS_AS(video_from_bytes<D>(b), DataError);
  }
  SECTION("size mismatch") {
    auto b = bytes;
    b.pop_back();
    REQUIRE_THROWS_AS(video_from_bytes<D>(b), DataError);
    b = bytes;
    b.push_back(0);
    REQUIRE_THROWS_AS(video_from_bytes<D>(b), DataError);
  }
  SECTION("truncated header") {
    std::vector<uint8_t> b(bytes.begin(), bytes.begin() + 10);
    REQUIRE_THROWS_AS(video_from_bytes<D>(b), DataError);
  }
  SECTION("absurd dimensions") {
    auto b = bytes;
    b[4] = 0xFF;  // width explodes past the cap
    b[5] = 0xFF;
    b[6] = 0xFF;
    b[7] = 0xFF;
    REQUIRE_THROWS_AS(video_from_bytes<D>(b), DataError);
  }
  SECTION("zero frames") {
    auto b = bytes;
    b[12] = b[13] = b[14] = b[15] = 0;
    REQUIRE_THROWS_AS(video_from_bytes<D>(b), DataError);
  }
}

TEST_CASE("ppm round trips and parses awkward headers", "[video_io]") {
  auto frame = clip_frame(grid_clip(9, 1, 4, 8), 0);
  auto path = tmp_path("frame.ppm");
  save_ppm(path, frame);

  SECTION("round trip is exact on the 8-bit grid") {
    auto back = load_ppm<D>(path);
    REQUIRE(back.shape() == frame.shape());
    for (int64_t i = 0; i < frame.numel(); ++i)
      REQUIRE(back.values()[(size_t)i] == frame.values()[(size_t)i]);
  }

  SECTION("header bytes are canonical") {
    auto bytes = read_file(path);
    std::string head(bytes.begin(), bytes.begin() + 11);
    CHECK(head == "P6\n8 4\n255\n");
    CHECK(bytes.size() == 11u + 8u * 4u * 3u);
  }

  SECTION("comments in the header are skipped") {
    auto bytes = read_file(path);
    std::vector<uint8_t> doctored;
    std::string head = "P6 # binary pixmap\n# another note\n8 4\n# width height above\n255\n";
    doctored.insert(doctored.end(), head.begin(), head.end());
    doctored.insert(doctored.end(), bytes.begin() + 11, bytes.end());
    auto wpath = tmp_path("comments.ppm");
    write_file(wpath, doctored);
    auto back = load_ppm<D>(wpath);
    for (int64_t i = 0; i < frame.numel(); ++i)
      REQUIRE(back.values()[(size_t)i] == frame.values()[(size_t)i]);
    std::remove(wpath.c_str());
  }

  SECTION("wrong magic, maxval, or payload size rejected") {
    auto bytes = read_file(path);
    auto wpath = tmp_path("bad.ppm");

    auto doctored = bytes;
    doctored[1] = '5';
    write_file(wpath, doctored);
    REQUIRE_THROWS_AS(load_ppm<D>(wpath), DataError);

    std::string head65535 = "P6\n8 4\n65535\n";
    doctored.assign(head65535.begin(), head65535.end());
    doctored.insert(doctored.end(), bytes.begin() + 11, bytes.end());
    write_file(wpath, doctored);
    REQUIRE_THROWS_AS(load_ppm<D>(wpath), DataError);

    doctored = bytes;
    doctored.pop_back();
    write_file(wpath, doctored);
    REQUIRE_THROWS_AS(load_ppm<D>(wpath), DataError);
    std::remove(wpath.c_str());
  }
  std::remove(path.c_str());
}

TEST_CASE("clip and frame stacking round trip", "[video_io]") {
  auto clip = grid_clip(13, 3, 4, 6);
  std::vector<Tensor<D>> frames;
  for (int64_t t = 0; t < 3; ++t) frames.push_back(clip_frame(clip, t));
  REQUIRE(frames[0].shape() == Shape{3, 4, 6});
  auto restacked = stack_frames(frames);
  REQUIRE(restacked.shape() == clip.shape());
  for (int64_t i = 0; i < clip.numel(); ++i)
    REQUIRE(restacked.values()[(size_t)i] == clip.values()[(size_t)i]);
}

TEST_CASE("svg plots are deterministic and well formed", "[plot]") {
  PlotSeries a{"ssf", {{0.1, 30.0}, {0.2, 33.0}, {0.4, 36.0}}};
  PlotSeries b{"stat-ssf", {{0.09, 30.5}, {0.18, 33.5}, {0.36, 36.5}}};
  auto path = tmp_path("rd.svg");
  write_svg_plot(path, "rate-distortion", "bpp", "psnr [dB]", {a, b});
  auto bytes = read_file(path);
  std::string text(bytes.begin(), bytes.end());
  CHECK(text.rfind("<svg", 0) == 0);
  CHECK(text.find("</svg>") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') > 10);
  size_t polys = 0;
  for (size_t at = text.find("<polyline"); at != std::string::npos;
       at = text.find("<polyline", at + 1))
    ++polys;
  CHECK(polys == 2);
  CHECK(text.find("stat-ssf") != std::string::npos);

  write_svg_plot(path, "rate-distortion", "bpp", "psnr [dB]", {a, b});
  CHECK(read_file(path) == bytes);
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(write_svg_plot(tmp_path("none.svg"), "t", "x", "y", {}), ContractError);
}
