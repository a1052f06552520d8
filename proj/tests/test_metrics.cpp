#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stvc/metrics.hpp"
#include "stvc/models.hpp"
#include "stvc/training.hpp"

using namespace stvc;
using D = double;

namespace {

Tensor<D> grid_clip(uint64_t seed, int64_t t, int64_t h, int64_t w) {
  Rng rng(seed);
  auto x = Tensor<D>::zeros({t, 3, h, w});
  for (D& v : x.values()) v = (D)rng.uniform_int(0, 255) / 255.0;
  return x;
}

Tensor<D> shift_levels(const Tensor<D>& x, int levels) {
  auto y = x.detach();
  for (D& v : y.values()) v = std::min(1.0, v + levels / 255.0);
  return y;
}

void zero_prefix(ParameterStore<D>& ps, const std::string& prefix) {
  for (const auto& name : ps.names())
    if (name.rfind(prefix, 0) == 0)
      for (D& v : ps.at(name).values()) v = 0;
}

}  // namespace

TEST_CASE("psnr matches the closed forms", "[metrics]") {
  auto x = grid_clip(7, 3, 8, 10);

  SECTION("identical input is the +inf sentinel") {
    REQUIRE(std::isinf(psnr(x, x)));
    REQUIRE(psnr(x, x) > 0);
  }

  SECTION("uniform one-level error pins 48.1308 dB") {
    auto lo = x.detach();
    for (D& v : lo.values()) v = std::min(v, 254.0 / 255.0);
    CHECK(psnr(lo, shift_levels(lo, 1)) == Catch::Approx(10.0 * std::log10(65025.0)).epsilon(1e-9));
    CHECK(psnr(lo, shift_levels(lo, 1)) == Catch::Approx(48.1308).margin(1e-4));
  }

  SECTION("per-frame averaging, not pooled MSE") {
    auto base = grid_clip(9, 2, 8, 10);
    for (D& v : base.values()) v = std::min(v, 250.0 / 255.0);
    auto bad = base.detach();
    auto& bv = bad.values();
    int64_t per = base.numel() / 2;
    for (int64_t i = 0; i < per; ++i) bv[(size_t)i] += 1.0 / 255.0;
    for (int64_t i = per; i < base.numel(); ++i) bv[(size_t)i] += 2.0 / 255.0;
    double per_frame = (10.0 * std::log10(65025.0) + 10.0 * std::log10(65025.0 / 4.0)) / 2.0;
    double pooled = 10.0 * std::log10(65025.0 / 2.5);
    double got = psnr(base, bad);
    CHECK(got == Catch::Approx(per_frame).epsilon(1e-9));
    CHECK(std::fabs(got - pooled) > 0.5);
  }

  SECTION("errors below half a level vanish in the 8-bit rounding") {
    auto y = x.detach();
    for (D& v : y.values()) v = std::clamp(v + 0.4 / 255.0, 0.0, 1.0);
    REQUIRE(std::isinf(psnr(x, y)));
  }

  SECTION("shape mismatch rejected") {
    REQUIRE_THROWS_AS(psnr(x, grid_clip(7, 3, 8, 11)), ContractError);
  }
}

TEST_CASE("bpp is file bits over pixels", "[metrics]") {
  CHECK(bpp_of(1000, 2, 10, 10) == Catch::Approx(40.0));
  CHECK(bpp_of(1, 1, 1, 1) == Catch::Approx(8.0));
  REQUIRE_THROWS_AS(bpp_of(10, 0, 4, 4), ContractError);
}

TEST_CASE("bd_rate recovers constant rate scalings", "[metrics]") {
  auto curve = [](double scale) {
    std::vector<RdPoint> pts;
    for (int i = 0; i < 4; ++i) {
      RdPoint p;
      p.bpp = scale * 0.1 * std::pow(2.0, i);
      p.psnr = 30.0 + 2.5 * i;
      pts.push_back(p);
    }
    return pts;
  };

  SECTION("identical curves give zero") {
    CHECK(bd_rate(curve(1.0), curve(1.0)) == Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("10 percent cheaper everywhere reads -10") {
    CHECK(bd_rate(curve(1.0), curve(0.9)) == Catch::Approx(-10.0).epsilon(1e-9));
  }
  SECTION("10 percent dearer everywhere reads +10") {
    CHECK(bd_rate(curve(1.0), curve(1.1)) == Catch::Approx(10.0).epsilon(1e-9));
  }
  SECTION("two-point curves fit a line") {
    auto ca = curve(1.0), cb = curve(0.8);
    std::vector<RdPoint> a(ca.begin(), ca.begin() + 2);
    std::vector<RdPoint> b(cb.begin(), cb.begin() + 2);
    CHECK(bd_rate(a, b) == Catch::Approx(-20.0).epsilon(1e-9));
  }
  SECTION("disjoint quality ranges rejected") {
    auto hi = curve(1.0);
    for (auto& p : hi) p.psnr += 100.0;
    REQUIRE_THROWS_AS(bd_rate(curve(1.0), hi), ContractError);
  }
  SECTION("nonpositive rate rejected") {
    auto badpts = curve(1.0);
    badpts[1].bpp = 0.0;
    REQUIRE_THROWS_AS(bd_rate(badpts, curve(1.0)), ContractError);
  }
}

TEST_CASE("correlation statistics match trigonometric identities", "[metrics]") {
  const double w0 = 2.0 * 3.14159265358979323846 / 16.0;

  SECTION("pearson basics") {
    std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8}, c{8, 6, 4, 2}, k{5, 5, 5, 5};
    CHECK(pearson(a, b) == Catch::Approx(1.0));
    CHECK(pearson(a, c) == Catch::Approx(-1.0));
    CHECK(pearson(a, k) == 0.0);
  }

  SECTION("translating sine wave: lag-1 correlation is cos of the phase step") {
    auto clip = Tensor<D>::zeros({6, 1, 1, 64});
    auto& v = clip.values();
    for (int64_t t = 0; t < 6; ++t)
      for (int64_t i = 0; i < 64; ++i)
        v[(size_t)(t * 64 + i)] = std::sin(w0 * (double)(i + 2 * t));
    CHECK(lag1_temporal(clip) == Catch::Approx(std::cos(2.0 * w0)).epsilon(1e-9));
  }

  SECTION("still clip has lag-1 correlation one") {
    auto frame = slice(grid_clip(3, 1, 4, 16), 0, 0, 1);
    CHECK(lag1_temporal(concat({frame, frame, frame}, 0)) == Catch::Approx(1.0));
  }

  SECTION("diagonal sine: spatial autocorrelation is cos(w*d) both directions") {
    auto img = Tensor<D>::zeros({1, 1, 16, 64});
    auto& v = img.values();
    for (int64_t y = 0; y < 16; ++y)
      for (int64_t x = 0; x < 64; ++x) v[(size_t)(y * 64 + x)] = std::sin(w0 * (double)(x + y));
    for (int64_t d = 1; d <= 4; ++d)
      CHECK(spatial_autocorr(img, d) == Catch::Approx(std::cos(w0 * (double)d)).margin(1e-9));
  }

  SECTION("independent noise decorrelates") {
    Rng rng(11);
    auto clip = Tensor<D>::zeros({4, 1, 16, 16});
    for (D& v : clip.values()) v = rng.normal();
    CHECK(std::fabs(lag1_temporal(clip)) < 0.15);
    CHECK(std::fabs(spatial_autocorr(clip, 1)) < 0.15);
  }
}

TEST_CASE("whiteness report with an identity transform echoes the input", "[metrics]") {
  ModelConfig cfg;
  cfg.transform = Transform::TAT;
  cfg.prior = PriorKind::FACTORIZED;
  cfg.hyperprior = false;
  cfg.channels = 8;
  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, 21, cfg);

  // zeroed mean and log-sigma nets: h_mu = 0, h_sigma = exp(0) = 1, so the
  // normalized residual is the input frame itself
  zero_prefix(ps, "pf.hmu.");
  zero_prefix(ps, "pf.hsig.");

  ClipSpec spec;
  spec.frames = 5;
  spec.height = 16;
  spec.width = 16;
  auto frames = concat(gen_clip<D>(31, spec).frames, 0);
  auto rep = whiteness_diag(codec, frames);

  auto tail = slice(frames, 0, 1, 5);
  CHECK(rep.lag1_resid == Catch::Approx(lag1_temporal(tail)).epsilon(1e-12));
  REQUIRE(rep.spatial_resid.size() == 4);
  REQUIRE(rep.spatial_input.size() == 4);
  for (int64_t d = 1; d <= 4; ++d) {
    CHECK(rep.spatial_resid[(size_t)(d - 1)] ==
          Catch::Approx(spatial_autocorr(tail, d)).epsilon(1e-12));
    CHECK(rep.spatial_input[(size_t)(d - 1)] ==
          Catch::Approx(spatial_autocorr(frames, d)).epsilon(1e-12));
  }
  CHECK(rep.lag1_input == Catch::Approx(lag1_temporal(frames)).epsilon(1e-12));
  CHECK(rep.lag1_input > 0.5);  // translating sprites are strongly correlated
}

TEST_CASE("whiteness report is finite for an untrained codec", "[metrics]") {
  ModelConfig cfg;
  cfg.transform = Transform::STAT_SSF;
  cfg.prior = PriorKind::SP;
  cfg.channels = 8;
  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, 22, cfg);

  ClipSpec spec;
  spec.frames = 3;
  spec.height = 32;
  spec.width = 32;
  auto rep = whiteness_diag(codec, concat(gen_clip<D>(5, spec).frames, 0));
  for (double c : {rep.lag1_input, rep.lag1_resid}) {
    CHECK(std::isfinite(c));
    CHECK(std::fabs(c) <= 1.0 + 1e-12);
  }
  for (size_t i = 0; i < 4; ++i) {
    CHECK(std::fabs(rep.spatial_input[i]) <= 1.0 + 1e-12);
    CHECK(std::fabs(rep.spatial_resid[i]) <= 1.0 + 1e-12);
  }
}
