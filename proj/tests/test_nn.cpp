#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "stvc/nn.hpp"

using stvc::Tensor;
namespace sv = stvc;
using Catch::Matchers::WithinAbs;

static std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST_CASE("parameter store creation and lookup") {
  sv::ParameterStore<float> ps;
  stvc::Rng rng(1);
  auto& w = ps.get_or_create("enc.w", {4, 3, 5, 5}, [&](std::vector<float>& v) {
    sv::kaiming_uniform_fill(v, 3 * 5 * 5, rng);
  });
  REQUIRE(w.requires_grad());
  REQUIRE(ps.has("enc.w"));
  REQUIRE_FALSE(ps.has("enc.b"));
  // second call returns the same tensor, no re-init
  auto before = w.values();
  auto& again = ps.get_or_create("enc.w", {4, 3, 5, 5}, [&](std::vector<float>& v) {
    std::fill(v.begin(), v.end(), 9.f);
  });
  REQUIRE(again.values() == before);
  REQUIRE_THROWS_AS(ps.get_or_create("enc.w", {4, 3, 3, 3}, [](std::vector<float>&) {}),
                    stvc::ContractError);
  REQUIRE_THROWS_AS(ps.at("nope"), stvc::ContractError);

  // kaiming bound: |w| <= sqrt(6/fan_in)
  double bound = std::sqrt(6.0 / (3 * 5 * 5));
  for (float x : before) REQUIRE(std::abs(x) <= bound);
}

TEST_CASE("adam first and second steps match hand-computed values") {
  sv::ParameterStore<double> ps;
  auto& p = ps.get_or_create("p", {1}, [](std::vector<double>& v) { v[0] = 0.0; });
  sv::AdamState<double> st;

  auto run_step = [&] {
    p.zero_grad();
    auto loss = sv::mul(sv::sum(p), 1.0);  // dL/dp = 1
    sv::backward(loss);
    sv::adam_step(ps, st, 0.1, 0.9, 0.999, 1e-8);
  };

  run_step();
  // m=0.1, v=0.001, mhat=1, vhat=1 -> theta = -0.1/(1+1e-8)
  REQUIRE_THAT(p.values()[0], WithinAbs(-0.1 / (1 + 1e-8), 1e-15));
  REQUIRE(st.step == 1);

  // independent reference recursion for a few more steps with g=1
  double m = 0.1, v = 0.001, theta = p.values()[0];
  for (int t = 2; t <= 4; ++t) {
    run_step();
    m = 0.9 * m + 0.1;
    v = 0.999 * v + 0.001;
    double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    theta -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    REQUIRE_THAT(p.values()[0], WithinAbs(theta, 1e-14));
  }
}

TEST_CASE("adam leaves parameters with zero gradient unchanged") {
  sv::ParameterStore<double> ps;
  auto& p = ps.get_or_create("p", {3}, [](std::vector<double>& v) { v = {1, 2, 3}; });
  sv::AdamState<double> st;
  auto loss = sv::sum(sv::mul(p, 0.0));  // gradient exactly zero
  sv::backward(loss);
  sv::adam_step(ps, st, 0.1);
  REQUIRE(p.values() == std::vector<double>{1, 2, 3});
}

TEST_CASE("adam skips parameters that never saw a gradient") {
  sv::ParameterStore<double> ps;
  auto& used = ps.get_or_create("used", {1}, [](std::vector<double>& v) { v[0] = 0.5; });
  ps.get_or_create("orphan", {2}, [](std::vector<double>& v) { v = {7, 8}; });
  sv::AdamState<double> st;
  sv::backward(sv::sum(used));
  sv::adam_step(ps, st, 0.1);
  REQUIRE(ps.at("orphan").values() == std::vector<double>{7, 8});
  REQUIRE(st.skipped.count("orphan") == 1);
  REQUIRE(used.values()[0] != 0.5);
}

TEST_CASE("checkpoint byte layout follows the documented format") {
  sv::ParameterStore<float> ps;
  ps.get_or_create("a.w", {2, 2}, [](std::vector<float>& v) { v = {1.5f, -2.f, 0.25f, 4.f}; });
  ps.get_or_create("b", {3}, [](std::vector<float>& v) { v = {9, 8, 7}; });
  auto path = tmp_path("stvc_fmt.ckpt");
  sv::save_checkpoint(ps, (sv::AdamState<float>*)nullptr, path);

  std::ifstream f(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  size_t o = 0;
  auto u16 = [&] { uint16_t v = bytes[o] | bytes[o + 1] << 8; o += 2; return v; };
  auto u32 = [&] {
    uint32_t v = bytes[o] | bytes[o + 1] << 8 | bytes[o + 2] << 16 | (uint32_t)bytes[o + 3] << 24;
    o += 4; return v;
  };
  REQUIRE(bytes.size() > 10);
  REQUIRE(std::memcmp(bytes.data(), "STCK", 4) == 0);
  o = 4;
  REQUIRE(u16() == 1);        // version
  REQUIRE(u32() == 2);        // record count

  // record 1: "a.w", f32, rank 2, extents 2x2
  uint16_t nl = u16();
  REQUIRE(nl == 3);
  REQUIRE(std::memcmp(&bytes[o], "a.w", 3) == 0);
  o += nl;
  REQUIRE(bytes[o++] == 0);   // dtype f32
  REQUIRE(bytes[o++] == 2);   // rank
  REQUIRE(u32() == 2);
  REQUIRE(u32() == 2);
  float vals[4];
  std::memcpy(vals, &bytes[o], 16);
  o += 16;
  REQUIRE(vals[0] == 1.5f);
  REQUIRE(vals[3] == 4.f);

  // record 2: "b"
  nl = u16();
  REQUIRE(nl == 1);
  REQUIRE(bytes[o] == 'b');
  o += 1;
  REQUIRE(bytes[o++] == 0);
  REQUIRE(bytes[o++] == 1);
  REQUIRE(u32() == 3);
  o += 12;
  REQUIRE(o == bytes.size());
}

TEST_CASE("checkpoint roundtrip is bit-exact and carries optimizer state") {
  sv::ParameterStore<double> ps;
  stvc::Rng rng(5);
  ps.get_or_create("m.w", {3, 2}, [&](std::vector<double>& v) {
    for (auto& x : v) x = rng.normal() * 1e-20;  // tiny magnitudes must survive
  });
  ps.get_or_create("m.b", {2}, [&](std::vector<double>& v) { v = {0.1, -0.2}; });
  sv::AdamState<double> st;
  sv::backward(sv::sum(sv::mul(ps.at("m.w"), 2.0)));
  sv::backward(sv::sum(ps.at("m.b")));
  sv::adam_step(ps, st, 1e-3);

  auto path = tmp_path("stvc_rt.ckpt");
  sv::save_checkpoint(ps, &st, path);

  sv::ParameterStore<double> ld;
  sv::AdamState<double> lst;
  sv::load_checkpoint(path, ld, &lst);
  REQUIRE(ld.names() == ps.names());
  for (auto& name : ps.names()) REQUIRE(ld.at(name).values() == ps.at(name).values());
  REQUIRE(lst.step == st.step);
  REQUIRE(lst.m == st.m);
  REQUIRE(lst.v == st.v);

  // loading into a float store is a dtype mismatch
  sv::ParameterStore<float> bad;
  REQUIRE_THROWS_AS(sv::load_checkpoint(path, bad, (sv::AdamState<float>*)nullptr),
                    stvc::DataError);
}

TEST_CASE("checkpoint rejects corrupt inputs") {
  sv::ParameterStore<float> ps;
  ps.get_or_create("x", {4}, [](std::vector<float>& v) { v = {1, 2, 3, 4}; });
  auto path = tmp_path("stvc_bad.ckpt");
  sv::save_checkpoint(ps, (sv::AdamState<float>*)nullptr, path);

  std::ifstream f(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  SECTION("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    std::ofstream(path, std::ios::binary).write(b.data(), b.size());
    sv::ParameterStore<float> out;
    REQUIRE_THROWS_AS(sv::load_checkpoint(path, out, (sv::AdamState<float>*)nullptr),
                      stvc::DataError);
  }
  SECTION("truncated") {
    std::ofstream(path, std::ios::binary).write(bytes.data(), bytes.size() - 5);
    sv::ParameterStore<float> out;
    REQUIRE_THROWS_AS(sv::load_checkpoint(path, out, (sv::AdamState<float>*)nullptr),
                      stvc::DataError);
  }
  SECTION("missing file") {
    sv::ParameterStore<float> out;
    REQUIRE_THROWS_AS(sv::load_checkpoint(tmp_path("nope.ckpt"), out,
                                          (sv::AdamState<float>*)nullptr),
                      stvc::DataError);
  }
}

TEST_CASE("store hash tracks content") {
  sv::ParameterStore<float> a, b;
  a.get_or_create("w", {2}, [](std::vector<float>& v) { v = {1, 2}; });
  b.get_or_create("w", {2}, [](std::vector<float>& v) { v = {1, 2}; });
  REQUIRE(sv::store_hash(a) == sv::store_hash(b));
  b.at("w").values()[0] = 1.0001f;
  REQUIRE(sv::store_hash(a) != sv::store_hash(b));
}

TEST_CASE("conv layer geometry, bias, and modulation") {
  sv::ParameterStore<float> ps;
  stvc::Rng rng(9);
  sv::ConvLayer<float> down(ps, rng, "down", 3, 8, 5, 2, false, 0);
  sv::ConvLayer<float> up(ps, rng, "up", 8, 3, 5, 2, true, 0);
  auto x = Tensor<float>::rand_uniform({2, 3, 16, 16}, rng, 0, 1);
  auto y = down.forward(x, {});
  REQUIRE(y.shape() == stvc::Shape{2, 8, 8, 8});
  auto z = up.forward(y, {});
  REQUIRE(z.shape() == stvc::Shape{2, 3, 16, 16});

  // bias shifts each output channel
  auto& b = ps.at("down.b");
  auto y0 = down.forward(x, {});
  b.values()[2] += 1.0f;
  auto y1 = down.forward(x, {});
  for (int64_t i = 0; i < 8 * 8; ++i) {
    REQUIRE_THAT(y1.at({0, 2, i / 8, i % 8}) - y0.at({0, 2, i / 8, i % 8}), WithinAbs(1.0, 1e-6));
    REQUIRE(y1.at({0, 3, i / 8, i % 8}) == y0.at({0, 3, i / 8, i % 8}));
  }

  SECTION("fresh modulation tables are an exact identity") {
    sv::ConvLayer<float> mod(ps, rng, "mod", 3, 4, 3, 1, false, 5);
    sv::ModCtx mc{true, {3, 1}};
    auto plain = sv::conv2d(x, ps.at("mod.w"), 1, 1);
    plain = sv::add(plain, sv::reshape(ps.at("mod.b"), {4, 1, 1}));
    auto modded = mod.forward(x, mc);
    REQUIRE(modded.values() == plain.values());
  }
  SECTION("per-sample levels pick distinct rows") {
    sv::ConvLayer<float> mod(ps, rng, "mod2", 3, 4, 3, 1, false, 5);
    ps.at("mod2.gamma").values() = {1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5};
    auto base = mod.forward(x, sv::ModCtx{true, {0, 0}});
    auto mixed = mod.forward(x, sv::ModCtx{true, {0, 2}});
    // sample 0 identical, sample 1 scaled by 3
    int64_t half = base.numel() / 2;
    for (int64_t i = 0; i < half; ++i) REQUIRE(mixed.values()[i] == base.values()[i]);
    for (int64_t i = half; i < base.numel(); ++i)
      REQUIRE_THAT(mixed.values()[i], WithinAbs(3.f * base.values()[i], 1e-5));
    REQUIRE_THROWS_AS(mod.forward(x, sv::ModCtx{true, {0}}), stvc::ContractError);  // N mismatch
  }
}

TEST_CASE("modulation tables receive gradients") {
  sv::ParameterStore<double> ps;
  stvc::Rng rng(21);
  sv::ConvLayer<double> mod(ps, rng, "m", 2, 3, 3, 1, false, 4);
  auto x = Tensor<double>::rand_uniform({2, 2, 6, 6}, rng, -1, 1);
  fd::check_grads<double>(
      [&] { return sv::sum(sv::tanh(mod.forward(x, sv::ModCtx{true, {1, 3}}))); },
      {ps.at("m.gamma"), ps.at("m.delta"), ps.at("m.w"), ps.at("m.b")});
}

TEST_CASE("checkpointed model reproduces forward bits") {
  sv::ParameterStore<float> ps;
  stvc::Rng rng(33);
  sv::ConvLayer<float> l1(ps, rng, "l1", 3, 6, 5, 2, false, 0);
  sv::ConvLayer<float> l2(ps, rng, "l2", 6, 3, 5, 2, true, 0);
  auto x = Tensor<float>::rand_uniform({1, 3, 16, 16}, rng, 0, 1);
  auto y = l2.forward(sv::relu(l1.forward(x, {})), {});

  auto path = tmp_path("stvc_model.ckpt");
  sv::save_checkpoint(ps, (sv::AdamState<float>*)nullptr, path);
  sv::ParameterStore<float> ld;
  sv::load_checkpoint(path, ld, (sv::AdamState<float>*)nullptr);
  sv::ConvLayer<float> r1(ld, rng, "l1", 3, 6, 5, 2, false, 0);
  sv::ConvLayer<float> r2(ld, rng, "l2", 6, 3, 5, 2, true, 0);
  auto y2 = r2.forward(sv::relu(r1.forward(x, {})), {});
  REQUIRE(y.values() == y2.values());
}
