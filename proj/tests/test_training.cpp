#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "stvc/training.hpp"

using namespace stvc;

namespace {

using D = double;

bool same_values(const Tensor<D>& a, const Tensor<D>& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.values().size(); ++i)
    if (a.values()[i] != b.values()[i]) return false;
  return true;
}

ModelConfig tiny_cfg(Transform t, PriorKind p, bool hyper) {
  ModelConfig c;
  c.transform = t;
  c.prior = p;
  c.hyperprior = hyper;
  c.channels = 8;
  c.hyper_stride = 1;
  return c;
}

}  // namespace

TEST_CASE("clip generator determinism and invariants", "[training]") {
  ClipSpec sp;
  sp.frames = 4;
  sp.height = 32;
  sp.width = 32;

  auto a = gen_clip<D>(99, sp);
  auto b = gen_clip<D>(99, sp);
  REQUIRE(a.frames.size() == 4);
  REQUIRE(a.flow.size() == 3);
  REQUIRE(a.cut.size() == 3);
  for (size_t t = 0; t < 4; ++t) REQUIRE(same_values(a.frames[t], b.frames[t]));
  for (size_t t = 0; t < 3; ++t) REQUIRE(same_values(a.flow[t], b.flow[t]));

  auto c = gen_clip<D>(100, sp);
  CHECK_FALSE(same_values(a.frames[0], c.frames[0]));

  for (auto& f : a.frames)
    for (D v : f.values()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  for (auto& f : a.flow)
    for (D v : f.values()) REQUIRE(std::abs(v) <= 2.0 + 1e-12);

  SECTION("zero velocity with zero noise gives identical frames") {
    ClipSpec still = sp;
    still.still = true;
    auto s = gen_clip<D>(7, still);
    for (size_t t = 1; t < s.frames.size(); ++t)
      REQUIRE(same_values(s.frames[0], s.frames[t]));
    for (auto cut : s.cut) CHECK_FALSE(cut);
  }

  SECTION("noise breaks exact equality but stays bounded") {
    ClipSpec noisy = sp;
    noisy.still = true;
    noisy.noise = 0.02;
    auto s = gen_clip<D>(7, noisy);
    CHECK_FALSE(same_values(s.frames[0], s.frames[1]));
  }

  SECTION("cut probability one renews the scene every transition") {
    ClipSpec cuts = sp;
    cuts.cut_prob = 1.0;
    auto s = gen_clip<D>(8, cuts);
    for (auto cut : s.cut) CHECK(cut);
    // scenes are independent, frames differ broadly
    double diff = 0;
    for (size_t i = 0; i < s.frames[0].values().size(); ++i)
      diff += std::abs(s.frames[0].values()[i] - s.frames[1].values()[i]);
    CHECK(diff / (double)s.frames[0].numel() > 0.02);
  }

  SECTION("moving content actually moves") {
    double diff = 0;
    for (size_t i = 0; i < a.frames[0].values().size(); ++i)
      diff += std::abs(a.frames[0].values()[i] - a.frames[1].values()[i]);
    CHECK(diff / (double)a.frames[0].numel() > 1e-4);
  }
}

TEST_CASE("batch assembly stacks clips on the batch axis", "[training]") {
  ClipSpec sp;
  sp.frames = 2;
  sp.height = 16;
  sp.width = 16;
  auto frames = gen_batch<D>(5, 0, 3, sp);
  REQUIRE(frames.size() == 2);
  CHECK(frames[0].shape() == Shape{3, 3, 16, 16});
  // per-sample content matches the per-clip generator
  auto c0 = gen_clip<D>(derive_seed(5, 1, 0), sp);
  auto s0 = slice(frames[0], 0, 0, 1);
  REQUIRE(same_values(s0, c0.frames[0]));
  // a different step yields different data
  auto other = gen_batch<D>(5, 1, 3, sp);
  CHECK_FALSE(same_values(frames[0], other[0]));
}

TEST_CASE("rd loss composes distortion and rate", "[training]") {
  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, 11, tiny_cfg(Transform::SSF, PriorKind::FACTORIZED, false));
  ClipSpec sp;
  sp.frames = 2;
  sp.height = 16;
  sp.width = 16;
  auto frames = gen_batch<D>(6, 0, 1, sp);

  ModCtx mc;
  auto t1 = rd_loss(codec, frames, {1e-3}, mc, 42, 0);
  CHECK(t1.distortion > 0);
  CHECK(t1.rate > 0);
  // rate is weighted by beta * 255^2: matched units with the scaled mse
  CHECK(t1.loss.item() ==
        Catch::Approx(t1.distortion + 1e-3 * 255.0 * 255.0 * t1.rate).epsilon(1e-12));

  // beta scales only the rate term, and doubling it doubles that term exactly
  auto t2 = rd_loss(codec, frames, {2e-3}, mc, 42, 0);
  CHECK(t2.distortion == Catch::Approx(t1.distortion));
  CHECK(t2.rate == Catch::Approx(t1.rate));
  CHECK(t2.loss.item() - t2.distortion ==
        Catch::Approx(2.0 * (t1.loss.item() - t1.distortion)).epsilon(1e-9));

  // deterministic in (seed, step), fresh in step
  auto t3 = rd_loss(codec, frames, {1e-3}, mc, 42, 0);
  CHECK(t3.loss.item() == t1.loss.item());
  auto t4 = rd_loss(codec, frames, {1e-3}, mc, 42, 1);
  CHECK(t4.loss.item() != t1.loss.item());
}

TEST_CASE("short training run reduces the loss", "[training][slow]") {
  ParameterStore<D> ps;
  ModelConfig cfg = tiny_cfg(Transform::SSF, PriorKind::FACTORIZED, false);
  cfg.channels = 16;
  VideoCodec<D> codec(ps, 12, cfg);
  AdamState<D> adam;

  TrainConfig tc;
  tc.steps = 60;
  tc.batch = 2;
  tc.clip.frames = 2;
  tc.clip.height = 32;
  tc.clip.width = 32;
  tc.lr = 3e-4;
  tc.lr_drop_step = 1000000;
  tc.beta = 5e-3;
  tc.seed = 77;

  // reference loss before training, on held-out steps
  double before = 0;
  for (uint64_t s = 1000; s < 1004; ++s) {
    auto frames = gen_batch<D>(derive_seed(tc.seed, 0xDA7A), s, tc.batch, tc.clip);
    before += rd_loss(codec, frames, {tc.beta}, ModCtx{}, derive_seed(tc.seed, 0x401E), s)
                  .loss.item() / 4.0;
  }
  auto res = train(codec, ps, adam, tc);
  REQUIRE(res.steps_run == 60);
  REQUIRE_FALSE(res.diverged);
  double after = 0;
  for (uint64_t s = 1000; s < 1004; ++s) {
    auto frames = gen_batch<D>(derive_seed(tc.seed, 0xDA7A), s, tc.batch, tc.clip);
    after += rd_loss(codec, frames, {tc.beta}, ModCtx{}, derive_seed(tc.seed, 0x401E), s)
                 .loss.item() / 4.0;
  }
  CHECK(after < before * 0.9);
}

TEST_CASE("checkpoint resume is bit exact", "[training]") {
  ModelConfig cfg = tiny_cfg(Transform::SSF, PriorKind::FACTORIZED, false);
  std::string ck = "/tmp/stvc_resume_test.ck";

  TrainConfig tc;
  tc.steps = 8;
  tc.batch = 1;
  tc.clip.frames = 2;
  tc.clip.height = 16;
  tc.clip.width = 16;
  tc.lr = 1e-3;
  tc.seed = 31;

  // single uninterrupted run
  ParameterStore<D> ps_a;
  VideoCodec<D> codec_a(ps_a, 13, cfg);
  AdamState<D> adam_a;
  train(codec_a, ps_a, adam_a, tc);

  // interrupted at step 4, resumed from the checkpoint
  ParameterStore<D> ps_b;
  VideoCodec<D> codec_b(ps_b, 13, cfg);
  AdamState<D> adam_b;
  TrainConfig tc_half = tc;
  tc_half.steps = 4;
  tc_half.ckpt_path = ck;
  train(codec_b, ps_b, adam_b, tc_half);

  ParameterStore<D> ps_c;
  VideoCodec<D> codec_c(ps_c, 13, cfg);
  AdamState<D> adam_c;
  load_checkpoint(ck, ps_c, &adam_c);
  REQUIRE(adam_c.step == 4);
  train(codec_c, ps_c, adam_c, tc);

  for (auto& name : ps_a.names()) {
    CAPTURE(name);
    REQUIRE(same_values(ps_a.at(name), ps_c.at(name)));
  }
  std::remove(ck.c_str());
}

TEST_CASE("csv log is written and resumed without duplicate header", "[training]") {
  ModelConfig cfg = tiny_cfg(Transform::SSF, PriorKind::FACTORIZED, false);
  std::string csv = "/tmp/stvc_csv_test.csv";
  std::string ck = "/tmp/stvc_csv_test.ck";

  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 1;
  tc.clip.frames = 2;
  tc.clip.height = 16;
  tc.clip.width = 16;
  tc.seed = 32;
  tc.log_every = 1;
  tc.csv_path = csv;
  tc.ckpt_path = ck;

  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, 14, cfg);
  AdamState<D> adam;
  train(codec, ps, adam, tc);

  TrainConfig tc2 = tc;
  tc2.steps = 5;
  ParameterStore<D> ps2;
  VideoCodec<D> codec2(ps2, 14, cfg);
  AdamState<D> adam2;
  load_checkpoint(ck, ps2, &adam2);
  train(codec2, ps2, adam2, tc2);

  std::ifstream f(csv);
  REQUIRE(f.good());
  std::string line;
  int headers = 0, rows = 0;
  while (std::getline(f, line)) {
    if (line.rfind("step,", 0) == 0) ++headers;
    else if (!line.empty()) ++rows;
  }
  CHECK(headers == 1);
  CHECK(rows == 5);
  std::remove(csv.c_str());
  std::remove(ck.c_str());
}

TEST_CASE("vbr training samples per-datum rate levels", "[training]") {
  ModelConfig cfg = tiny_cfg(Transform::SSF, PriorKind::FACTORIZED, true);
  cfg.vbr = true;
  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, 15, cfg);
  AdamState<D> adam;

  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 3;
  tc.clip.frames = 2;
  tc.clip.height = 16;
  tc.clip.width = 16;
  tc.seed = 33;

  auto res = train(codec, ps, adam, tc);
  CHECK(res.steps_run == 3);
  CHECK(std::isfinite(res.final_loss));

  // per-sample beta weighting: heavier beta on sample 0 changes the loss
  auto frames = gen_batch<D>(9, 0, 2, tc.clip);
  ModCtx mc;
  mc.active = true;
  mc.levels = {0, 6};
  auto t1 = rd_loss(codec, frames, {1e-2, 1e-4}, mc, 50, 0);
  auto t2 = rd_loss(codec, frames, {1e-4, 1e-2}, mc, 50, 0);
  CHECK(t1.loss.item() != t2.loss.item());
}

TEST_CASE("divergence guard trips on a sustained blowup", "[training]") {
  Rng rng(99);

  SECTION("healthy baseline then plateau of garbage") {
    DivergenceGuard g(10);
    for (int i = 0; i < 200; ++i) g.observe(1.0 + 0.2 * rng.uniform(0.0, 1.0));
    REQUIRE_FALSE(g.tripped());
    int trip_at = -1;
    for (int i = 0; i < 150; ++i) {
      g.observe(5e7 * (1.0 + 0.1 * rng.uniform(0.0, 1.0)));
      if (g.tripped()) {
        trip_at = i;
        break;
      }
    }
    // fires once the patience is met, long before the plateau floods the
    // median pool
    REQUIRE(trip_at == 9);
  }

  SECTION("isolated spikes reset the counter") {
    DivergenceGuard g(5);
    for (int i = 0; i < 100; ++i) {
      g.observe(i % 7 == 3 ? 1e6 : 1.0);
      REQUIRE_FALSE(g.tripped());
    }
  }

  SECTION("slow drift stays under the ratio") {
    DivergenceGuard g(5);
    double loss = 1.0;
    for (int i = 0; i < 400; ++i) {
      g.observe(loss);
      loss *= 1.01;  // 10x every ~230 steps, median keeps pace
    }
    CHECK_FALSE(g.tripped());
  }

  SECTION("no verdict before the warmup history exists") {
    DivergenceGuard g(1);
    for (int i = 0; i < 19; ++i) g.observe(i == 0 ? 1.0 : 1e9);
    CHECK_FALSE(g.tripped());
    g.observe(1e9);  // 20 samples banked, ratio vs median of garbage is ~1
    CHECK_FALSE(g.tripped());
  }
}

TEST_CASE("guard stays quiet across a healthy run", "[training]") {
  // patience 3 is far tighter than the default; batch-to-batch loss noise on
  // a healthy run must never hold >10x the median for even 3 steps
  ModelConfig cfg = tiny_cfg(Transform::SSF, PriorKind::FACTORIZED, false);
  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, 16, cfg);
  AdamState<D> adam;

  TrainConfig tc;
  tc.steps = 40;
  tc.batch = 1;
  tc.clip.frames = 2;
  tc.clip.height = 16;
  tc.clip.width = 16;
  tc.lr = 1e-4;
  tc.seed = 34;
  tc.guard_window = 3;
  auto res = train(codec, ps, adam, tc);
  CHECK_FALSE(res.diverged);
  CHECK(res.steps_run == 40);
}

TEST_CASE("anneal schedule tightens the rate penalty", "[training]") {
  auto s = anneal_schedule();
  REQUIRE(s.size() == 6);
  for (size_t i = 1; i < s.size(); ++i) CHECK(s[i] > s[i - 1]);
  CHECK(s.front() == Catch::Approx(1.5625e-4));
  CHECK(s.back() == Catch::Approx(5e-3));
}
