// stvc: neural video codec driver.
// Verbs: gen-data, train, compress, decompress, eval, sweep, ablate, diag.
// Each checkpoint travels with a <ckpt>.json sidecar describing the model so
// coding verbs need no architecture flags.

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stvc/bitstream.hpp"
#include "stvc/metrics.hpp"
#include "stvc/models.hpp"
#include "stvc/plot.hpp"
#include "stvc/training.hpp"
#include "stvc/video_io.hpp"

using D = double;
using nlohmann::json;
namespace fs = std::filesystem;
using namespace stvc;

namespace {

// ---- sidecar -------------------------------------------------------------------

struct ModelMeta {
  ModelConfig cfg;
  uint64_t model_seed = 1;
  double beta = 1e-3;  // training rate weight (fixed-rate models)
};

std::string sidecar_path(const std::string& ckpt) { return ckpt + ".json"; }

void save_meta(const std::string& ckpt, const ModelMeta& m) {
  json j;
  j["transform"] = to_string(m.cfg.transform);
  j["prior"] = to_string(m.cfg.prior);
  j["hyperprior"] = m.cfg.hyperprior;
  j["vbr"] = m.cfg.vbr;
  j["vbr_levels"] = m.cfg.vbr_levels;
  j["beta_table"] = m.cfg.beta_table;
  j["channels"] = m.cfg.channels;
  j["hyper_stride"] = m.cfg.hyper_stride;
  j["levels_m"] = m.cfg.levels_m;
  j["sigma0"] = m.cfg.sigma0;
  j["gop"] = m.cfg.gop;
  j["model_seed"] = m.model_seed;
  j["beta"] = m.beta;
  std::ofstream f(sidecar_path(ckpt), std::ios::trunc);
  contract(f.good(), "cannot write sidecar " + sidecar_path(ckpt));
  f << j.dump(2) << "\n";
}

ModelMeta load_meta(const std::string& ckpt) {
  std::ifstream f(sidecar_path(ckpt));
  if (!f.good()) throw DataError("missing model sidecar " + sidecar_path(ckpt));
  json j;
  try {
    f >> j;
    ModelMeta m;
    m.cfg.transform = transform_from(j.at("transform").get<std::string>());
    m.cfg.prior = prior_from(j.at("prior").get<std::string>());
    m.cfg.hyperprior = j.at("hyperprior").get<bool>();
    m.cfg.vbr = j.at("vbr").get<bool>();
    m.cfg.vbr_levels = j.at("vbr_levels").get<int64_t>();
    m.cfg.beta_table = j.at("beta_table").get<std::vector<double>>();
    m.cfg.channels = j.at("channels").get<int64_t>();
    m.cfg.hyper_stride = j.at("hyper_stride").get<int64_t>();
    m.cfg.levels_m = j.at("levels_m").get<int64_t>();
    m.cfg.sigma0 = j.at("sigma0").get<double>();
    m.cfg.gop = j.at("gop").get<int64_t>();
    m.model_seed = j.at("model_seed").get<uint64_t>();
    m.beta = j.at("beta").get<double>();
    m.cfg.validate();
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed sidecar " + sidecar_path(ckpt) + ": " + e.what());
  }
}

std::string model_id(const ModelMeta& m) {
  std::string id = to_string(m.cfg.transform);
  if (m.cfg.prior != PriorKind::FACTORIZED) id += std::string("-") + to_string(m.cfg.prior);
  if (!m.cfg.hyperprior) id += "-nohyper";
  if (m.cfg.vbr) id += "-vbr";
  return id;
}

// ---- shared flag groups --------------------------------------------------------

struct ModelFlags {
  std::string transform = "stat-ssf";
  std::string prior = "sp";
  bool no_hyper = false;
  bool vbr = false;
  int64_t vbr_levels = 7;
  int64_t channels = 32;
  int64_t hyper_stride = 2;
  int64_t levels_m = 1;
  double sigma0 = 1.5;
  int64_t gop = 12;
  uint64_t model_seed = 1;

  void attach(CLI::App* app) {
    app->add_option("--transform", transform, "tat | ssf | stat | stat-ssf")
        ->capture_default_str();
    app->add_option("--prior", prior, "factorized | sp | tp | tp+ | sp-tp+")
        ->capture_default_str();
    app->add_flag("--no-hyper", no_hyper, "drop the hyperprior, code latents factorized");
    app->add_flag("--vbr", vbr, "train one model across the rate ladder");
    app->add_option("--vbr-levels", vbr_levels)->capture_default_str();
    app->add_option("--channels", channels, "latent channels")->capture_default_str();
    app->add_option("--hyper-stride", hyper_stride)->capture_default_str();
    app->add_option("--levels-m", levels_m, "scale-space pyramid depth knob")
        ->capture_default_str();
    app->add_option("--sigma0", sigma0, "base blur of the scale stack")->capture_default_str();
    app->add_option("--gop", gop, "frames per intra period")->capture_default_str();
    app->add_option("--model-seed", model_seed, "weight init seed")->capture_default_str();
  }

  ModelConfig to_config() const {
    ModelConfig cfg;
    cfg.transform = transform_from(transform);
    cfg.prior = prior_from(prior);
    cfg.hyperprior = !no_hyper;
    cfg.vbr = vbr;
    cfg.vbr_levels = vbr_levels;
    if ((int64_t)cfg.beta_table.size() != vbr_levels) {
      cfg.beta_table.clear();
      for (int64_t i = 0; i < vbr_levels; ++i) {
        double f = vbr_levels == 1 ? 0.0 : (double)i / (double)(vbr_levels - 1);
        cfg.beta_table.push_back(std::exp(std::log(1e-2) + f * (std::log(1e-4) - std::log(1e-2))));
      }
    }
    cfg.channels = channels;
    cfg.hyper_stride = hyper_stride;
    cfg.levels_m = levels_m;
    cfg.sigma0 = sigma0;
    cfg.gop = gop;
    cfg.validate();
    return cfg;
  }
};

struct ClipFlags {
  int64_t frames = 4, height = 64, width = 64;
  int sprites = 4;
  double speed = 2.0, bg_speed = 1.0, noise = 0.0, cut_prob = 0.0;
  bool still = false;

  void attach(CLI::App* app) {
    app->add_option("--frames", frames)->capture_default_str();
    app->add_option("--height", height)->capture_default_str();
    app->add_option("--width", width)->capture_default_str();
    app->add_option("--sprites", sprites, "max moving sprites per scene")->capture_default_str();
    app->add_option("--speed", speed, "max sprite speed, px/frame")->capture_default_str();
    app->add_option("--bg-speed", bg_speed, "max background pan, px/frame")
        ->capture_default_str();
    app->add_option("--noise", noise, "additive pixel noise stdev")->capture_default_str();
    app->add_option("--cut-prob", cut_prob, "scene cut probability per transition")
        ->capture_default_str();
    app->add_flag("--still", still, "freeze all motion");
  }

  ClipSpec to_spec() const {
    ClipSpec s;
    s.frames = frames;
    s.height = height;
    s.width = width;
    s.max_sprites = sprites;
    s.max_speed = speed;
    s.max_bg_speed = bg_speed;
    s.noise = noise;
    s.cut_prob = cut_prob;
    s.still = still;
    return s;
  }
};

// ---- small helpers -------------------------------------------------------------

std::vector<Tensor<D>> split_frames(const Tensor<D>& clip) {
  std::vector<Tensor<D>> out;
  for (int64_t t = 0; t < clip.shape()[0]; ++t)
    out.push_back(reshape(slice(clip, 0, t, t + 1),
                          {1, 3, clip.shape()[2], clip.shape()[3]}));
  return out;
}

Tensor<D> join_frames(const std::vector<Tensor<D>>& frames) {
  return frames.size() == 1 ? frames[0] : concat(frames, 0);
}

struct LoadedModel {
  ModelMeta meta;
  ParameterStore<D> ps;
  std::unique_ptr<VideoCodec<D>> codec;
  uint64_t hash = 0;
};

LoadedModel load_model(const std::string& ckpt) {
  LoadedModel m;
  m.meta = load_meta(ckpt);
  m.codec = std::make_unique<VideoCodec<D>>(m.ps, m.meta.model_seed, m.meta.cfg);
  load_checkpoint(ckpt, m.ps, static_cast<AdamState<D>*>(nullptr));
  m.hash = store_hash(m.ps);
  return m;
}

void append_csv_row(const std::string& path, const std::string& header,
                    const std::string& row) {
  bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  contract(f.good(), "cannot open csv " + path);
  if (fresh) f << header << "\n";
  f << row << "\n";
}

struct EvalRow {
  std::string model;
  double quality = 0, bpp = 0, psnr_db = 0;
};

EvalRow eval_stream(const LoadedModel& m, const Tensor<D>& orig,
                    const std::vector<uint8_t>& stream) {
  auto dec = decode_video(*m.codec, m.hash, stream.data(), stream.size());
  auto recon = join_frames(dec.frames);
  EvalRow row;
  row.model = model_id(m.meta);
  row.quality = m.meta.cfg.vbr ? (double)dec.header.level : m.meta.beta;
  row.bpp = bpp_of(stream.size(), dec.header.frames, dec.header.height, dec.header.width);
  row.psnr_db = psnr(orig, recon);
  return row;
}

std::string fmt_row(const EvalRow& r) {
  char b[160];
  std::snprintf(b, sizeof b, "%s,%.6g,%.6g,%.4f", r.model.c_str(), r.quality, r.bpp, r.psnr_db);
  return b;
}

constexpr const char* kRdHeader = "model,quality,bpp,psnr";

// grayscale [1,1,H,W] or [1,C,H,W] mean -> rgb frame normalized to full range
Tensor<D> to_gray_rgb(const Tensor<D>& t) {
  int64_t c = t.shape()[1], h = t.shape()[2], w = t.shape()[3];
  auto out = Tensor<D>::zeros({3, h, w});
  const auto& v = t.values();
  double lo = 1e300, hi = -1e300;
  std::vector<double> mean((size_t)(h * w), 0.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < h * w; ++i) mean[(size_t)i] += (double)v[(size_t)(ch * h * w + i)] / (double)c;
  for (double x : mean) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  double span = hi > lo ? hi - lo : 1.0;
  for (int64_t ch = 0; ch < 3; ++ch)
    for (int64_t i = 0; i < h * w; ++i)
      out.values()[(size_t)(ch * h * w + i)] = (D)((mean[(size_t)i] - lo) / span);
  return out;
}

// flow field [1,3,H,W] (dx, dy, scale) -> rgb: x/y displacement in R/G around
// mid gray, scale coordinate in B
Tensor<D> flow_rgb(const Tensor<D>& f, double scale_span) {
  int64_t h = f.shape()[2], w = f.shape()[3];
  const auto& v = f.values();
  double mag = 1e-9;
  for (int64_t i = 0; i < 2 * h * w; ++i) mag = std::max(mag, std::fabs((double)v[(size_t)i]));
  auto out = Tensor<D>::zeros({3, h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    out.values()[(size_t)i] = (D)(0.5 + 0.5 * (double)v[(size_t)i] / mag);
    out.values()[(size_t)(h * w + i)] = (D)(0.5 + 0.5 * (double)v[(size_t)(h * w + i)] / mag);
    out.values()[(size_t)(2 * h * w + i)] = (D)((double)v[(size_t)(2 * h * w + i)] / scale_span);
  }
  return out;
}

// ---- train helper shared by `train` and `ablate` ---------------------------------

struct TrainJob {
  ModelMeta meta;
  TrainConfig tc;
  bool anneal = false;
  bool fresh_only = false;  // ablate always starts clean
};

TrainResult run_train(const TrainJob& job) {
  ParameterStore<D> ps;
  VideoCodec<D> codec(ps, job.meta.model_seed, job.meta.cfg);
  AdamState<D> adam;
  if (!job.fresh_only && fs::exists(job.tc.ckpt_path)) {
    auto prev = load_meta(job.tc.ckpt_path);
    contract(config_equal(prev.cfg, job.meta.cfg),
             "checkpoint " + job.tc.ckpt_path + " was trained with a different model");
    load_checkpoint(job.tc.ckpt_path, ps, &adam);
    std::fprintf(stderr, "resuming %s at step %lld\n", job.tc.ckpt_path.c_str(),
                 (long long)adam.step);
  }
  save_meta(job.tc.ckpt_path, job.meta);

  TrainResult res;
  if (job.anneal && !job.meta.cfg.vbr) {
    auto ladder = anneal_schedule();
    int64_t per = std::max<int64_t>(1, job.tc.steps / (int64_t)ladder.size());
    TrainConfig tc = job.tc;
    for (size_t k = 0; k < ladder.size(); ++k) {
      tc.beta = ladder[k];
      tc.steps = k + 1 == ladder.size() ? job.tc.steps : (int64_t)(k + 1) * per;
      if (adam.step >= tc.steps) continue;  // resume skips finished stages
      std::fprintf(stderr, "anneal stage %zu/%zu: beta %.6g until step %lld\n", k + 1,
                   ladder.size(), tc.beta, (long long)tc.steps);
      res = train(codec, ps, adam, tc);
      if (res.diverged) break;
    }
  } else {
    res = train(codec, ps, adam, job.tc);
  }
  if (res.diverged)
    std::fprintf(stderr, "run aborted by the divergence guard at step %lld\n",
                 (long long)adam.step);
  return res;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stochastic temporal video codec toolkit"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "synthesize a clip to a raw RGB video file");
  ClipFlags gen_clipf;
  gen_clipf.attach(gen);
  std::string gen_out, gen_ppm_dir;
  uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output .rgbv path")->required();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--ppm-dir", gen_ppm_dir, "also dump numbered PPM frames here");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model on synthetic clips");
  ModelFlags tr_model;
  tr_model.attach(tr);
  ClipFlags tr_clip;
  tr_clip.frames = 4;
  tr_clip.attach(tr);
  TrainConfig tr_tc;
  bool tr_anneal = false, tr_verbose = false;
  tr->add_option("--steps", tr_tc.steps)->capture_default_str();
  tr->add_option("--batch", tr_tc.batch)->capture_default_str();
  tr->add_option("--lr", tr_tc.lr)->capture_default_str();
  tr->add_option("--lr-drop", tr_tc.lr_drop_step, "step where lr drops 10x")
      ->capture_default_str();
  tr->add_option("--beta", tr_tc.beta, "rate weight (fixed-rate models)")->capture_default_str();
  tr->add_option("--seed", tr_tc.seed, "data/noise seed")->capture_default_str();
  tr->add_option("--csv", tr_tc.csv_path, "training log");
  tr->add_option("--ckpt", tr_tc.ckpt_path, "checkpoint path")->required();
  tr->add_option("--ckpt-every", tr_tc.ckpt_every)->capture_default_str();
  tr->add_option("--log-every", tr_tc.log_every)->capture_default_str();
  tr->add_option("--guard", tr_tc.guard_window, "divergence guard patience")
      ->capture_default_str();
  tr->add_flag("--anneal", tr_anneal, "walk the beta ladder low-to-high rate penalty");
  tr->add_flag("--verbose", tr_verbose, "per-step stderr log");

  // ---- compress ----
  auto* co = app.add_subcommand("compress", "encode a raw RGB video to a coded stream");
  std::string co_ckpt, co_in, co_out;
  int64_t co_level = 0;
  co->add_option("--ckpt", co_ckpt)->required();
  co->add_option("--in", co_in, "input .rgbv")->required();
  co->add_option("--out", co_out, "output stream")->required();
  co->add_option("--level", co_level, "rate level (vbr models)")->capture_default_str();

  // ---- decompress ----
  auto* de = app.add_subcommand("decompress", "decode a coded stream back to raw RGB video");
  std::string de_ckpt, de_in, de_out;
  de->add_option("--in", de_in, "input stream")->required();
  de->add_option("--ckpt", de_ckpt)->required();
  de->add_option("--out", de_out, "output .rgbv")->required();

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "report bpp and PSNR of a coded stream");
  std::string ev_orig, ev_stream, ev_ckpt, ev_csv;
  ev->add_option("--orig", ev_orig, "original .rgbv")->required();
  ev->add_option("--stream", ev_stream)->required();
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--csv", ev_csv, "append the row to this csv");

  // ---- sweep ----
  auto* sw = app.add_subcommand("sweep", "rate-distortion sweep over checkpoints");
  std::vector<std::string> sw_ckpts;
  std::string sw_in, sw_csv, sw_svg;
  sw->add_option("--ckpts", sw_ckpts, "checkpoints to sweep")->required()->delimiter(',');
  sw->add_option("--in", sw_in, "evaluation clip .rgbv")->required();
  sw->add_option("--csv", sw_csv, "output csv")->required();
  sw->add_option("--svg", sw_svg, "optional R-D plot");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "train and compare a matched model pair");
  std::string ab_suite, ab_dir = "ablation";
  int64_t ab_steps = 8000, ab_eval_frames = 8, ab_size = 64;
  uint64_t ab_seed = 1;
  std::vector<double> ab_betas{2e-3, 5e-4};
  int64_t ab_channels = 32, ab_batch = 8;
  ab->add_option("--suite", ab_suite, "empty to list suites");
  ab->add_option("--out-dir", ab_dir)->capture_default_str();
  ab->add_option("--steps", ab_steps)->capture_default_str();
  ab->add_option("--betas", ab_betas, "rate weights to train at")
      ->delimiter(',')
      ->capture_default_str();
  ab->add_option("--channels", ab_channels)->capture_default_str();
  ab->add_option("--batch", ab_batch)->capture_default_str();
  ab->add_option("--size", ab_size, "train/eval crop size")->capture_default_str();
  ab->add_option("--eval-frames", ab_eval_frames)->capture_default_str();
  ab->add_option("--seed", ab_seed)->capture_default_str();

  // ---- diag ----
  auto* dg = app.add_subcommand("diag", "whiteness report and visual dumps");
  std::string dg_ckpt, dg_in, dg_dump;
  ClipFlags dg_clip;
  dg_clip.frames = 6;
  dg_clip.attach(dg);
  uint64_t dg_seed = 1;
  int64_t dg_frame = 1, dg_level = 0;
  dg->add_option("--ckpt", dg_ckpt)->required();
  dg->add_option("--in", dg_in, "clip .rgbv (default: synthesize from --seed)");
  dg->add_option("--seed", dg_seed)->capture_default_str();
  dg->add_option("--dump-dir", dg_dump, "write recon/pred/resid/sigma/flow PPMs here");
  dg->add_option("--frame", dg_frame, "p-frame index for the dumps")->capture_default_str();
  dg->add_option("--level", dg_level, "rate level (vbr models)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto clip = gen_clip<D>(gen_seed, gen_clipf.to_spec());
      auto video = join_frames(clip.frames);
      save_video(gen_out, video);
      std::printf("wrote %s: %lld frames %lldx%lld\n", gen_out.c_str(),
                  (long long)video.shape()[0], (long long)video.shape()[3],
                  (long long)video.shape()[2]);
      if (!gen_ppm_dir.empty()) {
        fs::create_directories(gen_ppm_dir);
        for (int64_t t = 0; t < video.shape()[0]; ++t) {
          char name[32];
          std::snprintf(name, sizeof name, "/frame_%04lld.ppm", (long long)t);
          save_ppm(gen_ppm_dir + name, clip_frame(video, t));
        }
      }
    }

    if (tr->parsed()) {
      TrainJob job;
      job.meta.cfg = tr_model.to_config();
      job.meta.model_seed = tr_model.model_seed;
      job.meta.beta = tr_tc.beta;
      job.tc = tr_tc;
      job.tc.clip = tr_clip.to_spec();
      job.tc.verbose = tr_verbose;
      job.anneal = tr_anneal;
      auto res = run_train(job);
      std::printf("trained %s: steps %lld loss %.4f distortion %.4f bpp %.4f%s\n",
                  job.tc.ckpt_path.c_str(), (long long)res.steps_run, res.final_loss,
                  res.final_distortion, res.final_rate, res.diverged ? " [diverged]" : "");
      return res.diverged ? 2 : 0;
    }

    if (co->parsed()) {
      auto m = load_model(co_ckpt);
      auto video = load_video<D>(co_in);
      auto enc = encode_video(*m.codec, m.hash, split_frames(video), (uint8_t)co_level);
      write_file(co_out, enc.bytes);
      std::printf("%s: %zu bytes, %.4f bpp (model estimate %.4f)\n", co_out.c_str(),
                  enc.bytes.size(),
                  bpp_of(enc.bytes.size(), video.shape()[0], video.shape()[2], video.shape()[3]),
                  enc.analytic_bits /
                      (double)(video.shape()[0] * video.shape()[2] * video.shape()[3]));
    }

    if (de->parsed()) {
      auto m = load_model(de_ckpt);
      auto bytes = read_file(de_in);
      auto dec = decode_video(*m.codec, m.hash, bytes.data(), bytes.size());
      save_video(de_out, join_frames(dec.frames));
      std::printf("wrote %s: %u frames %ux%u\n", de_out.c_str(), dec.header.frames,
                  dec.header.width, dec.header.height);
    }

    if (ev->parsed()) {
      auto m = load_model(ev_ckpt);
      auto orig = load_video<D>(ev_orig);
      auto row = eval_stream(m, orig, read_file(ev_stream));
      std::printf("%s\n%s\n", kRdHeader, fmt_row(row).c_str());
      if (!ev_csv.empty()) append_csv_row(ev_csv, kRdHeader, fmt_row(row));
    }

    if (sw->parsed()) {
      auto orig = load_video<D>(sw_in);
      auto frames = split_frames(orig);
      std::ofstream csv(sw_csv, std::ios::trunc);
      contract(csv.good(), "cannot open csv " + sw_csv);
      csv << kRdHeader << "\n";
      std::map<std::string, PlotSeries> series;
      for (const auto& ck : sw_ckpts) {
        if (!fs::exists(ck)) {
          std::fprintf(stderr, "warning: missing checkpoint %s, skipped\n", ck.c_str());
          continue;
        }
        auto m = load_model(ck);
        int64_t levels = m.meta.cfg.vbr ? m.meta.cfg.vbr_levels : 1;
        for (int64_t lvl = 0; lvl < levels; ++lvl) {
          auto enc = encode_video(*m.codec, m.hash, frames, (uint8_t)lvl);
          auto row = eval_stream(m, orig, enc.bytes);
          csv << fmt_row(row) << "\n";
          auto& s = series[row.model];
          s.label = row.model;
          s.pts.push_back({row.bpp, row.psnr_db});
        }
        std::fprintf(stderr, "swept %s\n", ck.c_str());
      }
      csv.flush();
      contract(csv.good(), "short write to " + sw_csv);
      if (!sw_svg.empty() && !series.empty()) {
        std::vector<PlotSeries> all;
        for (auto& [k, v] : series) all.push_back(v);
        write_svg_plot(sw_svg, "rate-distortion", "bpp", "psnr [dB]", all);
      }
      std::printf("wrote %s\n", sw_csv.c_str());
    }

    if (ab->parsed()) {
      struct Arm {
        std::string name;
        ModelConfig cfg;
      };
      auto base = [&](Transform t, PriorKind p) {
        ModelConfig c;
        c.transform = t;
        c.prior = p;
        c.channels = ab_channels;
        return c;
      };
      std::map<std::string, std::vector<Arm>> suites;
      suites["scale-transform"] = {{"ssf", base(Transform::SSF, PriorKind::FACTORIZED)},
                                   {"stat-ssf", base(Transform::STAT_SSF, PriorKind::FACTORIZED)}};
      suites["SP"] = {{"ssf", base(Transform::SSF, PriorKind::FACTORIZED)},
                      {"ssf-sp", base(Transform::SSF, PriorKind::SP)}};
      suites["TP-vs-TP+"] = {{"ssf-tp", base(Transform::SSF, PriorKind::TP)},
                             {"ssf-tp+", base(Transform::SSF, PriorKind::TP_PLUS)}};
      {
        ModelConfig v = base(Transform::SSF, PriorKind::FACTORIZED);
        v.vbr = true;
        v.vbr_levels = (int64_t)ab_betas.size();
        v.beta_table = ab_betas;
        std::sort(v.beta_table.begin(), v.beta_table.end(), std::greater<>());
        suites["VBR-vs-fixed"] = {{"ssf", base(Transform::SSF, PriorKind::FACTORIZED)},
                                  {"ssf-vbr", v}};
      }
      {
        ModelConfig deep = base(Transform::STAT_SSF, PriorKind::FACTORIZED);
        deep.levels_m = 3;
        ModelConfig flat = deep;
        flat.levels_m = 1;
        suites["pyramid-vs-blur"] = {{"pyramid-m3", deep}, {"blur-m1", flat}};
      }

      if (ab_suite.empty() || !suites.count(ab_suite)) {
        std::printf("available suites:\n");
        for (auto& [k, v] : suites)
          std::printf("  %-16s %s vs %s\n", k.c_str(), v[0].name.c_str(), v[1].name.c_str());
        return ab_suite.empty() ? 0 : 1;
      }

      fs::create_directories(ab_dir);
      ClipSpec cspec;
      cspec.frames = 4;
      cspec.height = ab_size;
      cspec.width = ab_size;
      ClipSpec espec = cspec;
      espec.frames = ab_eval_frames;
      auto eval_clip = join_frames(gen_clip<D>(derive_seed(ab_seed, 0xE7A1), espec).frames);
      auto eval_frames = split_frames(eval_clip);

      std::string csv_path = ab_dir + "/" + ab_suite + ".csv";
      std::ofstream csv(csv_path, std::ios::trunc);
      contract(csv.good(), "cannot open csv " + csv_path);
      csv << "suite,model,beta,bpp,psnr\n";
      for (const auto& arm : suites[ab_suite]) {
        std::vector<double> arm_betas = arm.cfg.vbr ? std::vector<double>{0.0} : ab_betas;
        for (double beta : arm_betas) {
          TrainJob job;
          job.meta.cfg = arm.cfg;
          job.meta.model_seed = derive_seed(ab_seed, fnv1a64(arm.name.c_str()));
          job.meta.beta = beta;
          job.fresh_only = true;
          job.tc.steps = ab_steps;
          job.tc.batch = ab_batch;
          job.tc.clip = cspec;
          job.tc.beta = beta;
          job.tc.seed = ab_seed;  // matched data/noise streams across arms
          job.tc.lr_drop_step = ab_steps * 5 / 6;
          char ck[512];
          std::snprintf(ck, sizeof ck, "%s/%s_%s_b%.6g.ck", ab_dir.c_str(), ab_suite.c_str(),
                        arm.name.c_str(), beta);
          job.tc.ckpt_path = ck;
          job.tc.csv_path = std::string(ck) + ".log.csv";
          std::fprintf(stderr, "training arm %s beta %.6g (%lld steps)\n", arm.name.c_str(),
                       beta, (long long)ab_steps);
          auto res = run_train(job);
          if (res.diverged) std::fprintf(stderr, "arm %s diverged, row skipped\n", arm.name.c_str());

          auto m = load_model(ck);
          int64_t levels = arm.cfg.vbr ? arm.cfg.vbr_levels : 1;
          for (int64_t lvl = 0; lvl < levels; ++lvl) {
            auto enc = encode_video(*m.codec, m.hash, eval_frames, (uint8_t)lvl);
            auto row = eval_stream(m, eval_clip, enc.bytes);
            double b = arm.cfg.vbr ? arm.cfg.beta_table[(size_t)lvl] : beta;
            char line[256];
            std::snprintf(line, sizeof line, "%s,%s,%.6g,%.6g,%.4f", ab_suite.c_str(),
                          arm.name.c_str(), b, row.bpp, row.psnr_db);
            csv << line << "\n";
          }
        }
      }
      csv.flush();
      contract(csv.good(), "short write to " + csv_path);
      std::printf("wrote %s\n", csv_path.c_str());
    }

    if (dg->parsed()) {
      auto m = load_model(dg_ckpt);
      Tensor<D> video = dg_in.empty()
                            ? join_frames(gen_clip<D>(dg_seed, dg_clip.to_spec()).frames)
                            : load_video<D>(dg_in);
      ModCtx mc;
      if (m.meta.cfg.vbr) {
        contract(dg_level < m.meta.cfg.vbr_levels, "diag: rate level out of range");
        mc.active = true;
        mc.levels = {dg_level};
      }

      auto rep = whiteness_diag(*m.codec, video, mc);
      std::printf("whiteness report (%s)\n", model_id(m.meta).c_str());
      std::printf("  lag-1 temporal corr   input % .5f   residual % .5f   reduction %5.1f%%\n",
                  rep.lag1_input, rep.lag1_resid,
                  100.0 * (1.0 - std::fabs(rep.lag1_resid) / std::max(1e-12, std::fabs(rep.lag1_input))));
      for (size_t d = 0; d < rep.spatial_input.size(); ++d)
        std::printf("  spatial corr offset %zu input % .5f   residual % .5f\n", d + 1,
                    rep.spatial_input[d], rep.spatial_resid[d]);

      if (!dg_dump.empty()) {
        contract(dg_frame >= 1 && dg_frame < video.shape()[0], "diag: --frame out of range");
        fs::create_directories(dg_dump);
        auto frames = split_frames(video);
        auto ic = m.codec->iframe_encode(frames[0], mc);
        CodecState<D> st{ic.recon, {}, 2};
        VideoCodec<D>::PFrameCoded pc;
        for (int64_t t = 1; t <= dg_frame; ++t) {
          pc = m.codec->pframe_encode(frames[(size_t)t], st, mc);
          st = CodecState<D>{pc.synth.recon, pc.v, st.t + 1};
        }
        auto strip3 = [](const Tensor<D>& t) {
          return reshape(t, {t.shape()[1], t.shape()[2], t.shape()[3]});
        };
        save_ppm(dg_dump + "/input.ppm", clip_frame(video, dg_frame));
        save_ppm(dg_dump + "/recon.ppm", strip3(pc.synth.recon));
        save_ppm(dg_dump + "/prediction.ppm", strip3(pc.synth.pred));
        auto resid = sub(frames[(size_t)dg_frame], pc.synth.pred).detach();
        for (D& v : resid.values()) v = (D)std::clamp(0.5 + 2.0 * (double)v, 0.0, 1.0);
        save_ppm(dg_dump + "/residual.ppm", strip3(resid));
        if (pc.synth.field)
          save_ppm(dg_dump + "/flow.ppm",
                   flow_rgb(*pc.synth.field, (double)(m.meta.cfg.levels_m + 1)));
        if (pc.synth.sigma) save_ppm(dg_dump + "/sigma.ppm", to_gray_rgb(*pc.synth.sigma));
        std::printf("dumps written to %s\n", dg_dump.c_str());
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
