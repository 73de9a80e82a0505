// raven: command-line harness for the streaming radar perception engine.
//
// Subcommands:
//   gen-data       synthesize seeded train/val datasets with manifests
//   train          fit a model on a dataset, write weights + metrics
//   eval           score a trained model (fixed prefix or early exit)
//   infer          per-frame detections, masks, and exit points as JSON lines
//   calibrate-tau  fit the exit threshold from novelty curves, emit config
//   profile        analytic MAC/parameter report plus wall-clock medians
//   sweep-chirps   metric-vs-chirp-budget curves as CSV
//
// Every run directory receives the fully resolved config and a SHA-256 of the
// weights payload so results are reproducible from the artifacts alone.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "raven/dataset.hpp"
#include "raven/macs.hpp"
#include "raven/sha256.hpp"
#include "raven/version.hpp"

namespace fs = std::filesystem;
using namespace raven;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::string config_path;
  std::string out_override;
  int64_t seed_override = -1;
  std::string variant_override;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "experiment config JSON");
  sub->add_option("--out", o.out_override, "override output directory");
  sub->add_option("--seed", o.seed_override, "override experiment + training seed");
  sub->add_option("--variant", o.variant_override, "override model variant (A..F)")
      ->check(CLI::IsMember({"A", "B", "C", "D", "E", "F"}));
}

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = load_experiment_config(o.config_path);
  if (o.seed_override >= 0) {
    cfg.seed = (uint64_t)o.seed_override;
    cfg.train.seed = (uint64_t)o.seed_override;
  }
  if (!o.variant_override.empty()) cfg.model.variant = o.variant_override[0];
  if (!o.out_override.empty()) cfg.out_dir = o.out_override;
  return cfg;
}

void write_resolved(const ExperimentConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / "config.resolved.json");
  f << json(cfg).dump(2) << "\n";
  if (!f) throw std::runtime_error("cannot write resolved config in " + dir);
}

std::string weights_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out_dir) / "weights.rvwt").string();
}

Params load_model(const ExperimentConfig& cfg) {
  Params P;
  add_model_params(P, cfg.model, cfg.seed);
  P.load(weights_path(cfg));
  return P;
}

Arr probs_of_logits(const Arr& logits) {
  Arr p = logits;
  for (auto& v : p.data) v = 1.0f / (1.0f + std::exp(-v));
  return p;
}

// ---------------------------------------------------------------------------
// Evaluation core, shared by eval / sweep-chirps. Per-frame means so a fixed
// prefix with exit off reproduces the train-time validation numbers exactly.
// ---------------------------------------------------------------------------

struct FrameEval {
  DetOutput det;
  SegOutput seg;
  int l_exit = 0;
  bool exited = false;
  std::vector<double> novelty;
  double mac_ratio = 1.0;  // chirp-dependent MACs used / full
};

FrameEval eval_one(Params& P, const ExperimentConfig& cfg, const AdcFrame& frame, int prefix,
                   const std::string& exit_mode) {
  FrameEval r;
  if (exit_mode == "off") {
    ForwardResult fr = forward_frame(P, cfg.model, frame, prefix);
    r.det = fr.det;
    r.seg = fr.seg;
    r.l_exit = prefix;
    return r;
  }
  ExitConfig ec = cfg.exit;
  ec.rule = (exit_mode == "entropy") ? ExitRule::kEntropy : ExitRule::kCosine;
  ExitOutcome out = run_with_exit(P, cfg.model, frame, ec);
  r.det = out.det;
  r.seg = out.seg;
  r.l_exit = out.l_exit;
  r.exited = out.exited;
  r.novelty = out.d;
  const double full = (double)out.macs_full.chirp_dependent_total();
  r.mac_ratio = full > 0 ? (double)out.macs_used.chirp_dependent_total() / full : 1.0;
  return r;
}

json eval_dataset(Params& P, const ExperimentConfig& cfg, const LoadedDataset& ds, int prefix,
                  const std::string& exit_mode) {
  const TrainConfig& tc = cfg.train;
  const double empty_dist = std::hypot(ds.grid.extent_m, ds.grid.extent_m);
  const int n = (int)ds.samples.size();
  std::vector<FrameEval> fe(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i)
    fe[i] = eval_one(P, cfg, ds.samples[i].frame, prefix, exit_mode);

  double f1 = 0, ap = 0, ar = 0, miou = 0, mdice = 0, mcham = 0, ml = 0, mratio = 0;
  double se = 0, sa = 0;
  int64_t pairs = 0, exited = 0;
  for (int i = 0; i < n; ++i) {
    const FrameLabels& lab = ds.samples[i].labels;
    auto dets = decode_detections(fe[i].det, tc.det_threshold, tc.nms_radius_cells, ds.grid);
    PrMetrics pm = det_pr(dets, lab.centers_xy_m, tc.match_radius_m);
    f1 += pm.f1;
    ap += pm.ap;
    ar += pm.ar;
    se += pm.re_m * pm.tp;
    sa += pm.ae_deg * pm.tp;
    pairs += pm.tp;
    std::vector<PointXY> dp;
    for (const auto& d : dets) dp.push_back({d.x, d.y});
    mcham += chamfer(dp, lab.centers_xy_m, empty_dist).dist;
    Arr probs = probs_of_logits(fe[i].seg.logits);
    miou += iou(probs, lab.seg_mask);
    mdice += dice(probs, lab.seg_mask);
    ml += fe[i].l_exit;
    mratio += fe[i].mac_ratio;
    exited += fe[i].exited;
  }
  json rep;
  rep["n_frames"] = n;
  rep["prefix"] = prefix;
  rep["exit"] = exit_mode;
  if (n > 0) {
    rep["f1"] = f1 / n;
    rep["ap"] = ap / n;
    rep["ar"] = ar / n;
    rep["miou"] = miou / n;
    rep["dice"] = mdice / n;
    rep["chamfer_m"] = mcham / n;
    rep["re_m"] = pairs > 0 ? se / (double)pairs : 0.0;
    rep["ae_deg"] = pairs > 0 ? sa / (double)pairs : 0.0;
    rep["matched_pairs"] = pairs;
    rep["mean_l_exit"] = ml / n;
    if (exit_mode != "off") {
      rep["exit_frac"] = (double)exited / n;
      rep["mac_ratio_chirp_dependent"] = mratio / n;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  const std::string tdir = (fs::path(cfg.data_dir) / "train").string();
  const std::string vdir = (fs::path(cfg.data_dir) / "val").string();
  const std::string tman = gen_dataset(cfg.radar, cfg.grid, cfg.dist, cfg.n_train, cfg.seed, tdir);
  const std::string vman =
      gen_dataset(cfg.radar, cfg.grid, cfg.dist, cfg.n_val, cfg.seed + 1, vdir);
  write_resolved(cfg, cfg.data_dir);
  json out{{"train_manifest", tman}, {"val_manifest", vman},
           {"n_train", cfg.n_train}, {"n_val", cfg.n_val}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_train(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  LoadedDataset tr = load_dataset((fs::path(cfg.data_dir) / "train").string());
  LoadedDataset va = load_dataset((fs::path(cfg.data_dir) / "val").string());
  std::vector<TrainSample> val = va.samples;

  Params P;
  add_model_params(P, cfg.model, cfg.seed);
  write_resolved(cfg, cfg.out_dir);
  std::ofstream mlog(fs::path(cfg.out_dir) / "metrics.jsonl");
  TrainResult res = train(P, cfg.model, cfg.train, tr.samples, val, cfg.grid, &mlog);
  for (const std::string& line : res.log_lines) std::cout << line << "\n";

  P.save(weights_path(cfg));
  const std::string digest = sha256_hex(P.payload_bytes());
  std::ofstream hf(fs::path(cfg.out_dir) / "weights.sha256");
  hf << digest << "\n";
  json out{{"out_dir", cfg.out_dir},
           {"weights", weights_path(cfg)},
           {"weights_sha256", digest},
           {"epochs", cfg.train.epochs},
           {"skipped_steps", res.skipped_steps},
           {"last_loss_det", res.last_loss_det},
           {"last_loss_seg", res.last_loss_seg}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, int prefix, const std::string& exit_mode) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  Params P = load_model(cfg);
  LoadedDataset va = load_dataset((fs::path(cfg.data_dir) / "val").string());
  const int L = prefix > 0 ? prefix : cfg.model.n_c;
  json rep = eval_dataset(P, cfg, va, L, exit_mode);
  std::ostringstream tag;
  tag << "eval_" << exit_mode << "_L" << L << ".json";
  std::ofstream rf(fs::path(cfg.out_dir) / tag.str());
  rf << rep.dump(2) << "\n";
  std::cout << rep.dump(2) << "\n";
  return 0;
}

int cmd_infer(const CommonOpts& o, int prefix, const std::string& exit_mode) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  Params P = load_model(cfg);
  LoadedDataset va = load_dataset((fs::path(cfg.data_dir) / "val").string());
  const int L = prefix > 0 ? prefix : cfg.model.n_c;
  for (size_t i = 0; i < va.samples.size(); ++i) {
    FrameEval fe = eval_one(P, cfg, va.samples[i].frame, L, exit_mode);
    auto dets =
        decode_detections(fe.det, cfg.train.det_threshold, cfg.train.nms_radius_cells, va.grid);
    json dj = json::array();
    for (const auto& d : dets) dj.push_back({{"x", d.x}, {"y", d.y}, {"score", d.score}});
    Arr probs = probs_of_logits(fe.seg.logits);
    std::vector<int> mask(probs.data.size());
    for (size_t k = 0; k < probs.data.size(); ++k) mask[k] = probs.data[k] > kMaskThreshold;
    json row{{"frame", i},
             {"l_exit", fe.l_exit},
             {"exited", fe.exited},
             {"detections", dj},
             {"mask_hw", {va.grid.H, va.grid.W}},
             {"mask", mask}};
    std::cout << row.dump() << "\n";
  }
  return 0;
}

int cmd_calibrate_tau(const CommonOpts& o, int max_frames) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  Params P = load_model(cfg);
  LoadedDataset tr = load_dataset((fs::path(cfg.data_dir) / "train").string());
  const int n = std::min<int>(max_frames, (int)tr.samples.size());

  ExitConfig probe = cfg.exit;
  probe.tau = 0.0;  // disabled: always stream the full frame
  std::vector<std::vector<double>> curves(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i)
    curves[i] = run_with_exit(P, cfg.model, tr.samples[i].frame, probe).d;

  fs::create_directories(cfg.out_dir);
  std::ofstream csv(fs::path(cfg.out_dir) / "novelty.csv");
  csv << "frame_id,L,d_L\n";
  for (int i = 0; i < n; ++i) write_novelty_csv(csv, i, curves[i]);

  CalibratedTau ct = calibrate_tau(curves);
  ExperimentConfig derived = cfg;
  derived.exit.tau = ct.tau;
  std::ofstream cf(fs::path(cfg.out_dir) / "config.calibrated.json");
  cf << json(derived).dump(2) << "\n";

  json out{{"tau", ct.tau},
           {"degenerate", ct.degenerate},
           {"frames", n},
           {"novelty_csv", (fs::path(cfg.out_dir) / "novelty.csv").string()},
           {"calibrated_config", (fs::path(cfg.out_dir) / "config.calibrated.json").string()}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_profile(const CommonOpts& o, int runs) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  Params P;
  add_model_params(P, cfg.model, cfg.seed);

  MacReport mr = count_macs_with_params(cfg.model, cfg.model.n_c);
  json stages = json::array();
  for (const auto& s : mr.stages)
    stages.push_back({{"name", s.name}, {"macs", s.macs}, {"chirp_dependent", s.chirp_dependent}});

  // One deterministic frame for timing.
  SceneSpec scene;
  scene.targets.push_back({8.0, 1.0, 0.3, 1.0, 0.5});
  scene.noise_sigma = 0.01;
  scene.seed = 123;
  AdcFrame frame = synthesize_frame(cfg.radar, scene);

  auto median_ms = [&](auto&& fn) {
    std::vector<double> t(runs);
    for (int i = 0; i < runs; ++i) {
      auto a = std::chrono::steady_clock::now();
      fn();
      auto b = std::chrono::steady_clock::now();
      t[i] = std::chrono::duration<double, std::milli>(b - a).count();
    }
    std::sort(t.begin(), t.end());
    return t[runs / 2];
  };

  const double full_ms = median_ms([&] { (void)forward_frame(P, cfg.model, frame); });
  StreamState st;
  const double stream_frame_ms = median_ms([&] {
    st.reset(cfg.model);
    for (int c = 0; c < cfg.model.n_c; ++c) stream_push_chirp(P, cfg.model, frame, st);
  });
  st.reset(cfg.model);
  for (int c = 0; c < cfg.model.n_c; ++c) stream_push_chirp(P, cfg.model, frame, st);
  const double decode_ms = median_ms([&] { (void)decode_from_states(P, cfg.model, st.Z); });

  json out{{"variant", std::string(1, cfg.model.variant)},
           {"macs",
            {{"stages", stages},
             {"total", mr.total()},
             {"chirp_dependent", mr.chirp_dependent_total()},
             {"chirp_independent", mr.chirp_independent_total()},
             {"param_count", mr.param_count}}},
           {"wallclock_ms",
            {{"runs", runs},
             {"forward_full", full_ms},
             {"stream_frame", stream_frame_ms},
             {"stream_per_chirp", stream_frame_ms / cfg.model.n_c},
             {"decode", decode_ms}}}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_sweep_chirps(const CommonOpts& o, const std::string& levels_csv) {
  ExperimentConfig cfg = resolve_config(o);
  cfg.validate();
  Params P = load_model(cfg);
  LoadedDataset va = load_dataset((fs::path(cfg.data_dir) / "val").string());

  const int lmin = std::max(cfg.model.t_det, cfg.model.t_seg);
  std::vector<int> levels;
  if (!levels_csv.empty()) {
    std::stringstream ss(levels_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) levels.push_back(std::stoi(tok));
  } else {
    for (int L = cfg.exit.K; L <= cfg.model.n_c; L += cfg.exit.K)
      if (L >= lmin) levels.push_back(L);
  }
  for (int L : levels)
    if (L < lmin || L > cfg.model.n_c)
      throw std::runtime_error("sweep-chirps: level " + std::to_string(L) +
                               " outside decodable range");

  // One full streaming pass per frame for the aggregate novelty curve.
  ExitConfig probe = cfg.exit;
  probe.tau = 0.0;
  const int n = (int)va.samples.size();
  std::vector<std::vector<double>> curves(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i)
    curves[i] = run_with_exit(P, cfg.model, va.samples[i].frame, probe).d;

  fs::create_directories(cfg.out_dir);
  const std::string cpath = (fs::path(cfg.out_dir) / "sweep_chirps.csv").string();
  std::ofstream csv(cpath);
  csv << "L,f1,ap,ar,miou,dice,chamfer_m,mean_d_L\n";
  for (int L : levels) {
    json rep = eval_dataset(P, cfg, va, L, "off");
    double md = 0;
    for (const auto& c : curves) md += c[(size_t)L - 1];
    md = n > 0 ? md / n : 0.0;
    csv << L << "," << rep["f1"].get<double>() << "," << rep["ap"].get<double>() << ","
        << rep["ar"].get<double>() << "," << rep["miou"].get<double>() << ","
        << rep["dice"].get<double>() << "," << rep["chamfer_m"].get<double>() << "," << md
        << "\n";
    std::cout << "L=" << L << " f1=" << rep["f1"].get<double>()
              << " miou=" << rep["miou"].get<double>() << " mean_d=" << md << "\n";
  }
  std::cout << cpath << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* tenv = std::getenv("RAVEN_THREADS")) {
    const int t = std::atoi(tenv);
    if (t > 0) omp_set_num_threads(t);
  }

  CLI::App app{std::string("raven ") + version_string() +
               " - streaming FMCW radar perception engine"};
  app.require_subcommand(1);

  CommonOpts o;
  int prefix = -1;
  std::string exit_mode = "off";
  int cal_frames = 64;
  int profile_runs = 100;
  std::string levels_csv;

  CLI::App* s_gen = app.add_subcommand("gen-data", "synthesize seeded datasets");
  add_common(s_gen, o);
  CLI::App* s_train = app.add_subcommand("train", "train a model");
  add_common(s_train, o);
  CLI::App* s_eval = app.add_subcommand("eval", "score a trained model");
  add_common(s_eval, o);
  s_eval->add_option("--prefix", prefix, "decode after this many chirps (default: all)");
  s_eval->add_option("--exit", exit_mode, "early-exit mode")
      ->check(CLI::IsMember({"off", "cosine", "entropy"}));
  CLI::App* s_infer = app.add_subcommand("infer", "per-frame outputs as JSON lines");
  add_common(s_infer, o);
  s_infer->add_option("--prefix", prefix, "decode after this many chirps (default: all)");
  s_infer->add_option("--exit", exit_mode, "early-exit mode")
      ->check(CLI::IsMember({"off", "cosine", "entropy"}));
  CLI::App* s_cal = app.add_subcommand("calibrate-tau", "fit the exit threshold");
  add_common(s_cal, o);
  s_cal->add_option("--frames", cal_frames, "max calibration frames (default 64)");
  CLI::App* s_prof = app.add_subcommand("profile", "MAC report + wall-clock medians");
  add_common(s_prof, o);
  s_prof->add_option("--runs", profile_runs, "timing repetitions (default 100)");
  CLI::App* s_sweep = app.add_subcommand("sweep-chirps", "metric-vs-chirp-budget CSV");
  add_common(s_sweep, o);
  s_sweep->add_option("--levels", levels_csv, "comma-separated chirp budgets");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*s_gen) return cmd_gen_data(o);
    if (*s_train) return cmd_train(o);
    if (*s_eval) return cmd_eval(o, prefix, exit_mode);
    if (*s_infer) return cmd_infer(o, prefix, exit_mode);
    if (*s_cal) return cmd_calibrate_tau(o, cal_frames);
    if (*s_prof) return cmd_profile(o, profile_runs);
    if (*s_sweep) return cmd_sweep_chirps(o, levels_csv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
