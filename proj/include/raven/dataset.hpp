#pragma once

// Experiment configuration (JSON in/out), the synthetic scene distribution,
// and dataset generation/loading: seeded frames on disk plus a manifest that
// records every scene truth.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raven/early_exit.hpp"
#include "raven/sim.hpp"
#include "raven/training.hpp"

namespace raven {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Scene distribution
// ---------------------------------------------------------------------------

struct SceneDistribution {
  int min_targets = 1;
  int max_targets = 3;
  double r_min_m = 2.0;
  double r_max_m = 14.0;
  double v_min_mps = -3.0;
  double v_max_mps = 3.0;
  double theta_min_rad = -0.9;
  double theta_max_rad = 0.9;
  double amp_min = 0.8;
  double amp_max = 1.2;
  double snr_db_min = 15.0;
  double snr_db_max = 30.0;
};

// Per-sample SNR relative to a unit-amplitude return: a target contributes a
// complex sample of power amp^2, the noise adds sigma^2 per I/Q component.
inline double snr_to_noise_sigma(double snr_db) {
  return 1.0 / std::sqrt(2.0 * std::pow(10.0, snr_db / 10.0));
}

inline SceneSpec draw_scene(const SceneDistribution& d, Rng& rng) {
  if (d.max_targets < d.min_targets || d.min_targets < 0)
    throw std::runtime_error("SceneDistribution: bad target count range");
  SceneSpec s;
  const int n = d.min_targets + (int)rng.below((uint64_t)(d.max_targets - d.min_targets + 1));
  for (int i = 0; i < n; ++i) {
    Target t;
    t.r = rng.uniform(d.r_min_m, d.r_max_m);
    t.v = rng.uniform(d.v_min_mps, d.v_max_mps);
    t.theta_rad = rng.uniform(d.theta_min_rad, d.theta_max_rad);
    t.amp = rng.uniform(d.amp_min, d.amp_max);
    t.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    s.targets.push_back(t);
  }
  s.noise_sigma = snr_to_noise_sigma(rng.uniform(d.snr_db_min, d.snr_db_max));
  s.seed = rng.fork_seed();
  return s;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization. Readers accept partial objects and keep defaults
// for missing keys.
// ---------------------------------------------------------------------------

inline void to_json(json& j, const RadarConfig& c) {
  j = json{{"n_chirps", c.n_chirps},
           {"n_samples", c.n_samples},
           {"n_tx", c.n_tx},
           {"n_rx", c.n_rx},
           {"bandwidth_hz", c.bandwidth_hz},
           {"chirp_dur_s", c.chirp_dur_s},
           {"sample_period_s", c.sample_period_s},
           {"chirp_interval_s", c.chirp_interval_s},
           {"carrier_hz", c.carrier_hz},
           {"spacing_m", c.spacing_m}};
}
inline void from_json(const json& j, RadarConfig& c) {
  c.n_chirps = j.value("n_chirps", c.n_chirps);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.n_tx = j.value("n_tx", c.n_tx);
  c.n_rx = j.value("n_rx", c.n_rx);
  c.bandwidth_hz = j.value("bandwidth_hz", c.bandwidth_hz);
  c.chirp_dur_s = j.value("chirp_dur_s", c.chirp_dur_s);
  c.sample_period_s = j.value("sample_period_s", c.sample_period_s);
  c.chirp_interval_s = j.value("chirp_interval_s", c.chirp_interval_s);
  c.carrier_hz = j.value("carrier_hz", c.carrier_hz);
  c.spacing_m = j.value("spacing_m", c.spacing_m);
}

inline void to_json(json& j, const GridSpec& g) {
  j = json{{"H", g.H},
           {"W", g.W},
           {"extent_m", g.extent_m},
           {"blob_sigma_cells", g.blob_sigma_cells},
           {"seg_radius_cells", g.seg_radius_cells}};
}
inline void from_json(const json& j, GridSpec& g) {
  g.H = j.value("H", g.H);
  g.W = j.value("W", g.W);
  g.extent_m = j.value("extent_m", g.extent_m);
  g.blob_sigma_cells = j.value("blob_sigma_cells", g.blob_sigma_cells);
  g.seg_radius_cells = j.value("seg_radius_cells", g.seg_radius_cells);
}

inline void to_json(json& j, const SceneDistribution& d) {
  j = json{{"min_targets", d.min_targets},   {"max_targets", d.max_targets},
           {"r_min_m", d.r_min_m},           {"r_max_m", d.r_max_m},
           {"v_min_mps", d.v_min_mps},       {"v_max_mps", d.v_max_mps},
           {"theta_min_rad", d.theta_min_rad}, {"theta_max_rad", d.theta_max_rad},
           {"amp_min", d.amp_min},           {"amp_max", d.amp_max},
           {"snr_db_min", d.snr_db_min},     {"snr_db_max", d.snr_db_max}};
}
inline void from_json(const json& j, SceneDistribution& d) {
  d.min_targets = j.value("min_targets", d.min_targets);
  d.max_targets = j.value("max_targets", d.max_targets);
  d.r_min_m = j.value("r_min_m", d.r_min_m);
  d.r_max_m = j.value("r_max_m", d.r_max_m);
  d.v_min_mps = j.value("v_min_mps", d.v_min_mps);
  d.v_max_mps = j.value("v_max_mps", d.v_max_mps);
  d.theta_min_rad = j.value("theta_min_rad", d.theta_min_rad);
  d.theta_max_rad = j.value("theta_max_rad", d.theta_max_rad);
  d.amp_min = j.value("amp_min", d.amp_min);
  d.amp_max = j.value("amp_max", d.amp_max);
  d.snr_db_min = j.value("snr_db_min", d.snr_db_min);
  d.snr_db_max = j.value("snr_db_max", d.snr_db_max);
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_rx", c.n_rx},       {"n_tx", c.n_tx},
           {"n_c", c.n_c},         {"n_s", c.n_s},
           {"variant", std::string(1, c.variant)},
           {"mix_uniform_mode", c.mix_uniform_mode},
           {"k_tok", c.k_tok},     {"d", c.d},
           {"heads", c.heads},     {"ffn_mult", c.ffn_mult},
           {"ssm_n", c.ssm_n},     {"ssm_k", c.ssm_k},
           {"ssm_e", c.ssm_e},     {"D", c.D},
           {"H", c.H},             {"W", c.W},
           {"t_det", c.t_det},     {"t_seg", c.t_seg},
           {"dec_ch", c.dec_ch}};
}
inline void from_json(const json& j, ModelConfig& c) {
  c.n_rx = j.value("n_rx", c.n_rx);
  c.n_tx = j.value("n_tx", c.n_tx);
  c.n_c = j.value("n_c", c.n_c);
  c.n_s = j.value("n_s", c.n_s);
  const std::string v = j.value("variant", std::string(1, c.variant));
  if (v.size() != 1) throw std::runtime_error("ModelConfig: variant must be one letter");
  c.variant = v[0];
  c.mix_uniform_mode = j.value("mix_uniform_mode", c.mix_uniform_mode);
  c.k_tok = j.value("k_tok", c.k_tok);
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.ssm_n = j.value("ssm_n", c.ssm_n);
  c.ssm_k = j.value("ssm_k", c.ssm_k);
  c.ssm_e = j.value("ssm_e", c.ssm_e);
  c.D = j.value("D", c.D);
  c.H = j.value("H", c.H);
  c.W = j.value("W", c.W);
  c.t_det = j.value("t_det", c.t_det);
  c.t_seg = j.value("t_seg", c.t_seg);
  c.dec_ch = j.value("dec_ch", c.dec_ch);
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"prefix_set", c.prefix_set},
           {"focal_alpha", c.focal_alpha},
           {"focal_gamma", c.focal_gamma},
           {"smooth_l1_beta", c.smooth_l1_beta},
           {"w_det", c.w_det},
           {"w_seg", c.w_seg},
           {"prefix_supervision", c.prefix_supervision},
           {"seed", c.seed},
           {"det_threshold", c.det_threshold},
           {"nms_radius_cells", c.nms_radius_cells},
           {"match_radius_m", c.match_radius_m}};
}
inline void from_json(const json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.prefix_set = j.value("prefix_set", c.prefix_set);
  c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.smooth_l1_beta = j.value("smooth_l1_beta", c.smooth_l1_beta);
  c.w_det = j.value("w_det", c.w_det);
  c.w_seg = j.value("w_seg", c.w_seg);
  c.prefix_supervision = j.value("prefix_supervision", c.prefix_supervision);
  c.seed = j.value("seed", c.seed);
  c.det_threshold = j.value("det_threshold", c.det_threshold);
  c.nms_radius_cells = j.value("nms_radius_cells", c.nms_radius_cells);
  c.match_radius_m = j.value("match_radius_m", c.match_radius_m);
}

inline void to_json(json& j, const ExitConfig& c) {
  j = json{{"tau", c.tau},
           {"K", c.K},
           {"rule", c.rule == ExitRule::kCosine ? "cosine" : "entropy"},
           {"min_blocks", c.min_blocks}};
}
inline void from_json(const json& j, ExitConfig& c) {
  c.tau = j.value("tau", c.tau);
  c.K = j.value("K", c.K);
  const std::string r = j.value("rule", std::string("cosine"));
  if (r == "cosine")
    c.rule = ExitRule::kCosine;
  else if (r == "entropy")
    c.rule = ExitRule::kEntropy;
  else
    throw std::runtime_error("ExitConfig: rule must be cosine or entropy");
  c.min_blocks = j.value("min_blocks", c.min_blocks);
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  RadarConfig radar;
  GridSpec grid;
  SceneDistribution dist;
  int n_train = 512;
  int n_val = 128;
  ModelConfig model;
  TrainConfig train;
  ExitConfig exit;
  std::string data_dir = "data/default";
  std::string out_dir = "runs/default";
  uint64_t seed = 0;

  // Cross-module consistency: the model must match the radar dims and the
  // label grid must match the decoder output grid.
  void validate() const {
    model.validate();
    if (model.n_rx != radar.n_rx || model.n_tx != radar.n_tx || model.n_c != radar.n_chirps ||
        model.n_s != radar.n_samples)
      throw std::runtime_error("ExperimentConfig: model dims do not match radar dims");
    if (grid.H != model.out_h() || grid.W != model.out_w())
      throw std::runtime_error("ExperimentConfig: grid does not match the model output grid");
    if (n_train < 0 || n_val < 0) throw std::runtime_error("ExperimentConfig: negative counts");
    exit.validate(model);
  }
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"radar", c.radar}, {"grid", c.grid},   {"dist", c.dist},
           {"n_train", c.n_train}, {"n_val", c.n_val}, {"model", c.model},
           {"train", c.train}, {"exit", c.exit},   {"data_dir", c.data_dir},
           {"out_dir", c.out_dir}, {"seed", c.seed}};
}
inline void from_json(const json& j, ExperimentConfig& c) {
  if (j.contains("radar")) j.at("radar").get_to(c.radar);
  if (j.contains("grid")) j.at("grid").get_to(c.grid);
  if (j.contains("dist")) j.at("dist").get_to(c.dist);
  c.n_train = j.value("n_train", c.n_train);
  c.n_val = j.value("n_val", c.n_val);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("exit")) j.at("exit").get_to(c.exit);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.seed = j.value("seed", c.seed);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  json j = json::parse(f);
  ExperimentConfig c = j.get<ExperimentConfig>();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset generation and loading
// ---------------------------------------------------------------------------

inline json labels_to_json(const FrameLabels& lab) {
  json j;
  j["det_p"] = lab.det_p.data;
  j["det_off"] = lab.det_off.data;
  j["seg_mask"] = lab.seg_mask.data;
  j["centers_xy_m"] = lab.centers_xy_m;
  j["n_excluded"] = lab.n_excluded;
  return j;
}

// Writes n frames drawn from the distribution into dir (created if needed):
// frame_%05d.rvnf, labels_%05d.json, and "manifest.json" listing every file
// with its scene truth. Fully deterministic in (seed, n, distribution);
// scenes are drawn serially, frames are synthesized in parallel.
inline std::string gen_dataset(const RadarConfig& radar, const GridSpec& grid,
                               const SceneDistribution& dist, int n, uint64_t seed,
                               const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Rng rng(seed);
  std::vector<SceneSpec> scenes;
  scenes.reserve(n);
  for (int i = 0; i < n; ++i) scenes.push_back(draw_scene(dist, rng));

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    AdcFrame frame = synthesize_frame(radar, scenes[i]);
    char fname[32], lname[32];
    std::snprintf(fname, sizeof(fname), "frame_%05d.rvnf", i);
    std::snprintf(lname, sizeof(lname), "labels_%05d.json", i);
    save_frame((fs::path(dir) / fname).string(), frame);
    std::ofstream lf((fs::path(dir) / lname).string());
    lf << labels_to_json(labels_for_scene(radar, scenes[i], grid)).dump(2) << "\n";
  }

  json manifest;
  manifest["n"] = n;
  manifest["seed"] = seed;
  manifest["radar"] = radar;
  manifest["grid"] = grid;
  manifest["frames"] = json::array();
  for (int i = 0; i < n; ++i) {
    char fname[32], lname[32];
    std::snprintf(fname, sizeof(fname), "frame_%05d.rvnf", i);
    std::snprintf(lname, sizeof(lname), "labels_%05d.json", i);
    json entry;
    entry["file"] = fname;
    entry["labels"] = lname;
    entry["scene"] = json::parse(scene_to_json(scenes[i]));
    manifest["frames"].push_back(std::move(entry));
  }
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(mpath);
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("gen_dataset: cannot write " + mpath);
  return mpath;
}

struct LoadedDataset {
  RadarConfig radar;
  GridSpec grid;
  std::vector<TrainSample> samples;
  std::vector<SceneSpec> scenes;
};

// Reads a dataset directory written by gen_dataset; labels are regenerated
// from the recorded scene truths.
inline LoadedDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ifstream f(mpath);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + mpath);
  json manifest = json::parse(f);
  LoadedDataset ds;
  manifest.at("radar").get_to(ds.radar);
  manifest.at("grid").get_to(ds.grid);
  for (const json& entry : manifest.at("frames")) {
    SceneSpec scene = scene_from_json(entry.at("scene").dump());
    TrainSample s;
    s.frame = load_frame((fs::path(dir) / entry.at("file").get<std::string>()).string());
    s.labels = labels_for_scene(ds.radar, scene, ds.grid);
    ds.samples.push_back(std::move(s));
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

}  // namespace raven
