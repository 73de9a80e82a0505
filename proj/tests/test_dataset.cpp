#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "raven/dataset.hpp"
#include "raven/sha256.hpp"

using namespace raven;
namespace fs = std::filesystem;

namespace {

std::vector<uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

RadarConfig tiny_radar() {
  RadarConfig r;
  r.n_chirps = 8;
  r.n_samples = 16;
  r.n_tx = 2;
  r.n_rx = 2;
  return r;
}

GridSpec tiny_grid() {
  GridSpec g;
  g.H = 8;
  g.W = 8;
  g.extent_m = 16.0;
  return g;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("raven_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("sha256 matches published test vectors") {
  CHECK(sha256_hex(std::string("")) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
  // One-million 'a' exercises multi-block streaming through the compressor.
  std::string million(1000000, 'a');
  CHECK(sha256_hex(million) ==
        "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0");
  // 64-byte message: padding must spill into a second block.
  std::string block64(64, 'x');
  std::string h64 = sha256_hex(block64);
  CHECK(h64.size() == 64);
  CHECK(h64 != sha256_hex(std::string(63, 'x')));
}

TEST_CASE("snr to noise sigma follows the per-sample power convention") {
  // 0 dB: noise power (2 sigma^2) equals unit signal power.
  CHECK(snr_to_noise_sigma(0.0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  // +20 dB: noise power 100x smaller.
  CHECK(snr_to_noise_sigma(20.0) == doctest::Approx(1.0 / std::sqrt(200.0)).epsilon(1e-12));
  CHECK(snr_to_noise_sigma(30.0) < snr_to_noise_sigma(15.0));
}

TEST_CASE("draw_scene respects the distribution bounds") {
  SceneDistribution d;
  d.min_targets = 1;
  d.max_targets = 3;
  Rng rng(123);
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < 200; ++i) {
    SceneSpec s = draw_scene(d, rng);
    REQUIRE(s.targets.size() >= 1);
    REQUIRE(s.targets.size() <= 3);
    counts[s.targets.size()]++;
    for (const Target& t : s.targets) {
      CHECK(t.r >= d.r_min_m);
      CHECK(t.r <= d.r_max_m);
      CHECK(t.v >= d.v_min_mps);
      CHECK(t.v <= d.v_max_mps);
      CHECK(t.theta_rad >= d.theta_min_rad);
      CHECK(t.theta_rad <= d.theta_max_rad);
      CHECK(t.amp >= d.amp_min);
      CHECK(t.amp <= d.amp_max);
    }
    CHECK(s.noise_sigma <= snr_to_noise_sigma(d.snr_db_min) + 1e-12);
    CHECK(s.noise_sigma >= snr_to_noise_sigma(d.snr_db_max) - 1e-12);
  }
  // All three counts appear over 200 draws.
  CHECK(counts[1] > 0);
  CHECK(counts[2] > 0);
  CHECK(counts[3] > 0);

  SceneDistribution bad = d;
  bad.max_targets = 0;
  CHECK_THROWS_AS((void)draw_scene(bad, rng), std::runtime_error);
}

TEST_CASE("gen_dataset is byte-identical for the same seed and differs across seeds") {
  TempDir a("gen_a"), b("gen_b"), c("gen_c");
  RadarConfig radar = tiny_radar();
  GridSpec grid = tiny_grid();
  SceneDistribution dist;
  gen_dataset(radar, grid, dist, 4, 99, a.path.string());
  gen_dataset(radar, grid, dist, 4, 99, b.path.string());
  gen_dataset(radar, grid, dist, 4, 100, c.path.string());

  std::vector<std::string> names = {"manifest.json", "frame_00000.rvnf", "frame_00001.rvnf",
                                    "frame_00002.rvnf", "frame_00003.rvnf"};
  for (const std::string& n : names) {
    CAPTURE(n);
    REQUIRE(fs::exists(a.path / n));
    CHECK(read_bytes((a.path / n).string()) == read_bytes((b.path / n).string()));
  }
  // A different seed changes the frames.
  CHECK(read_bytes((a.path / "frame_00000.rvnf").string()) !=
        read_bytes((c.path / "frame_00000.rvnf").string()));
}

TEST_CASE("empty dataset still writes a valid manifest") {
  TempDir t("gen_empty");
  gen_dataset(tiny_radar(), tiny_grid(), SceneDistribution{}, 0, 5, t.path.string());
  std::ifstream f((t.path / "manifest.json").string());
  json m = json::parse(f);
  CHECK(m.at("n").get<int>() == 0);
  CHECK(m.at("frames").is_array());
  CHECK(m.at("frames").empty());
  LoadedDataset ds = load_dataset(t.path.string());
  CHECK(ds.samples.empty());
}

TEST_CASE("load_dataset reproduces frames and labels from the manifest") {
  TempDir t("roundtrip");
  RadarConfig radar = tiny_radar();
  GridSpec grid = tiny_grid();
  SceneDistribution dist;
  gen_dataset(radar, grid, dist, 3, 7, t.path.string());
  LoadedDataset ds = load_dataset(t.path.string());
  REQUIRE(ds.samples.size() == 3);
  REQUIRE(ds.scenes.size() == 3);
  CHECK(ds.radar.n_chirps == radar.n_chirps);
  CHECK(ds.grid.H == grid.H);

  // Re-draw the same scenes and check the recorded truths against them. The
  // manifest stores angles in degrees, so theta survives only to rounding;
  // every directly stored double must come back exactly.
  Rng rng(7);
  for (int i = 0; i < 3; ++i) {
    CAPTURE(i);
    SceneSpec expect = draw_scene(dist, rng);
    REQUIRE(ds.scenes[i].targets.size() == expect.targets.size());
    CHECK(ds.scenes[i].seed == expect.seed);
    CHECK(ds.scenes[i].noise_sigma == expect.noise_sigma);
    for (size_t k = 0; k < expect.targets.size(); ++k) {
      CHECK(ds.scenes[i].targets[k].r == expect.targets[k].r);
      CHECK(ds.scenes[i].targets[k].v == expect.targets[k].v);
      CHECK(ds.scenes[i].targets[k].amp == expect.targets[k].amp);
      CHECK(ds.scenes[i].targets[k].phase == expect.targets[k].phase);
      CHECK(ds.scenes[i].targets[k].theta_rad ==
            doctest::Approx(expect.targets[k].theta_rad).epsilon(1e-14));
    }
    // Frames were synthesized before serialization: bitwise match.
    AdcFrame ref = synthesize_frame(radar, expect);
    CHECK(ds.samples[i].frame.data.data == ref.data.data);
    // Labels are regenerated from the recorded scene: bitwise-consistent with
    // it, and equal to the original's labels up to the theta rounding above.
    FrameLabels lab = labels_for_scene(ds.radar, ds.scenes[i], ds.grid);
    CHECK(ds.samples[i].labels.det_p.data == lab.det_p.data);
    CHECK(ds.samples[i].labels.det_off.data == lab.det_off.data);
    CHECK(ds.samples[i].labels.seg_mask.data == lab.seg_mask.data);
    // The stored label file carries the same content.
    char lname[32];
    std::snprintf(lname, sizeof(lname), "labels_%05d.json", i);
    std::ifstream lf((t.path / lname).string());
    REQUIRE(bool(lf));
    json lj = json::parse(lf);
    CHECK(lj.at("det_p").get<std::vector<float>>() == lab.det_p.data);
    CHECK(lj.at("det_off").get<std::vector<float>>() == lab.det_off.data);
    CHECK(lj.at("seg_mask").get<std::vector<float>>() == lab.seg_mask.data);
    CHECK(lj.at("n_excluded").get<int>() == lab.n_excluded);
    FrameLabels orig = labels_for_scene(radar, expect, grid);
    REQUIRE(ds.samples[i].labels.centers_xy_m.size() == orig.centers_xy_m.size());
    for (size_t k = 0; k < orig.centers_xy_m.size(); ++k) {
      CHECK(ds.samples[i].labels.centers_xy_m[k][0] ==
            doctest::Approx(orig.centers_xy_m[k][0]).epsilon(1e-12));
      CHECK(ds.samples[i].labels.centers_xy_m[k][1] ==
            doctest::Approx(orig.centers_xy_m[k][1]).epsilon(1e-12));
    }
  }
}

TEST_CASE("experiment config round-trips through JSON") {
  ExperimentConfig c;
  c.radar.n_chirps = 16;
  c.radar.n_samples = 32;
  c.model.n_c = 16;
  c.model.n_s = 32;
  c.model.n_rx = c.radar.n_rx;
  c.model.n_tx = c.radar.n_tx;
  c.model.variant = 'A';
  c.train.lr = 0.003;
  c.train.prefix_set = {4, 16};
  c.exit.tau = 0.17;
  c.exit.rule = ExitRule::kEntropy;
  c.exit.K = 4;
  c.n_train = 9;
  c.data_dir = "x/y";
  c.seed = 42;

  json j = c;
  ExperimentConfig back = j.get<ExperimentConfig>();
  json j2 = back;
  CHECK(j == j2);
  CHECK(back.radar.n_chirps == 16);
  CHECK(back.model.variant == 'A');
  CHECK(back.train.lr == 0.003);
  CHECK(back.train.prefix_set == std::vector<int>{4, 16});
  CHECK(back.exit.rule == ExitRule::kEntropy);
  CHECK(back.exit.tau == 0.17);
  CHECK(back.data_dir == "x/y");
  CHECK(back.seed == 42);
}

TEST_CASE("partial config JSON keeps defaults for missing keys") {
  json j = json::parse(R"({"model": {"variant": "B"}, "train": {"lr": 0.5}, "n_val": 3})");
  ExperimentConfig c = j.get<ExperimentConfig>();
  CHECK(c.model.variant == 'B');
  CHECK(c.model.d == ModelConfig{}.d);
  CHECK(c.train.lr == 0.5);
  CHECK(c.train.batch_size == TrainConfig{}.batch_size);
  CHECK(c.n_val == 3);
  CHECK(c.n_train == 512);
  CHECK(c.radar.n_chirps == RadarConfig{}.n_chirps);

  CHECK_THROWS_AS((void)json::parse(R"({"exit": {"rule": "sometimes"}})").get<ExperimentConfig>(),
                  std::runtime_error);
  CHECK_THROWS_AS((void)json::parse(R"({"model": {"variant": "EE"}})").get<ExperimentConfig>(),
                  std::runtime_error);
}

TEST_CASE("experiment validate cross-checks radar, model, and grid") {
  ExperimentConfig c;
  c.radar = tiny_radar();
  c.model.n_rx = 2;
  c.model.n_tx = 2;
  c.model.n_c = 8;
  c.model.n_s = 16;
  c.model.k_tok = 1;
  c.model.d = 8;
  c.model.heads = 2;
  c.model.ffn_mult = 2;
  c.model.ssm_n = 4;
  c.model.ssm_k = 4;
  c.model.ssm_e = 2;
  c.model.D = 16;
  c.model.H = 4;
  c.model.W = 4;
  c.model.t_det = 4;
  c.model.t_seg = 4;
  c.model.dec_ch = 4;
  c.grid = tiny_grid();
  c.exit.K = 4;
  CHECK_NOTHROW(c.validate());

  ExperimentConfig bad = c;
  bad.radar.n_chirps = 16;  // model.n_c stays 8
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);

  bad = c;
  bad.grid.H = 4;  // decoder emits 8x8
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);

  bad = c;
  bad.exit.K = 3;  // does not divide n_c
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);

  bad = c;
  bad.n_train = -1;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}
