// Loss functions against hand-derived values, the multi-prefix objective and
// its gradients, optimizer behaviour, determinism of the training loop, and a
// small overfitting run.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "raven/grad_check.hpp"
#include "raven/training.hpp"

using namespace raven;

namespace {

ModelConfig tiny_cfg(char variant = 'E') {
  ModelConfig c;
  c.n_rx = 2;
  c.n_tx = 2;
  c.n_c = 8;
  c.n_s = 16;
  c.variant = variant;
  c.k_tok = 1;
  c.d = 8;
  c.heads = 2;
  c.ffn_mult = 2;
  c.ssm_n = 4;
  c.ssm_k = 4;
  c.ssm_e = 2;
  c.D = 16;
  c.H = 4;
  c.W = 4;
  c.t_det = 4;
  c.t_seg = 4;
  c.dec_ch = 4;
  return c;
}

RadarConfig tiny_radar(const ModelConfig& c) {
  RadarConfig r;
  r.n_chirps = c.n_c;
  r.n_samples = c.n_s;
  r.n_rx = c.n_rx;
  r.n_tx = c.n_tx;
  return r;
}

// Output grid of the tiny model: 8x8 cells over the default 16 m extent.
GridSpec tiny_grid(const ModelConfig& c) {
  GridSpec g;
  g.H = c.out_h();
  g.W = c.out_w();
  return g;
}

TrainSample make_sample(const ModelConfig& c, const GridSpec& g, uint64_t seed, int n_targets,
                        double noise) {
  RadarConfig rc = tiny_radar(c);
  SceneSpec scene;
  Rng rng(seed);
  for (int i = 0; i < n_targets; ++i) {
    Target t;
    t.r = rng.uniform(3.0, 13.0);
    t.theta_rad = rng.uniform(-0.6, 0.6);
    t.v = rng.uniform(-2.0, 2.0);
    t.amp = 1.0;
    scene.targets.push_back(t);
  }
  scene.noise_sigma = noise;
  scene.seed = rng.fork_seed();
  TrainSample s;
  s.frame = synthesize_frame(rc, scene);
  s.labels = labels_for_scene(rc, scene, g);
  return s;
}

// Smooth-L1 with beta = 1 on one residual.
double huber1(double d) {
  const double a = std::fabs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double scalar_of(VarT<double> v) { return v.val().data[0]; }

}  // namespace

TEST_CASE("focal heatmap loss matches hand-derived values") {
  Tape<double> t;

  SUBCASE("single positive cell at p = 0.5") {
    ArrD pv({1, 1});
    pv.data[0] = 0.5;
    ArrD tv({1, 1});
    tv.data[0] = 1.0;
    VarT<double> p = t.constant(pv);
    const double got = scalar_of(focal_bce<double>(p, tv, 0.25, 2.0));
    CHECK(got == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-9));
  }

  SUBCASE("gamma 0, alpha 0.5 halves plain BCE") {
    Rng rng(3);
    ArrD pv({3, 5}), tv({3, 5});
    for (int64_t i = 0; i < pv.numel(); ++i) {
      pv.data[i] = rng.uniform(0.05, 0.95);
      tv.data[i] = (i % 3 == 0) ? 1.0 : (i % 3 == 1 ? 0.0 : 0.3);
    }
    VarT<double> p = t.constant(pv);
    const double got = scalar_of(focal_bce<double>(p, tv, 0.5, 0.0));
    double bce = 0;
    for (int64_t i = 0; i < pv.numel(); ++i)
      bce -= tv.data[i] * std::log(pv.data[i]) + (1.0 - tv.data[i]) * std::log(1.0 - pv.data[i]);
    bce /= (double)pv.numel();
    CHECK(got == doctest::Approx(0.5 * bce).epsilon(1e-12));
  }

  SUBCASE("saturated perfect prediction scores below 1e-4") {
    ArrD tv({2, 2});
    tv.data[0] = 1.0;
    tv.data[3] = 1.0;
    ArrD pv({2, 2});
    for (int64_t i = 0; i < 4; ++i) pv.data[i] = tv.data[i] > 0.5 ? 1.0 - 1e-6 : 1e-6;
    VarT<double> p = t.constant(pv);
    CHECK(scalar_of(focal_bce<double>(p, tv, 0.25, 2.0)) < 1e-4);
  }

  SUBCASE("shape mismatch throws") {
    VarT<double> p = t.constant(ArrD({2, 2}));
    CHECK_THROWS(focal_bce<double>(p, ArrD({2, 3}), 0.25, 2.0));
  }
}

TEST_CASE("offset smooth-L1 is masked to positive cells and averaged over them") {
  Tape<double> t;
  ArrD heat({2, 2});
  heat.data[0] = 0.9;   // positive
  heat.data[1] = 0.3;   // ignored
  heat.data[2] = 1.0;   // positive
  heat.data[3] = 0.0;   // ignored
  ArrD off_t({2, 2, 2});
  ArrD off_p({2, 2, 2});
  // residuals: cell 0 -> (0.3, -0.4), cell 2 -> (2.0, 0.25); ignored cells get
  // huge residuals that must not contribute
  off_p.data[0] = 0.3;
  off_p.data[2] = 2.0;
  off_p.data[4] = -0.4;
  off_p.data[6] = 0.25;
  off_p.data[1] = off_p.data[3] = off_p.data[5] = off_p.data[7] = 50.0;
  VarT<double> off = t.constant(off_p);
  const double got = scalar_of(offset_smooth_l1<double>(off, off_t, heat, 1.0));
  const double want = (huber1(0.3) + huber1(-0.4) + huber1(2.0) + huber1(0.25)) / 2.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-12));

  SUBCASE("no positive cells yields exactly zero") {
    ArrD none({2, 2});
    CHECK(scalar_of(offset_smooth_l1<double>(off, off_t, none, 1.0)) == 0.0);
  }
}

TEST_CASE("segmentation loss matches hand-derived values") {
  Tape<double> t;

  SUBCASE("uniform 0.5 against all-ones: BCE ln2 plus Jaccard term 0.5") {
    VarT<double> logits = t.constant(ArrD({2, 2}));  // zeros -> p = 0.5
    ArrD m({2, 2});
    m.fill(1.0);
    const double got = scalar_of(seg_loss<double>(logits, m));
    CHECK(got == doctest::Approx(std::log(2.0) + 0.5).epsilon(1e-6));
  }

  SUBCASE("saturated match scores below 1e-4") {
    ArrD m({3, 3});
    m.data[0] = m.data[4] = m.data[8] = 1.0;
    ArrD lv({3, 3});
    for (int64_t i = 0; i < 9; ++i) lv.data[i] = m.data[i] > 0.5 ? 30.0 : -30.0;
    VarT<double> logits = t.constant(lv);
    CHECK(scalar_of(seg_loss<double>(logits, m)) < 1e-4);
  }

  SUBCASE("empty mask with vanishing predictions scores near zero") {
    ArrD lv({2, 2});
    lv.fill(-30.0);
    VarT<double> logits = t.constant(lv);
    CHECK(scalar_of(seg_loss<double>(logits, ArrD({2, 2}))) < 1e-4);
  }
}

TEST_CASE("multi-prefix objective composes per-prefix losses") {
  ModelConfig cfg = tiny_cfg('E');
  GridSpec grid = tiny_grid(cfg);
  Params P;
  add_model_params(P, cfg, 11);
  TrainSample s = make_sample(cfg, grid, 5, 2, 0.02);
  TrainConfig tc;

  auto loss_total = [&](const std::vector<int>& prefixes) {
    Tape<float> tape;
    Params::Bind bind(P, tape, false);
    PrefixLoss<float> lp = multi_prefix_loss<float>(bind, cfg, tape, s.frame, s.labels.det_p,
                                                    s.labels.det_off, s.labels.seg_mask, tc,
                                                    prefixes);
    return (double)lp.total.val().data[0];
  };

  SUBCASE("a single full-length prefix equals the plain full-frame loss") {
    Tape<float> tape;
    Params::Bind bind(P, tape, false);
    EncodeOut<float> enc = encode_frame<float>(bind, cfg, tape, s.frame);
    VarT<float> dl = det_loss<float>(decode_det<float>(bind, cfg, enc.Z), s.labels.det_p,
                                     s.labels.det_off, 0.25f, 2.0f, 1.0f);
    VarT<float> sl = seg_loss<float>(decode_seg<float>(bind, cfg, enc.Z), s.labels.seg_mask);
    const double manual = (double)(dl.val().data[0] + sl.val().data[0]);
    CHECK(loss_total({8}) == doctest::Approx(manual).epsilon(1e-7));
  }

  SUBCASE("a prefix pair sums the individual prefix losses and is monotone") {
    const double l4 = loss_total({4, 8});  // invalid alone (max != n_c) checked below
    const double only8 = loss_total({8});
    CHECK(l4 > only8);  // nonnegative extra term
  }

  SUBCASE("invalid prefixes are rejected") {
    CHECK_THROWS(loss_total({2, 8}));  // below max(t_det, t_seg)
    CHECK_THROWS(loss_total({9}));     // beyond the frame
    TrainConfig bad;
    bad.prefix_set = {8, 4};
    CHECK_THROWS(bad.prefixes(8));  // not ascending
    bad.prefix_set = {4};
    CHECK_THROWS(bad.prefixes(8));  // last != n_c
    bad.prefix_set = {4, 8};
    CHECK(bad.prefixes(8) == std::vector<int>{4, 8});
  }
}

TEST_CASE("multi-prefix objective passes a finite-difference gradient check") {
  ModelConfig cfg = tiny_cfg('E');
  GridSpec grid = tiny_grid(cfg);
  ParamsD P;
  add_model_params(P, cfg, 17);
  TrainSample s = make_sample(cfg, grid, 9, 2, 0.02);
  const ArrD heat = to_double(s.labels.det_p);
  const ArrD off = to_double(s.labels.det_off);
  const ArrD mask = to_double(s.labels.seg_mask);
  TrainConfig tc;
  const std::vector<int> prefixes{4, 8};

  auto loss_on = [&](bool train) {
    Tape<double> tape;
    ParamsD::Bind bind(P, tape, train);
    AdcFrame f = s.frame;
    PrefixLoss<double> lp =
        multi_prefix_loss<double>(bind, cfg, tape, f, heat, off, mask, tc, prefixes);
    if (train) {
      tape.backward(lp.total);
      bind.accumulate_grads();
    }
    return lp.total.val().data[0];
  };
  // the objective is O(1), so finite-difference probes carry ~1e-11 absolute
  // noise at h = 1e-4; the floor keeps near-zero gradients from dominating
  auto rep = grad_check<double>(
      P, [&] { return loss_on(false); }, [&] { return loss_on(true); }, 1e-4, 6, 13, 1e-6);
  CAPTURE(rep.worst_param);
  CHECK(rep.checked > 100);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("no dead parameters on the default variant") {
  ModelConfig cfg = tiny_cfg('E');
  GridSpec grid = tiny_grid(cfg);
  ParamsD P;
  add_model_params(P, cfg, 21);
  TrainSample s = make_sample(cfg, grid, 31, 2, 0.05);
  const ArrD heat = to_double(s.labels.det_p);
  const ArrD off = to_double(s.labels.det_off);
  const ArrD mask = to_double(s.labels.seg_mask);
  REQUIRE(!s.labels.centers_xy_m.empty());  // offsets must receive gradient

  TrainConfig tc;
  Tape<double> tape;
  ParamsD::Bind bind(P, tape, true);
  PrefixLoss<double> lp =
      multi_prefix_loss<double>(bind, cfg, tape, s.frame, heat, off, mask, tc, {4, 8});
  tape.backward(lp.total);
  bind.accumulate_grads();

  for (int i = 0; i < P.count(); ++i) {
    double mx = 0;
    for (double g : P.grad(i).data) mx = std::max(mx, std::fabs(g));
    CAPTURE(P.name(i));
    CHECK(mx > 0.0);
  }
}

TEST_CASE("optimizer contract") {
  SUBCASE("1-D quadratic converges") {
    Params P;
    P.add("x", Arr({1}));
    AdamW<float> opt;
    opt.lr = 0.1f;
    opt.weight_decay = 0.0f;
    for (int i = 0; i < 500; ++i) {
      P.zero_grad();
      const float x = P.value("x").data[0];
      P.grad(P.find("x")).data[0] = 2.0f * (x - 3.0f);
      CHECK(adam_step(opt, P));
    }
    CHECK(std::fabs(P.value("x").data[0] - 3.0f) < 1e-2);
  }

  SUBCASE("zero gradients and zero decay leave parameters unchanged") {
    Params P;
    P.add("x", Arr({3}));
    P.value("x").data[1] = 2.5f;
    AdamW<float> opt;
    opt.weight_decay = 0.0f;
    P.zero_grad();
    CHECK(adam_step(opt, P));
    CHECK(P.value("x").data[0] == 0.0f);
    CHECK(P.value("x").data[1] == 2.5f);
  }

  SUBCASE("non-finite gradients skip the step") {
    Params P;
    P.add("x", Arr({2}));
    P.value("x").data[0] = 1.0f;
    AdamW<float> opt;
    P.zero_grad();
    P.grad(P.find("x")).data[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK(!adam_step(opt, P));
    CHECK(P.value("x").data[0] == 1.0f);
    CHECK(P.value("x").data[1] == 0.0f);
  }
}

TEST_CASE("training is reproducible and logs one row per epoch") {
  ModelConfig cfg = tiny_cfg('E');
  GridSpec grid = tiny_grid(cfg);
  std::vector<TrainSample> data, val;
  for (int i = 0; i < 4; ++i) data.push_back(make_sample(cfg, grid, 100 + i, 1 + i % 2, 0.05));
  for (int i = 0; i < 2; ++i) val.push_back(make_sample(cfg, grid, 200 + i, 1, 0.05));

  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 2;
  tc.epochs = 2;
  tc.prefix_set = {4, 8};
  tc.seed = 7;

  Params P1, P2;
  add_model_params(P1, cfg, 33);
  add_model_params(P2, cfg, 33);
  TrainResult r1 = train(P1, cfg, tc, data, val, grid);
  TrainResult r2 = train(P2, cfg, tc, data, val, grid);

  CHECK(r1.log_lines.size() == 2);
  CHECK(r1.skipped_steps == 0);
  CHECK(P1.payload_bytes() == P2.payload_bytes());
  CHECK(r1.log_lines == r2.log_lines);

  const nlohmann::json row = nlohmann::json::parse(r1.log_lines.back());
  CHECK(row.at("epoch").get<int>() == 2);
  CHECK(std::isfinite(row.at("loss_det").get<double>()));
  CHECK(std::isfinite(row.at("loss_seg").get<double>()));
  for (const char* key : {"f1@4", "f1@8", "miou@4", "miou@8"}) {
    CAPTURE(key);
    REQUIRE(row.contains(key));
    const double v = row.at(key).get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  SUBCASE("prefix supervision off ignores the prefix set entirely") {
    TrainConfig off = tc;
    off.prefix_supervision = false;
    off.prefix_set = {3, 5};  // invalid on purpose; must never be consulted
    off.epochs = 1;
    Params P3;
    add_model_params(P3, cfg, 33);
    TrainResult r3 = train(P3, cfg, off, data, val, grid);
    CHECK(r3.log_lines.size() == 1);
    const nlohmann::json j = nlohmann::json::parse(r3.log_lines[0]);
    CHECK(j.contains("f1@8"));
    CHECK(!j.contains("f1@4"));
  }
}

TEST_CASE("a non-finite loss aborts training with a diagnostic") {
  ModelConfig cfg = tiny_cfg('E');
  GridSpec grid = tiny_grid(cfg);
  std::vector<TrainSample> data{make_sample(cfg, grid, 44, 1, 0.02)};
  data[0].frame.data.data[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.prefix_set = {4, 8};
  tc.epochs = 1;
  Params P;
  add_model_params(P, cfg, 3);
  CHECK_THROWS_WITH_AS(train(P, cfg, tc, data, {}, grid),
                       doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("eight fixed frames overfit by at least 100x within 2000 steps") {
  ModelConfig cfg = tiny_cfg('E');
  cfg.D = 24;
  cfg.dec_ch = 12;
  GridSpec grid = tiny_grid(cfg);
  // sharper blobs keep the soft-target entropy floor of the focal term small
  // relative to the initial loss, so a 100x decrease is actually attainable
  grid.blob_sigma_cells = 0.5;
  std::vector<TrainSample> data;
  for (int i = 0; i < 8; ++i) data.push_back(make_sample(cfg, grid, 300 + i, 1 + i % 2, 0.02));

  TrainConfig tc;
  tc.lr = 5e-3;
  tc.weight_decay = 0.0;
  tc.batch_size = 4;
  tc.epochs = 1000;  // 2 optimizer steps per epoch -> 2000 steps total
  tc.prefix_supervision = false;
  tc.seed = 1;

  Params P;
  add_model_params(P, cfg, 55);

  auto mean_loss = [&] {
    double s = 0;
    for (const TrainSample& d : data) {
      Tape<float> tape;
      Params::Bind bind(P, tape, false);
      PrefixLoss<float> lp = multi_prefix_loss<float>(
          bind, cfg, tape, d.frame, d.labels.det_p, d.labels.det_off, d.labels.seg_mask, tc,
          {cfg.n_c});
      s += lp.total.val().data[0];
    }
    return s / (double)data.size();
  };

  const double before = mean_loss();
  train(P, cfg, tc, data, {}, grid);
  const double after = mean_loss();
  CAPTURE(before);
  CAPTURE(after);
  CHECK(after * 100.0 < before);
}
