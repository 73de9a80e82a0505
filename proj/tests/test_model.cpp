// Structural and numerical checks of the full perception model: variant
// wiring, causality along the chirp axis, streaming/batched equivalence,
// decoder behaviour, peak extraction, and whole-model gradients.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "raven/grad_check.hpp"
#include "raven/model.hpp"
#include "raven/rng.hpp"

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

AdcFrame noise_frame(const ModelConfig& c, uint64_t seed, double amp = 0.5) {
  AdcFrame f(tiny_radar(c));
  Rng rng(seed);
  for (auto& v : f.data.data) v = (float)rng.uniform(-amp, amp);
  return f;
}

Arr encode_Z(Params& P, const ModelConfig& cfg, const AdcFrame& frame, int k0 = 0,
             int k1 = -1) {
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  return encode_frame<float>(bind, cfg, tape, frame, k0, k1).Z.val();
}

Arr encode_Y(Params& P, const ModelConfig& cfg, const AdcFrame& frame) {
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  return encode_frame<float>(bind, cfg, tape, frame).Y.val();
}

}  // namespace

TEST_CASE("parameter sets differ by variant and are seed-deterministic") {
  auto count_of = [](char v, bool uniform = false) {
    ModelConfig c = tiny_cfg(v);
    c.mix_uniform_mode = uniform;
    Params P;
    add_model_params(P, c, 1);
    return P;
  };
  Params A = count_of('A'), C = count_of('C'), E = count_of('E'), B = count_of('B'),
         D = count_of('D');
  CHECK(A.has("ssm.rx_shared.in_proj.w"));
  CHECK(!A.has("ssm.rx0.in_proj.w"));
  CHECK(!A.has("mixer.in.w"));
  CHECK(!A.has("frattn.lift.w"));
  CHECK(C.has("ssm.rx_shared.in_proj.w"));
  CHECK(C.has("mixer.in.w"));
  CHECK(E.has("ssm.rx0.in_proj.w"));
  CHECK(E.has("ssm.rx1.in_proj.w"));
  CHECK(E.has("mixer.in.w"));
  CHECK(!E.has("frattn.lift.w"));
  CHECK(B.has("frattn.lift.w"));
  CHECK(B.has("ssm.rx_shared.in_proj.w"));
  CHECK(D.has("frattn.lift.w"));
  CHECK(D.has("ssm.rx0.in_proj.w"));
  CHECK(D.has("mixer.in.w"));
  CHECK(A.total_scalars() < C.total_scalars());
  CHECK(C.total_scalars() < E.total_scalars());
  CHECK(E.total_scalars() < D.total_scalars());

  // uniform ablation of E keeps the encoder params but drops the mixer head
  ModelConfig eu = tiny_cfg('E');
  eu.mix_uniform_mode = true;
  Params Eu;
  add_model_params(Eu, eu, 1);
  CHECK(Eu.has("ssm.rx0.in_proj.w"));
  CHECK(!Eu.has("mixer.in.w"));

  // same seed -> identical bytes; different seed -> different bytes
  Params E1, E2, E3;
  add_model_params(E1, tiny_cfg('E'), 42);
  add_model_params(E2, tiny_cfg('E'), 42);
  add_model_params(E3, tiny_cfg('E'), 43);
  CHECK(E1.payload_bytes() == E2.payload_bytes());
  CHECK(E1.payload_bytes() != E3.payload_bytes());
}

TEST_CASE("zero input yields zero fast-time tokens and chirp-constant features") {
  ModelConfig cfg = tiny_cfg('E');
  Params P;
  add_model_params(P, cfg, 3);
  AdcFrame f(tiny_radar(cfg));  // all zeros
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  EncodeOut<float> enc = encode_frame<float>(bind, cfg, tape, f);
  const Arr& F = enc.F.val();
  for (float v : F.data) CHECK(v == 0.0f);
  // every chirp sees the same (zero) tokens, so mixed rows must repeat exactly
  const Arr& Y = enc.Y.val();
  REQUIRE(Y.rows() == cfg.n_c);
  REQUIRE(Y.cols() == cfg.y_width());
  for (int k = 1; k < Y.rows(); ++k)
    for (int j = 0; j < Y.cols(); ++j) CHECK(Y.at(k, j) == Y.at(0, j));
  CHECK(enc.Z.val().all_finite());
}

TEST_CASE("k_tok=1 tokens equal per-chirp means of the fast-time encoder output") {
  ModelConfig cfg = tiny_cfg('E');
  Params P;
  add_model_params(P, cfg, 5);
  AdcFrame f = noise_frame(cfg, 11);
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  EncodeOut<float> enc = encode_frame<float>(bind, cfg, tape, f);
  const Arr& F = enc.F.val();
  for (int r = 0; r < cfg.n_rx; ++r) {
    Tape<float> t2;
    Params::Bind b2(P, t2, false);
    VarT<float> x = t2.constant(rx_sequence<float>(f, r, 0, cfg.n_c));
    VarT<float> z =
        ssm_forward<float>(b2, "ssm.rx" + std::to_string(r) + ".", x, cfg.fast_dims(),
                           cfg.n_c);
    const Arr& zv = z.val();
    for (int k = 0; k < cfg.n_c; ++k)
      for (int j = 0; j < 2; ++j) {
        float s = 0;
        for (int n = 0; n < cfg.n_s; ++n) s += zv.at(k * cfg.n_s + n, j);
        const float mean = s / (float)cfg.n_s;
        CHECK(std::abs(F.at(k * cfg.n_rx + r, j) - mean) < 1e-6f);
      }
  }
}

TEST_CASE("receiver permutation: uniform mixing invariant, attention mixer sensitive") {
  // swap the two receivers' channels in the raw frame
  auto swapped = [](const AdcFrame& f) {
    AdcFrame g = f;
    for (int k = 0; k < f.cfg.n_chirps; ++k)
      for (int n = 0; n < f.cfg.n_samples; ++n) {
        std::swap(g.re(k, n, 0), g.re(k, n, 1));
        std::swap(g.im(k, n, 0), g.im(k, n, 1));
      }
    return g;
  };

  {
    // shared fast-time params + mean over RX: output cannot depend on RX order
    ModelConfig cfg = tiny_cfg('A');
    Params P;
    add_model_params(P, cfg, 7);
    AdcFrame f = noise_frame(cfg, 21);
    CHECK(max_abs_diff(encode_Y(P, cfg, f), encode_Y(P, cfg, swapped(f))) == 0.0);
    CHECK(max_abs_diff(encode_Z(P, cfg, f), encode_Z(P, cfg, swapped(f))) == 0.0);
  }
  {
    // shared fast-time params + attention mixer: antenna embeddings break the
    // symmetry, so the swap must change the mixed features
    ModelConfig cfg = tiny_cfg('C');
    Params P;
    add_model_params(P, cfg, 7);
    AdcFrame f = noise_frame(cfg, 21);
    CHECK(max_abs_diff(encode_Y(P, cfg, f), encode_Y(P, cfg, swapped(f))) > 1e-4);
  }
}

TEST_CASE("encode is causal along the chirp axis") {
  for (char variant : {'E', 'B'}) {
    CAPTURE(variant);
    ModelConfig cfg = tiny_cfg(variant);
    Params P;
    add_model_params(P, cfg, 9);
    AdcFrame f = noise_frame(cfg, 31);
    AdcFrame g = f;
    const int c0 = 5;
    for (int k = c0; k < cfg.n_c; ++k)
      for (int n = 0; n < cfg.n_s; ++n)
        for (int r = 0; r < cfg.n_rx; ++r) {
          g.re(k, n, r) = 3.0f + k + n;
          g.im(k, n, r) = -2.0f;
        }
    Arr Z1 = encode_Z(P, cfg, f), Z2 = encode_Z(P, cfg, g);
    for (int k = 0; k < c0; ++k)
      for (int j = 0; j < cfg.D; ++j) CHECK(Z1.at(k, j) == Z2.at(k, j));
    double after = 0;
    for (int k = c0; k < cfg.n_c; ++k)
      for (int j = 0; j < cfg.D; ++j)
        after = std::max(after, std::abs((double)Z1.at(k, j) - Z2.at(k, j)));
    CHECK(after > 1e-6);
  }
}

TEST_CASE("prefix encode equals truncated-frame encode bitwise") {
  for (char variant : {'E', 'A', 'B'}) {
    CAPTURE(variant);
    ModelConfig cfg = tiny_cfg(variant);
    Params P;
    add_model_params(P, cfg, 13);
    AdcFrame f = noise_frame(cfg, 41);
    const int L = 5;
    Arr Zfull = encode_Z(P, cfg, f);
    Arr Zcut = encode_Z(P, cfg, f, 0, L);
    REQUIRE(Zcut.rows() == L);
    for (int k = 0; k < L; ++k)
      for (int j = 0; j < cfg.D; ++j) CHECK(Zfull.at(k, j) == Zcut.at(k, j));
  }
}

TEST_CASE("streaming chirp-by-chirp matches batched encode and decode bitwise") {
  for (char variant : {'E', 'A'}) {
    CAPTURE(variant);
    ModelConfig cfg = tiny_cfg(variant);
    Params P;
    add_model_params(P, cfg, 17);
    AdcFrame f = noise_frame(cfg, 51);

    Arr Zbatch = encode_Z(P, cfg, f);
    StreamState st;
    st.reset(cfg);
    for (int k = 0; k < cfg.n_c; ++k) stream_push_chirp(P, cfg, f, st);
    REQUIRE(st.Z.rows() == cfg.n_c);
    CHECK(max_abs_diff(Zbatch, st.Z) == 0.0);

    // decoding the streamed states at a prefix equals the batched prefix path
    const int L = cfg.t_det;
    Arr head;
    head.shape = {L, cfg.D};
    head.data.assign(st.Z.data.begin(), st.Z.data.begin() + (size_t)L * cfg.D);
    ForwardResult a = decode_from_states(P, cfg, head);
    ForwardResult b = forward_frame(P, cfg, f, L);
    CHECK(max_abs_diff(a.det.p, b.det.p) == 0.0);
    CHECK(max_abs_diff(a.det.off, b.det.off) == 0.0);
    CHECK(max_abs_diff(a.seg.logits, b.seg.logits) == 0.0);
  }
}

TEST_CASE("decoder shapes, probability range, and head bias wiring") {
  ModelConfig cfg = tiny_cfg('E');
  Params P;
  add_model_params(P, cfg, 19);
  AdcFrame f = noise_frame(cfg, 61);
  ForwardResult r = forward_frame(P, cfg, f);
  REQUIRE(r.det.p.shape == std::vector<int>{cfg.out_h(), cfg.out_w()});
  REQUIRE(r.det.off.shape == std::vector<int>{2, cfg.out_h(), cfg.out_w()});
  REQUIRE(r.seg.logits.shape == std::vector<int>{cfg.out_h(), cfg.out_w()});
  for (float v : r.det.p.data) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  CHECK(r.det.off.all_finite());
  CHECK(r.seg.logits.all_finite());

  // zeroing the 1x1 head weights must leave a constant bias-driven map
  P.value("det.p.w").fill(0.0f);
  ForwardResult rb = forward_frame(P, cfg, f);
  const float pb = rb.det.p.data[0];
  for (float v : rb.det.p.data) CHECK(v == pb);
  const float want = 1.0f / (1.0f + std::exp(4.59f));
  CHECK(std::abs(pb - want) < 1e-4f);
}

TEST_CASE("peak extraction: thresholds, local maxima, offsets, suppression") {
  GridSpec grid;
  grid.H = 8;
  grid.W = 8;
  grid.extent_m = 8.0;  // 1 m cells
  DetOutput det;
  det.p = Arr({8, 8});
  det.off = Arr({2, 8, 8});

  SUBCASE("all baseline scores give no detections") {
    CHECK(decode_detections(det, 0.3, 2.0, grid).empty());
  }
  SUBCASE("single peak with sub-cell offsets") {
    det.p.at(2, 5) = 0.9f;
    det.off.data[(size_t)0 * 64 + 2 * 8 + 5] = 0.25f;   // dx (columns)
    det.off.data[(size_t)1 * 64 + 2 * 8 + 5] = -0.5f;   // dy (rows)
    auto out = decode_detections(det, 0.3, 2.0, grid);
    REQUIRE(out.size() == 1);
    CHECK(out[0].x == doctest::Approx(5 + 0.5 + 0.25 - 4.0));
    CHECK(out[0].y == doctest::Approx(2 + 0.5 - 0.5));
    CHECK(out[0].score == doctest::Approx(0.9));
  }
  SUBCASE("scores at the threshold are excluded") {
    det.p.at(3, 3) = 0.5f;
    CHECK(decode_detections(det, 0.5, 2.0, grid).empty());
    CHECK(decode_detections(det, 0.4999, 2.0, grid).size() == 1);
  }
  SUBCASE("suppression radius keeps the stronger of two nearby peaks") {
    det.p.at(4, 2) = 0.8f;
    det.p.at(4, 4) = 0.6f;  // 2 cells away
    auto close = decode_detections(det, 0.3, 3.0, grid);
    REQUIRE(close.size() == 1);
    CHECK(close[0].score == doctest::Approx(0.8));
    auto far = decode_detections(det, 0.3, 1.0, grid);
    CHECK(far.size() == 2);
  }
  SUBCASE("plateau ties count as maxima") {
    det.p.at(6, 1) = 0.7f;
    det.p.at(6, 2) = 0.7f;
    auto out = decode_detections(det, 0.3, 0.5, grid);
    CHECK(out.size() == 2);
  }
}

TEST_CASE("whole-model gradients match finite differences in double precision") {
  for (char variant : {'E', 'B', 'A'}) {
    CAPTURE(variant);
    ModelConfig cfg = tiny_cfg(variant);
    ParamsD P;
    add_model_params(P, cfg, 23);
    AdcFrame f = noise_frame(cfg, 71);

    auto loss_on = [&](bool train) {
      Tape<double> tape;
      ParamsD::Bind bind(P, tape, train);
      EncodeOut<double> enc = encode_frame<double>(bind, cfg, tape, f);
      DetVars<double> dv = decode_det<double>(bind, cfg, enc.Z);
      VarT<double> sv = decode_seg<double>(bind, cfg, enc.Z);
      VarT<double> loss =
          add(add(sum_all(dv.p), sum_all(dv.off)), add(sum_all(sv), mean_all(enc.Z)));
      if (train) {
        tape.backward(loss);
        bind.accumulate_grads();
      }
      return loss.val().data[0];
    };
    // the objective is O(100), so FD probes carry ~1e-9 absolute noise; the
    // 1e-5 denominator floor keeps true-zero gradients from dominating
    auto rep = grad_check<double>(
        P, [&] { return loss_on(false); }, [&] { return loss_on(true); }, 1e-4, 8, 7, 1e-5);
    CAPTURE(rep.worst_param);
    CHECK(rep.checked > 100);
    CHECK(rep.max_rel_err < 1e-3);
  }
}

TEST_CASE("forward is deterministic for fixed parameters and input") {
  ModelConfig cfg = tiny_cfg('E');
  Params P;
  add_model_params(P, cfg, 29);
  AdcFrame f = noise_frame(cfg, 81);
  ForwardResult a = forward_frame(P, cfg, f);
  ForwardResult b = forward_frame(P, cfg, f);
  CHECK(max_abs_diff(a.det.p, b.det.p) == 0.0);
  CHECK(max_abs_diff(a.seg.logits, b.seg.logits) == 0.0);
  CHECK(max_abs_diff(a.Z, b.Z) == 0.0);
}
