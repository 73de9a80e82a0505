// Analytic MAC counting: primitive formulas against hand-derived values,
// exact linearity of the chirp-dependent subtotal, and the variant compute
// gap that motivates token-level mixing over full-resolution attention.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "raven/macs.hpp"

using namespace raven;

TEST_CASE("primitive MAC formulas") {
  CHECK(matmul_macs(2, 3, 4) == 24);

  // a 1x1 convolution over H*W positions is a matmul over the pixels
  const int c_in = 7, c_out = 5, hw = 9 * 11;
  CHECK(conv_macs(c_out, c_in, 1, 1, hw) == matmul_macs(hw, c_in, c_out));

  // grouped conv divides the input fan-in
  CHECK(conv_macs(8, 8, 8, 3, 10) == 8 * 1 * 3 * 10);

  CHECK(attention_core_macs(2, 3, 5, 8) == 2 * (3 * 5 * 4) * 2);

  // hand-summed SSM block: d_m=2, e=2 (d_inner 4), n=4, k=4, dt_rank 1, T=16
  SsmDims s;
  s.d_m = 2;
  s.e = 2;
  s.n = 4;
  s.k = 4;
  const int64_t in_proj = 16 * 2 * 8;
  const int64_t conv = 4 * 1 * 4 * 16;
  const int64_t x_proj = 16 * 4 * (1 + 8);
  const int64_t dt = 16 * 1 * 4;
  const int64_t scan = 3 * 4 * 4 * 16;
  const int64_t out_proj = 16 * 4 * 2;
  CHECK(ssm_macs(s, 16) == in_proj + conv + x_proj + dt + scan + out_proj);
}

TEST_CASE("chirp-dependent MACs are exactly linear in the prefix length") {
  for (char variant : {'E', 'A', 'B', 'D'}) {
    CAPTURE(variant);
    ModelConfig cfg;  // desk-scale defaults
    cfg.variant = variant;
    cfg.validate();
    const MacReport full = count_macs(cfg, cfg.n_c);
    const MacReport half = count_macs(cfg, cfg.n_c / 2);
    const MacReport quarter = count_macs(cfg, cfg.n_c / 4);
    CHECK(full.chirp_dependent_total() == 2 * half.chirp_dependent_total());
    CHECK(full.chirp_dependent_total() == 4 * quarter.chirp_dependent_total());
    CHECK(full.chirp_independent_total() == half.chirp_independent_total());
    CHECK(full.chirp_independent_total() == quarter.chirp_independent_total());

    int64_t sum = 0;
    for (const MacStage& st : full.stages) sum += st.macs;
    CHECK(full.total() == sum);
    CHECK(full.total() ==
          full.chirp_dependent_total() + full.chirp_independent_total());
  }
  ModelConfig cfg;
  CHECK_THROWS(count_macs(cfg, 0));
  CHECK_THROWS(count_macs(cfg, cfg.n_c + 1));
}

TEST_CASE("token mixing is orders of magnitude cheaper than full-resolution attention") {
  ModelConfig e;  // defaults: variant E, n_rx=4, n_tx=2, n_s=64, d=64, heads=8
  ModelConfig d_cfg = e;
  d_cfg.variant = 'D';
  const MacReport re = count_macs(e, e.n_c);
  const MacReport rd = count_macs(d_cfg, d_cfg.n_c);

  const int64_t mixer = re.stage("mixer").macs;
  const int64_t fullres = rd.stage("full_res_attention").macs;
  CHECK(mixer * 50 < fullres);

  // the score-term gap alone is (n_rx*n_s)^2 / (n_tx*n_rx) >= n_s^2
  const int64_t score_e = attention_core_macs(e.heads, e.n_tx, e.n_rx, e.d);
  const int64_t score_d =
      attention_core_macs(e.heads, (int64_t)e.n_rx * e.n_s, (int64_t)e.n_rx * e.n_s, e.d);
  CHECK(score_d / score_e == (int64_t)(e.n_rx * e.n_s) * (e.n_rx * e.n_s) /
                                 ((int64_t)e.n_tx * e.n_rx));
  CHECK(score_d / score_e >= (int64_t)e.n_s * e.n_s);
}

TEST_CASE("report carries the parameter count") {
  ModelConfig cfg;
  cfg.validate();
  const MacReport rep = count_macs_with_params(cfg, cfg.n_c);
  Params P;
  add_model_params(P, cfg, 0);
  CHECK(rep.param_count == P.total_scalars());
  CHECK(rep.param_count > 0);
}
