#pragma once

// Analytic multiply-accumulate counting for the perception model. Counts are
// derived from the layer shapes alone, so they are deterministic and
// platform-independent; elementwise work (activations, gates, residual adds,
// pooling) is not counted, per the usual MAC conventions.
//
// Primitive formulas:
//   matmul [m,k]x[k,n]                     m*k*n
//   conv   C_out * C_in/groups * K * L'    (per output position; 2-D uses
//                                           K = KH*KW and L' = H'*W')
//   SSM selective scan                     3 * d_inner * n per time step,
//                                          projections counted as matmuls
//   attention                              heads * (N_q * N_k * d/heads) * 2
//                                          for scores + weighted values,
//                                          projections counted as matmuls

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "raven/model.hpp"

namespace raven {

inline int64_t matmul_macs(int64_t m, int64_t k, int64_t n) { return m * k * n; }

inline int64_t conv_macs(int64_t c_out, int64_t c_in, int64_t groups, int64_t kernel,
                         int64_t out_positions) {
  return c_out * (c_in / groups) * kernel * out_positions;
}

// Scores and value mixing only; the four projections are plain matmuls and
// are counted where they occur.
inline int64_t attention_core_macs(int heads, int64_t n_q, int64_t n_k, int d) {
  return (int64_t)heads * (n_q * n_k * (int64_t)(d / heads)) * 2;
}

// One SSM block over a length-T sequence.
inline int64_t ssm_macs(const SsmDims& s, int64_t T) {
  const int64_t di = s.d_inner();
  const int64_t r = s.dt_rank();
  int64_t m = 0;
  m += matmul_macs(T, s.d_m, 2 * di);          // in-projection (value + gate)
  m += conv_macs(di, di, di, s.k, T);          // causal depthwise conv
  m += matmul_macs(T, di, r + 2 * s.n);        // x-projection (dt, B, C)
  m += matmul_macs(T, r, di);                  // dt head
  m += 3 * di * (int64_t)s.n * T;              // selective scan recurrence
  m += matmul_macs(T, di, s.d_m);              // out-projection
  return m;
}

struct MacStage {
  std::string name;
  int64_t macs = 0;
  bool chirp_dependent = false;
};

struct MacReport {
  std::vector<MacStage> stages;
  int64_t param_count = 0;

  int64_t total() const {
    int64_t s = 0;
    for (const MacStage& st : stages) s += st.macs;
    return s;
  }
  int64_t chirp_dependent_total() const {
    int64_t s = 0;
    for (const MacStage& st : stages)
      if (st.chirp_dependent) s += st.macs;
    return s;
  }
  int64_t chirp_independent_total() const { return total() - chirp_dependent_total(); }
  const MacStage& stage(const std::string& name) const {
    for (const MacStage& st : stages)
      if (st.name == name) return st;
    throw std::runtime_error("MacReport: no stage named " + name);
  }
};

// MACs to encode and decode a frame prefix of L chirps. Every stage that
// touches per-chirp data is linear in L with no constant term, so the
// chirp-dependent subtotal scales exactly as L/N_c.
inline MacReport count_macs(const ModelConfig& cfg, int L) {
  if (L < 1 || L > cfg.n_c) throw std::runtime_error("count_macs: bad prefix length");
  MacReport rep;
  const int64_t l = L;
  const int64_t ns = cfg.n_s;
  const int64_t d = cfg.d;

  // fast-time state models, one pass per receiver per chirp (parameter
  // sharing across receivers does not change the compute)
  rep.stages.push_back({"fast_time", l * cfg.n_rx * ssm_macs(cfg.fast_dims(), ns), true});

  if (cfg.has_fullres_attn()) {
    const int64_t n_tok = (int64_t)cfg.n_rx * ns;
    int64_t m = 0;
    m += matmul_macs(n_tok, 2, d);                              // lift
    m += 3 * matmul_macs(n_tok, d, d);                          // wq, wk, wv
    m += attention_core_macs(cfg.heads, n_tok, n_tok, cfg.d);   // scores + values
    m += matmul_macs(n_tok, d, d);                              // wo
    m += matmul_macs(n_tok, d, 2);                              // unlift
    rep.stages.push_back({"full_res_attention", l * m, true});
  }

  if (cfg.has_mixer()) {
    const int64_t nk = cfg.n_rx;  // key tokens per chirp
    const int64_t nq = cfg.n_tx;  // persistent queries
    int64_t m = 0;
    m += matmul_macs(nk, 2 * cfg.k_tok, d);                  // token in-projection
    m += matmul_macs(nq, d, d) + 2 * matmul_macs(nk, d, d);  // wq; wk, wv
    m += attention_core_macs(cfg.heads, nq, nk, cfg.d);
    m += matmul_macs(nq, d, d);                              // wo
    m += 2 * matmul_macs(nq, d, (int64_t)cfg.ffn_mult * d);  // FFN
    m += matmul_macs(nk, d, 2) + matmul_macs(nq, d, 2);      // pair projections
    rep.stages.push_back({"mixer", l * m, true});
  }
  // uniform mixing is averaging only: zero MACs

  {
    int64_t m = 0;
    m += matmul_macs(l, cfg.y_width(), cfg.D);  // reduction
    m += matmul_macs(l, cfg.D, cfg.D);          // pre-projection
    m += ssm_macs(cfg.chirp_dims(), l);         // chirp-wise state model
    rep.stages.push_back({"backbone", m, true});
  }

  // decoder input projections run on all L chirp states before pooling
  rep.stages.push_back(
      {"decoder_proj", 2 * matmul_macs(l, cfg.D, (int64_t)cfg.H * cfg.W), true});

  {
    const int64_t hw = (int64_t)cfg.H * cfg.W;
    const int64_t hw2 = (int64_t)cfg.out_h() * cfg.out_w();
    auto trunk = [&](int t_pool) {
      return conv_macs(cfg.dec_ch, t_pool, 1, 9, hw) +    // 3x3 on pooled slices
             conv_macs(cfg.dec_ch, cfg.dec_ch, 1, 9, hw); // 3x3
    };
    int64_t m = trunk(cfg.t_det) + trunk(cfg.t_seg);
    m += conv_macs(1, cfg.dec_ch, 1, 1, hw2);             // heatmap head
    m += conv_macs(2, cfg.dec_ch, 1, 1, hw2);             // offset head
    m += conv_macs(1, cfg.dec_ch, 1, 1, hw2);             // mask head
    rep.stages.push_back({"decoder_conv", m, false});
  }
  return rep;
}

inline MacReport count_macs_with_params(const ModelConfig& cfg, int L) {
  MacReport rep = count_macs(cfg, L);
  Params P;
  add_model_params(P, cfg, 0);
  rep.param_count = P.total_scalars();
  return rep;
}

}  // namespace raven
