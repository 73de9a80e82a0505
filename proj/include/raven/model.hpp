#pragma once
// End-to-end radar perception model: per-RX fast-time SSM encoders, a
// cross-antenna attention mixer with learnable TX queries and pairwise
// virtual-array fusion, a chirp-wise SSM backbone, and convolutional
// detection / segmentation decoders that can run from any chirp prefix.
//
// Stage ordering is configurable to reproduce the ablation variants:
//   A: shared-parameter fast-time SSM per RX, uniform (parameter-free) mixing
//   B: full-resolution self-attention over all (sample, RX) tokens, then the
//      shared fast-time SSM, uniform mixing
//   C: shared fast-time SSM, then the attention mixer head
//   D: full-resolution self-attention, per-RX fast-time SSMs, attention mixer
//   E: per-RX fast-time SSMs, then the attention mixer (the default)
//   F: architecturally identical to E; run sub-frame via prefix/early exit
// `mix_uniform_mode` additionally swaps the attention mixer for uniform
// averaging on any variant, keeping everything else identical (the ablation
// baseline that discards cross-antenna phase structure).

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "raven/sim.hpp"
#include "raven/ssm.hpp"

namespace raven {

struct ModelConfig {
  // radar dims (must match the frames fed in)
  int n_rx = 4, n_tx = 2, n_c = 64, n_s = 64;
  char variant = 'E';
  bool mix_uniform_mode = false;
  // fast-time tokens per RX after adaptive pooling
  int k_tok = 1;
  // mixer
  int d = 64, heads = 8, ffn_mult = 4;
  // SSM block shape shared by fast-time and chirp blocks
  int ssm_n = 16, ssm_k = 4, ssm_e = 2;
  // backbone width
  int D = 64;
  // decoder grid before the single 2x bilinear upsample; heads emit (2H)x(2W)
  int H = 16, W = 16;
  int t_det = 8, t_seg = 8;
  int dec_ch = 32;

  int n_virtual() const { return n_rx * n_tx; }
  int y_width() const { return 2 * n_virtual(); }
  int out_h() const { return 2 * H; }
  int out_w() const { return 2 * W; }
  SsmDims fast_dims() const {
    SsmDims s;
    s.d_m = 2;
    s.e = ssm_e;
    s.n = ssm_n;
    s.k = ssm_k;
    return s;
  }
  SsmDims chirp_dims() const {
    SsmDims s;
    s.d_m = D;
    s.e = ssm_e;
    s.n = ssm_n;
    s.k = ssm_k;
    return s;
  }
  bool per_rx_params() const { return variant == 'D' || variant == 'E' || variant == 'F'; }
  bool has_mixer() const {
    return (variant == 'C' || variant == 'D' || variant == 'E' || variant == 'F') &&
           !mix_uniform_mode;
  }
  bool has_fullres_attn() const { return variant == 'B' || variant == 'D'; }

  void validate() const {
    if (variant < 'A' || variant > 'F') throw std::runtime_error("config: unknown variant");
    if (d % heads) throw std::runtime_error("config: d must divide by heads");
    if (k_tok != 1 && k_tok != 4 && k_tok != 8 && k_tok != 16)
      throw std::runtime_error("config: k_tok must be one of {1,4,8,16}");
    if (n_s % k_tok) throw std::runtime_error("config: k_tok must divide n_s");
    if (t_det < 1 || t_det > n_c || t_seg < 1 || t_seg > n_c)
      throw std::runtime_error("config: pooling lengths out of range");
    if (n_c % t_det) throw std::runtime_error("config: t_det must divide n_c");
    if (!has_mixer() && y_width() % (2 * k_tok))
      throw std::runtime_error("config: uniform mixing needs 2*k_tok | y_width");
  }
};

// ---------------------------------------------------------------------------
// Parameter registration (deterministic order, seeded init)
// ---------------------------------------------------------------------------

template <class T>
void add_model_params(ParamStore<T>& P, const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  // sqrt(3/fan_in) limits give each linear map unit variance gain (see
  // add_ssm_params); without it a network this deep halves its activation
  // scale every couple of layers and the decoders degenerate numerically.
  auto uni = [&](std::vector<int> shape, double fan_in) {
    ArrayT<T> a(std::move(shape));
    const double lim = std::sqrt(3.0 / fan_in);
    for (auto& v : a.data) v = (T)rng.uniform(-lim, lim);
    return a;
  };
  auto ones = [&](int n) {
    ArrayT<T> a({n});
    a.fill(T(1));
    return a;
  };
  auto zeros = [&](std::vector<int> shape) { return ArrayT<T>(std::move(shape)); };

  if (cfg.per_rx_params()) {
    for (int r = 0; r < cfg.n_rx; ++r)
      add_ssm_params(P, "ssm.rx" + std::to_string(r) + ".", cfg.fast_dims(), rng);
  } else {
    add_ssm_params(P, "ssm.rx_shared.", cfg.fast_dims(), rng);
  }
  if (cfg.has_fullres_attn()) {
    P.add("frattn.lift.w", uni({cfg.d, 2}, 2));
    P.add("frattn.emb", uni({cfg.n_rx, cfg.d}, cfg.d));
    P.add("frattn.ln.g", ones(cfg.d));
    P.add("frattn.ln.b", zeros({cfg.d}));
    P.add("frattn.wq", uni({cfg.d, cfg.d}, cfg.d));
    P.add("frattn.wk", uni({cfg.d, cfg.d}, cfg.d));
    P.add("frattn.wv", uni({cfg.d, cfg.d}, cfg.d));
    P.add("frattn.wo", uni({cfg.d, cfg.d}, cfg.d));
    P.add("frattn.unlift.w", uni({2, cfg.d}, cfg.d));
  }
  if (cfg.has_mixer()) {
    P.add("mixer.in.w", uni({cfg.d, 2 * cfg.k_tok}, 2 * cfg.k_tok));
    P.add("mixer.emb", uni({cfg.n_rx, cfg.d}, cfg.d));
    P.add("mixer.q", uni({cfg.n_tx, cfg.d}, cfg.d));
    P.add("mixer.lnq.g", ones(cfg.d));
    P.add("mixer.lnq.b", zeros({cfg.d}));
    // key norm is gain-only: a bias would shift every key by the same vector,
    // which adds a per-query constant to all scores and cancels in softmax
    P.add("mixer.lnk.g", ones(cfg.d));
    P.add("mixer.wq", uni({cfg.d, cfg.d}, cfg.d));
    P.add("mixer.wk", uni({cfg.d, cfg.d}, cfg.d));
    P.add("mixer.wv", uni({cfg.d, cfg.d}, cfg.d));
    P.add("mixer.wo", uni({cfg.d, cfg.d}, cfg.d));
    P.add("mixer.lnt.g", ones(cfg.d));
    P.add("mixer.lnt.b", zeros({cfg.d}));
    P.add("mixer.ffn.w1", uni({cfg.ffn_mult * cfg.d, cfg.d}, cfg.d));
    P.add("mixer.ffn.b1", zeros({cfg.ffn_mult * cfg.d}));
    P.add("mixer.ffn.w2", uni({cfg.d, cfg.ffn_mult * cfg.d}, cfg.ffn_mult * cfg.d));
    P.add("mixer.ffn.b2", zeros({cfg.d}));
    P.add("mixer.pair.wr", uni({2, cfg.d}, cfg.d));
    P.add("mixer.pair.wt", uni({2, cfg.d}, cfg.d));
    P.add("mixer.lny.g", ones(cfg.y_width()));
    P.add("mixer.lny.b", zeros({cfg.y_width()}));
  }
  // entry norm equalizes the two mixing paths: the attention mixer already
  // emits normalized rows, the uniform average does not
  P.add("backbone.in.g", ones(cfg.y_width()));
  P.add("backbone.in.b", zeros({cfg.y_width()}));
  P.add("backbone.red.w", uni({cfg.D, cfg.y_width()}, cfg.y_width()));
  P.add("backbone.red.b", zeros({cfg.D}));
  P.add("backbone.pre.w", uni({cfg.D, cfg.D}, cfg.D));
  P.add("backbone.pre.b", zeros({cfg.D}));
  add_ssm_params(P, "ssm.chirp.", cfg.chirp_dims(), rng);

  auto add_decoder = [&](const std::string& pre, int t_pool) {
    // entry norm makes the branch invariant to the encoder's output scale,
    // which keeps the conv stack's own norms well-conditioned from step 0
    P.add(pre + "in.g", ones(cfg.D));
    P.add(pre + "in.b", zeros({cfg.D}));
    P.add(pre + "proj.w", uni({cfg.H * cfg.W, cfg.D}, cfg.D));
    P.add(pre + "proj.b", zeros({cfg.H * cfg.W}));
    P.add(pre + "c1.w", uni({cfg.dec_ch, t_pool, 3, 3}, (double)t_pool * 9));
    P.add(pre + "c1.b", zeros({cfg.dec_ch}));
    P.add(pre + "ln1.g", ones(cfg.dec_ch));
    P.add(pre + "ln1.b", zeros({cfg.dec_ch}));
    P.add(pre + "c2.w", uni({cfg.dec_ch, cfg.dec_ch, 3, 3}, (double)cfg.dec_ch * 9));
    P.add(pre + "c2.b", zeros({cfg.dec_ch}));
    P.add(pre + "ln2.g", ones(cfg.dec_ch));
    P.add(pre + "ln2.b", zeros({cfg.dec_ch}));
  };
  add_decoder("det.", cfg.t_det);
  P.add("det.p.w", uni({1, cfg.dec_ch, 1, 1}, cfg.dec_ch));
  // start the heatmap near a low prior probability so focal training is calm
  ArrayT<T> pb({1});
  pb.data[0] = (T)-4.59;  // sigmoid ~ 0.01
  P.add("det.p.b", std::move(pb));
  P.add("det.r.w", uni({2, cfg.dec_ch, 1, 1}, cfg.dec_ch));
  P.add("det.r.b", zeros({2}));
  add_decoder("seg.", cfg.t_seg);
  P.add("seg.m.w", uni({1, cfg.dec_ch, 1, 1}, cfg.dec_ch));
  ArrayT<T> mb({1});
  mb.data[0] = (T)-2.0;  // sigmoid ~ 0.12, near typical occupancy
  P.add("seg.m.b", std::move(mb));
}

// ---------------------------------------------------------------------------
// Input plumbing
// ---------------------------------------------------------------------------

// I/Q sequence of one receiver across chirps [k0, k1): rows (chirp, sample).
template <class T>
ArrayT<T> rx_sequence(const AdcFrame& frame, int r, int k0, int k1) {
  const int NS = frame.cfg.n_samples;
  ArrayT<T> out({(k1 - k0) * NS, 2});
  const int stride = 2 * frame.cfg.n_rx;
  for (int k = k0; k < k1; ++k)
    for (int n = 0; n < NS; ++n) {
      const size_t src = ((size_t)k * NS + n) * stride + 2 * r;
      out.data[((size_t)(k - k0) * NS + n) * 2 + 0] = (T)frame.data.data[src];
      out.data[((size_t)(k - k0) * NS + n) * 2 + 1] = (T)frame.data.data[src + 1];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Stages (all tape-level and differentiable)
// ---------------------------------------------------------------------------

// Multi-head attention core shared by the mixer and the full-resolution
// variant: queries/keys pre-normed by the caller, values raw.
template <class T>
VarT<T> attention_blocks(typename ParamStore<T>::Bind& p, const std::string& pre, VarT<T> q,
                         VarT<T> k, VarT<T> v, int blocks, int heads) {
  const int d = q.val().cols();
  const int dh = d / heads;
  VarT<T> qp = matmul(q, p(pre + "wq"), false, true);
  VarT<T> kp = matmul(k, p(pre + "wk"), false, true);
  VarT<T> vp = matmul(v, p(pre + "wv"), false, true);
  std::vector<VarT<T>> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    VarT<T> qh = slice_cols(qp, h * dh, (h + 1) * dh);
    VarT<T> kh = slice_cols(kp, h * dh, (h + 1) * dh);
    VarT<T> vh = slice_cols(vp, h * dh, (h + 1) * dh);
    VarT<T> att = softmax_rows(scale(bmm_nt(qh, kh, blocks), T(1) / std::sqrt((T)dh)));
    outs.push_back(bmm_nn(att, vh, blocks));
  }
  return matmul(concat_cols(outs), p(pre + "wo"), false, true);
}

// Cross-antenna mixer for NC chirps at once.
// F: [(chirp, rx) rows, 2*k_tok] -> y: [NC, 2*n_rx*n_tx].
template <class T>
VarT<T> antenna_mixer(typename ParamStore<T>::Bind& p, const ModelConfig& cfg, VarT<T> F,
                      int NC) {
  VarT<T> H = add(matmul(F, p("mixer.in.w"), false, true), tile_rows(p("mixer.emb"), NC));
  VarT<T> Hn = layer_norm(H, p("mixer.lnk.g"),
                          F.tape->constant(ArrayT<T>({cfg.d})));  // bias-free, see init
  VarT<T> Qn = layer_norm(p("mixer.q"), p("mixer.lnq.g"), p("mixer.lnq.b"));
  VarT<T> attn = attention_blocks<T>(p, "mixer.", tile_rows(Qn, NC), Hn, H, NC, cfg.heads);
  VarT<T> Tt = add(tile_rows(p("mixer.q"), NC), attn);
  VarT<T> Tn = layer_norm(Tt, p("mixer.lnt.g"), p("mixer.lnt.b"));
  VarT<T> f1 = silu(add_bias(matmul(Tn, p("mixer.ffn.w1"), false, true), p("mixer.ffn.b1")));
  VarT<T> Tout = add(Tt, add_bias(matmul(f1, p("mixer.ffn.w2"), false, true),
                                  p("mixer.ffn.b2")));
  // pairwise virtual-array fusion from post-embedding RX tokens and TX tokens,
  // vectorized rx-major then LayerNormed
  VarT<T> pa = matmul(H, p("mixer.pair.wr"), false, true);     // [(k,r), 2]
  VarT<T> pb = matmul(Tout, p("mixer.pair.wt"), false, true);  // [(k,t), 2]
  VarT<T> pp = pair_sum(pa, pb, NC);                           // [(k,r,t), 2]
  VarT<T> y = reshape(pp, {NC, cfg.y_width()});
  return layer_norm(y, p("mixer.lny.g"), p("mixer.lny.b"));
}

// Parameter-free baseline: average over RX, cycle to the mixer's width.
template <class T>
VarT<T> mix_uniform(const ModelConfig& cfg, VarT<T> F) {
  VarT<T> m = block_mean_rows(F, cfg.n_rx);  // [NC, 2*k_tok]
  return tile_cols(m, cfg.y_width() / (2 * cfg.k_tok));
}

// Full-fast-time-resolution self-attention over all (rx, sample) tokens of
// each chirp (ablation variants B/D). X: [(chirp,(rx,sample)) rows, 2].
template <class T>
VarT<T> full_res_attention(typename ParamStore<T>::Bind& p, const ModelConfig& cfg, VarT<T> X,
                           int NC) {
  const int NS = cfg.n_s;
  VarT<T> lift = matmul(X, p("frattn.lift.w"), false, true);  // [(k,r,n), d]
  VarT<T> emb = tile_rows(repeat_each_row(p("frattn.emb"), NS), NC);
  VarT<T> T0 = add(lift, emb);
  VarT<T> Tn = layer_norm(T0, p("frattn.ln.g"), p("frattn.ln.b"));
  VarT<T> attn = attention_blocks<T>(p, "frattn.", Tn, Tn, T0, NC, cfg.heads);
  return add(X, matmul(attn, p("frattn.unlift.w"), false, true));  // [(k,r,n), 2]
}

// Everything the decoders need, produced once per frame.
template <class T>
struct EncodeOut {
  VarT<T> Z;  // [NC, D] causal chirp states
  VarT<T> Y;  // [NC, 2*n_rx*n_tx] mixed per-chirp features
  VarT<T> F;  // [(chirp, rx) rows, 2*k_tok] fast-time tokens
};

// Encodes chirps [0, NC) of a frame. NC defaults to the full frame; streaming
// uses NC=1 windows, which produces the same rows because every stage is
// row-causal or per-chirp.
template <class T>
EncodeOut<T> encode_frame(typename ParamStore<T>::Bind& p, const ModelConfig& cfg, Tape<T>& t,
                          const AdcFrame& frame, int k0 = 0, int k1 = -1) {
  cfg.validate();
  if (frame.cfg.n_rx != cfg.n_rx || frame.cfg.n_samples != cfg.n_s)
    throw std::runtime_error("encode: frame dims do not match config");
  if (k1 < 0) k1 = frame.cfg.n_chirps;
  const int NC = k1 - k0, R = cfg.n_rx, NS = cfg.n_s;

  std::vector<VarT<T>> seqs;  // per RX [NC*NS, 2]
  if (cfg.has_fullres_attn()) {
    ArrayT<T> all({R * NC * NS, 2});  // rx-major blocks
    for (int r = 0; r < R; ++r) {
      ArrayT<T> one = rx_sequence<T>(frame, r, k0, k1);
      std::copy(one.data.begin(), one.data.end(),
                all.data.begin() + (size_t)r * NC * NS * 2);
    }
    VarT<T> Xkr = transpose_blocks(t.constant(std::move(all)), R, NC, NS);  // (k,r,n)
    VarT<T> mixed = full_res_attention<T>(p, cfg, Xkr, NC);
    VarT<T> Xr = transpose_blocks(mixed, NC, R, NS);  // back to rx-major
    for (int r = 0; r < R; ++r) seqs.push_back(slice_rows(Xr, r * NC * NS, (r + 1) * NC * NS));
  } else {
    for (int r = 0; r < R; ++r) seqs.push_back(t.constant(rx_sequence<T>(frame, r, k0, k1)));
  }

  std::vector<VarT<T>> toks;  // per RX [NC, 2*k_tok]
  for (int r = 0; r < R; ++r) {
    const std::string pre =
        cfg.per_rx_params() ? "ssm.rx" + std::to_string(r) + "." : "ssm.rx_shared.";
    VarT<T> z = ssm_forward<T>(p, pre, seqs[r], cfg.fast_dims(), NC);
    VarT<T> pooled = block_mean_rows(z, NS / cfg.k_tok);  // [NC*k_tok, 2]
    toks.push_back(reshape(pooled, {NC, 2 * cfg.k_tok}));
  }
  VarT<T> F = transpose_blocks(concat_rows(toks), R, NC, 1);  // [(k,r), 2K]
  VarT<T> Y = cfg.has_mixer() ? antenna_mixer<T>(p, cfg, F, NC) : mix_uniform<T>(cfg, F);
  VarT<T> Yn = layer_norm(Y, p("backbone.in.g"), p("backbone.in.b"));
  VarT<T> h1 =
      silu(add_bias(matmul(Yn, p("backbone.red.w"), false, true), p("backbone.red.b")));
  VarT<T> h2 =
      silu(add_bias(matmul(h1, p("backbone.pre.w"), false, true), p("backbone.pre.b")));
  VarT<T> Z = ssm_forward<T>(p, "ssm.chirp.", h2, cfg.chirp_dims(), 1);
  return {Z, Y, F};
}

// ---------------------------------------------------------------------------
// Decoders
// ---------------------------------------------------------------------------

template <class T>
struct DetVars {
  VarT<T> p;    // [1, 1, 2H, 2W] post-sigmoid
  VarT<T> off;  // [1, 2, 2H, 2W] raw cell-unit offsets
};

template <class T>
VarT<T> conv_ln_silu(typename ParamStore<T>::Bind& p, const std::string& wname,
                     const std::string& lname, VarT<T> x, int H, int W) {
  // x: [1, Cin, H, W] -> [Cout, H, W]
  VarT<T> c = conv2d(x, p(wname + ".w"), p(wname + ".b"), 1, 1);
  const int C = c.val().dim(1);
  VarT<T> flat = chw_to_hwc(reshape(c, {C, H, W}));  // [H*W, C]
  VarT<T> n = layer_norm(flat, p(lname + ".g"), p(lname + ".b"));
  return silu(hwc_to_chw(n, H, W));
}

// Decodes a chirp-state prefix into heatmap + offsets. Zp: [L, D], L >= t_det.
template <class T>
DetVars<T> decode_det(typename ParamStore<T>::Bind& p, const ModelConfig& cfg, VarT<T> Zp) {
  const int L = Zp.val().rows();
  if (L < cfg.t_det) throw std::runtime_error("decode_det: prefix shorter than t_det");
  VarT<T> Zn = layer_norm(Zp, p("det.in.g"), p("det.in.b"));
  VarT<T> U = add_bias(matmul(Zn, p("det.proj.w"), false, true), p("det.proj.b"));
  VarT<T> S = pool_rows(U, cfg.t_det);  // [t_det, H*W]
  VarT<T> g0 = reshape(S, {1, cfg.t_det, cfg.H, cfg.W});
  VarT<T> a1 = conv_ln_silu<T>(p, "det.c1", "det.ln1", g0, cfg.H, cfg.W);
  VarT<T> a2 = conv_ln_silu<T>(p, "det.c2", "det.ln2",
                               reshape(a1, {1, cfg.dec_ch, cfg.H, cfg.W}), cfg.H, cfg.W);
  VarT<T> up = reshape(upsample2x(a2), {1, cfg.dec_ch, cfg.out_h(), cfg.out_w()});
  VarT<T> ph = sigmoid(conv2d(up, p("det.p.w"), p("det.p.b"), 1, 0));
  VarT<T> rh = conv2d(up, p("det.r.w"), p("det.r.b"), 1, 0);
  return {ph, rh};
}

// Segmentation branch; returns logits [1, 1, 2H, 2W].
template <class T>
VarT<T> decode_seg(typename ParamStore<T>::Bind& p, const ModelConfig& cfg, VarT<T> Zp) {
  const int L = Zp.val().rows();
  if (L < cfg.t_seg) throw std::runtime_error("decode_seg: prefix shorter than t_seg");
  VarT<T> Zn = layer_norm(Zp, p("seg.in.g"), p("seg.in.b"));
  VarT<T> U = add_bias(matmul(Zn, p("seg.proj.w"), false, true), p("seg.proj.b"));
  VarT<T> S = pool_rows(U, cfg.t_seg);
  VarT<T> g0 = reshape(S, {1, cfg.t_seg, cfg.H, cfg.W});
  VarT<T> a1 = conv_ln_silu<T>(p, "seg.c1", "seg.ln1", g0, cfg.H, cfg.W);
  VarT<T> a2 = conv_ln_silu<T>(p, "seg.c2", "seg.ln2",
                               reshape(a1, {1, cfg.dec_ch, cfg.H, cfg.W}), cfg.H, cfg.W);
  VarT<T> up = reshape(upsample2x(a2), {1, cfg.dec_ch, cfg.out_h(), cfg.out_w()});
  return conv2d(up, p("seg.m.w"), p("seg.m.b"), 1, 0);
}

// ---------------------------------------------------------------------------
// Plain-array outputs and whole-frame inference
// ---------------------------------------------------------------------------

struct DetOutput {
  Arr p;    // [2H, 2W]
  Arr off;  // [2, 2H, 2W]
};
struct SegOutput {
  Arr logits;  // [2H, 2W]
};
struct ForwardResult {
  DetOutput det;
  SegOutput seg;
  Arr Z;  // [NC, D]
};

// Full or prefix forward. prefix_L < 0 means the whole frame; otherwise the
// decoders read rows [0, prefix_L) of the chirp states (the encode itself is
// causal, so sliced full-frame states equal truncated-input states).
inline ForwardResult forward_frame(Params& P, const ModelConfig& cfg, const AdcFrame& frame,
                                   int prefix_L = -1) {
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  EncodeOut<float> enc = encode_frame<float>(bind, cfg, tape, frame);
  const int NC = enc.Z.val().rows();
  const int L = prefix_L < 0 ? NC : prefix_L;
  if (L < 1 || L > NC) throw std::runtime_error("forward: bad prefix length");
  VarT<float> Zp = L == NC ? enc.Z : slice_rows(enc.Z, 0, L);
  DetVars<float> dv = decode_det<float>(bind, cfg, Zp);
  VarT<float> sv = decode_seg<float>(bind, cfg, Zp);
  ForwardResult out;
  out.det.p = dv.p.val().reshaped({cfg.out_h(), cfg.out_w()});
  out.det.off = dv.off.val().reshaped({2, cfg.out_h(), cfg.out_w()});
  out.seg.logits = sv.val().reshaped({cfg.out_h(), cfg.out_w()});
  out.Z = enc.Z.val();
  return out;
}

// Decode detections from a streamed/accumulated chirp-state matrix without
// re-running the encoder.
inline ForwardResult decode_from_states(Params& P, const ModelConfig& cfg, Arr Z) {
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  VarT<float> Zp = tape.constant(Z);
  DetVars<float> dv = decode_det<float>(bind, cfg, Zp);
  VarT<float> sv = decode_seg<float>(bind, cfg, Zp);
  ForwardResult out;
  out.det.p = dv.p.val().reshaped({cfg.out_h(), cfg.out_w()});
  out.det.off = dv.off.val().reshaped({2, cfg.out_h(), cfg.out_w()});
  out.seg.logits = sv.val().reshaped({cfg.out_h(), cfg.out_w()});
  out.Z = std::move(Z);
  return out;
}

// ---------------------------------------------------------------------------
// Streaming mode: chirps arrive one at a time. Fast-time encoding and mixing
// are per-chirp computations and run as 1-chirp batches; only the chirp-axis
// SSM carries state, stepped through the same kernels as the batched scan.
// ---------------------------------------------------------------------------

struct StreamState {
  int k = 0;
  SsmState chirp_state;
  Arr Z;  // [k, D] grows as chirps arrive

  void reset(const ModelConfig& cfg) {
    k = 0;
    chirp_state.reset(cfg.chirp_dims());
    Z = Arr();
    Z.shape = {0, cfg.D};  // rows grow as chirps arrive
  }
};

// Feeds chirp `k` of `frame` into the stream; appends one row to st.Z.
inline void stream_push_chirp(Params& P, const ModelConfig& cfg, const AdcFrame& frame,
                              StreamState& st) {
  const int k = st.k;
  if (k >= frame.cfg.n_chirps) throw std::runtime_error("stream: past end of frame");
  Tape<float> tape;
  Params::Bind bind(P, tape, false);
  // per-chirp stages as a 1-chirp batch
  EncodeOut<float> enc{};
  {
    std::vector<VarT<float>> seqs;
    const int R = cfg.n_rx, NS = cfg.n_s;
    if (cfg.has_fullres_attn()) {
      ArrayT<float> all({R * NS, 2});
      for (int r = 0; r < R; ++r) {
        ArrayT<float> one = rx_sequence<float>(frame, r, k, k + 1);
        std::copy(one.data.begin(), one.data.end(), all.data.begin() + (size_t)r * NS * 2);
      }
      VarT<float> Xkr = transpose_blocks(tape.constant(std::move(all)), R, 1, NS);
      VarT<float> mixed = full_res_attention<float>(bind, cfg, Xkr, 1);
      VarT<float> Xr = transpose_blocks(mixed, 1, R, NS);
      for (int r = 0; r < R; ++r) seqs.push_back(slice_rows(Xr, r * NS, (r + 1) * NS));
    } else {
      for (int r = 0; r < R; ++r)
        seqs.push_back(tape.constant(rx_sequence<float>(frame, r, k, k + 1)));
    }
    std::vector<VarT<float>> toks;
    for (int r = 0; r < R; ++r) {
      const std::string pre =
          cfg.per_rx_params() ? "ssm.rx" + std::to_string(r) + "." : "ssm.rx_shared.";
      VarT<float> z = ssm_forward<float>(bind, pre, seqs[r], cfg.fast_dims(), 1);
      toks.push_back(reshape(block_mean_rows(z, NS / cfg.k_tok), {1, 2 * cfg.k_tok}));
    }
    VarT<float> F = transpose_blocks(concat_rows(toks), R, 1, 1);
    VarT<float> Y =
        cfg.has_mixer() ? antenna_mixer<float>(bind, cfg, F, 1) : mix_uniform<float>(cfg, F);
    VarT<float> Yn = layer_norm(Y, bind("backbone.in.g"), bind("backbone.in.b"));
    VarT<float> h1 = silu(
        add_bias(matmul(Yn, bind("backbone.red.w"), false, true), bind("backbone.red.b")));
    enc.Y = silu(
        add_bias(matmul(h1, bind("backbone.pre.w"), false, true), bind("backbone.pre.b")));
  }
  // chirp-axis SSM single step on raw arrays
  const Arr& row = enc.Y.val();
  std::vector<float> zrow(cfg.D);
  SsmWeights W(P, "ssm.chirp.", cfg.chirp_dims());
  ssm_step(W, st.chirp_state, row.ptr(), zrow.data());
  st.Z.shape[0] += 1;
  st.Z.data.insert(st.Z.data.end(), zrow.begin(), zrow.end());
  st.k += 1;
}

// ---------------------------------------------------------------------------
// Peak extraction
// ---------------------------------------------------------------------------

struct Detection {
  double x = 0, y = 0;  // metres, grid convention: x cross-range, y down-range
  double score = 0;
};

// Local maxima of the heatmap above `thresh` (8-neighbourhood, ties count as
// maxima), greedy NMS within `nms_radius` cells, offsets applied in cells.
inline std::vector<Detection> decode_detections(const DetOutput& det, double thresh,
                                                double nms_radius, const GridSpec& grid) {
  const int H = det.p.rows(), W = det.p.cols();
  struct Peak {
    int r, c;
    float v;
  };
  std::vector<Peak> peaks;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const float v = det.p.at(r, c);
      if (v <= thresh) continue;
      bool is_max = true;
      for (int dr = -1; dr <= 1 && is_max; ++dr)
        for (int dc = -1; dc <= 1 && is_max; ++dc) {
          if (!dr && !dc) continue;
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          if (det.p.at(rr, cc) > v) is_max = false;
        }
      if (is_max) peaks.push_back({r, c, v});
    }
  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    return a.v > b.v;
  });
  std::vector<Detection> out;
  std::vector<Peak> kept;
  const double cell = grid.cell_m();
  for (const Peak& p : peaks) {
    bool clear = true;
    for (const Peak& q : kept) {
      const double dr = p.r - q.r, dc = p.c - q.c;
      if (dr * dr + dc * dc <= nms_radius * nms_radius) {
        clear = false;
        break;
      }
    }
    if (!clear) continue;
    kept.push_back(p);
    const double ox = det.off.data[(size_t)0 * H * W + (size_t)p.r * W + p.c];
    const double oy = det.off.data[(size_t)1 * H * W + (size_t)p.r * W + p.c];
    Detection d;
    d.x = (p.c + 0.5 + ox) * cell - grid.extent_m / 2;
    d.y = (p.r + 0.5 + oy) * cell;
    d.score = p.v;
    out.push_back(d);
  }
  return out;
}

}  // namespace raven
