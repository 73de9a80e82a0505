#pragma once

// Training: detection loss (focal heatmap + masked smooth-L1 offsets),
// segmentation loss (BCE + soft-Jaccard), the multi-prefix supervision
// objective that decodes several chirp prefixes of one encoded frame through
// the shared decoders, and a seeded AdamW loop with a JSON-lines metrics log.

#include <cstdint>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raven/metrics.hpp"
#include "raven/model.hpp"
#include "raven/rng.hpp"

namespace raven {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 5e-6;
  int batch_size = 8;
  int epochs = 10;
  // Supervised prefix lengths; empty means {n_c/8, n_c/4, n_c/2, n_c}.
  std::vector<int> prefix_set;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0;
  double w_det = 1.0;
  double w_seg = 1.0;
  bool prefix_supervision = true;
  uint64_t seed = 0;
  // Operating point for the per-epoch validation metrics.
  double det_threshold = 0.3;
  double nms_radius_cells = 2.0;
  double match_radius_m = 0.5;

  // Resolved prefix list. Must be strictly ascending, positive, and end at
  // n_c so the last supervised view is the whole frame.
  std::vector<int> prefixes(int n_c) const {
    std::vector<int> L = prefix_set;
    if (L.empty()) L = {n_c / 8, n_c / 4, n_c / 2, n_c};
    if (L.empty() || L.front() <= 0) throw std::runtime_error("prefix set: entries must be positive");
    for (size_t i = 1; i < L.size(); ++i)
      if (L[i] <= L[i - 1]) throw std::runtime_error("prefix set: must be strictly ascending");
    if (L.back() != n_c) throw std::runtime_error("prefix set: last entry must equal n_c");
    return L;
  }
};

// ---------------------------------------------------------------------------
// Losses (tape-level, templated so gradient checks can run in double)
// ---------------------------------------------------------------------------

// Focal binary cross-entropy against a soft target heatmap, averaged over
// cells. p holds probabilities in (0,1); they are clipped to
// [1e-6, 1 - 1e-6] before the logs.
template <class T>
VarT<T> focal_bce(VarT<T> p, const ArrayT<T>& target, T alpha, T gamma) {
  if (!p.val().same_shape(target)) throw std::runtime_error("focal_bce: shape mismatch");
  Tape<T>& t = *p.tape;
  (void)t;
  const T eps = T(1e-6);
  VarT<T> pc = clip(p, eps, T(1) - eps);
  ArrayT<T> a_pos(target.shape), a_neg(target.shape);
  for (int64_t i = 0; i < target.numel(); ++i) {
    a_pos.data[i] = alpha * target.data[i];
    a_neg.data[i] = (T(1) - alpha) * (T(1) - target.data[i]);
  }
  VarT<T> q = affine(pc, T(-1), T(1));  // 1 - p
  VarT<T> pos = dot_const(mul(powc(q, gamma), log_(pc)), std::move(a_pos));
  VarT<T> neg_ = dot_const(mul(powc(pc, gamma), log_(q)), std::move(a_neg));
  return scale(add(pos, neg_), -T(1) / T(target.numel()));
}

// Smooth-L1 on the offset channels, evaluated only at cells whose heatmap
// target exceeds 0.5 and averaged over those cells (both channels of a cell
// count as one positive). Returns a zero constant when nothing is positive.
template <class T>
VarT<T> offset_smooth_l1(VarT<T> off, const ArrayT<T>& off_target, const ArrayT<T>& heat_target,
                         T beta) {
  if (!off.val().same_shape(off_target))
    throw std::runtime_error("offset_smooth_l1: shape mismatch");
  if (off_target.numel() != 2 * heat_target.numel())
    throw std::runtime_error("offset_smooth_l1: offsets must have two channels per cell");
  const int64_t n = heat_target.numel();
  int64_t n_pos = 0;
  for (int64_t i = 0; i < n; ++i)
    if (heat_target.data[i] > T(0.5)) ++n_pos;
  if (n_pos == 0) return off.tape->constant(ArrayT<T>({1}));
  ArrayT<T> w(off_target.shape);
  const T inv = T(1) / T(n_pos);
  for (int64_t i = 0; i < n; ++i)
    if (heat_target.data[i] > T(0.5)) {
      w.data[i] = inv;
      w.data[n + i] = inv;
    }
  return huber_masked(off, off_target, std::move(w), beta);
}

// Full detection loss for decoder outputs (any leading singleton dims are
// flattened away).
template <class T>
VarT<T> det_loss(DetVars<T> pred, const ArrayT<T>& heat, const ArrayT<T>& off, T alpha, T gamma,
                 T beta) {
  const int Ho = heat.rows(), Wo = heat.cols();
  VarT<T> p = reshape(pred.p, {Ho, Wo});
  VarT<T> o = reshape(pred.off, {2, Ho, Wo});
  return add(focal_bce(p, heat, alpha, gamma), offset_smooth_l1(o, off, heat, beta));
}

// BCE plus (1 - soft-Jaccard). The BCE term clips probabilities away from
// {0,1}; the Jaccard overlap uses raw sigmoid probabilities with an epsilon
// in numerator and denominator so an empty mask with vanishing predictions
// scores a vanishing loss.
template <class T>
VarT<T> seg_loss(VarT<T> logits, const ArrayT<T>& mask) {
  const int Ho = mask.rows(), Wo = mask.cols();
  VarT<T> lg = reshape(logits, {Ho, Wo});
  Tape<T>& t = *logits.tape;
  const T eps = T(1e-6);
  VarT<T> pr = sigmoid(lg);
  VarT<T> pc = clip(pr, eps, T(1) - eps);
  ArrayT<T> m = mask;
  ArrayT<T> not_m(mask.shape);
  T sum_m = 0;
  for (int64_t i = 0; i < m.numel(); ++i) {
    not_m.data[i] = T(1) - m.data[i];
    sum_m += m.data[i];
  }
  VarT<T> bce = scale(add(dot_const(log_(pc), std::move(m)),
                          dot_const(log_(affine(pc, T(-1), T(1))), std::move(not_m))),
                      -T(1) / T(mask.numel()));
  VarT<T> inter = dot_const(pr, mask);
  ArrayT<T> c({1});
  c.data[0] = sum_m + eps;
  VarT<T> denom = add(sub(sum_all(pr), inter), t.constant(std::move(c)));
  VarT<T> jac = div(affine(inter, T(1), eps), denom);
  return add(bce, affine(jac, T(-1), T(1)));
}

// ---------------------------------------------------------------------------
// Multi-prefix objective
// ---------------------------------------------------------------------------

template <class T>
struct PrefixLoss {
  VarT<T> total;  // w_det * det + w_seg * seg
  VarT<T> det;    // sum over prefixes, unweighted
  VarT<T> seg;
};

// Encodes the frame once and decodes every requested chirp prefix through the
// same decoder weights, summing the per-prefix losses against the single
// frame ground truth.
template <class T>
PrefixLoss<T> multi_prefix_loss(typename ParamStore<T>::Bind& p, const ModelConfig& cfg,
                                Tape<T>& t, const AdcFrame& frame, const ArrayT<T>& heat,
                                const ArrayT<T>& off, const ArrayT<T>& mask,
                                const TrainConfig& tc, const std::vector<int>& prefixes) {
  if (prefixes.empty()) throw std::runtime_error("multi_prefix_loss: empty prefix list");
  const int min_l = std::max(cfg.t_det, cfg.t_seg);
  for (int L : prefixes)
    if (L < min_l || L > cfg.n_c) throw std::runtime_error("multi_prefix_loss: invalid prefix");
  EncodeOut<T> enc = encode_frame<T>(p, cfg, t, frame);
  VarT<T> det_sum, seg_sum;
  bool first = true;
  for (int L : prefixes) {
    VarT<T> Zp = (L == cfg.n_c) ? enc.Z : slice_rows(enc.Z, 0, L);
    VarT<T> dl = det_loss<T>(decode_det<T>(p, cfg, Zp), heat, off, T(tc.focal_alpha),
                             T(tc.focal_gamma), T(tc.smooth_l1_beta));
    VarT<T> sl = seg_loss<T>(decode_seg<T>(p, cfg, Zp), mask);
    if (first) {
      det_sum = dl;
      seg_sum = sl;
      first = false;
    } else {
      det_sum = add(det_sum, dl);
      seg_sum = add(seg_sum, sl);
    }
  }
  return {add(scale(det_sum, T(tc.w_det)), scale(seg_sum, T(tc.w_seg))), det_sum, seg_sum};
}

// ---------------------------------------------------------------------------
// Optimizer step with a non-finite-gradient guard
// ---------------------------------------------------------------------------

// Applies one AdamW step unless any gradient entry is non-finite, in which
// case the step is skipped and false is returned.
template <class T>
bool adam_step(AdamW<T>& opt, ParamStore<T>& P) {
  for (int i = 0; i < P.count(); ++i)
    if (!P.grad(i).all_finite()) return false;
  opt.step(P);
  return true;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainSample {
  AdcFrame frame;
  FrameLabels labels;
};

struct TrainResult {
  std::vector<std::string> log_lines;  // one JSON object per epoch
  int skipped_steps = 0;
  double last_loss_det = 0;
  double last_loss_seg = 0;
};

namespace detail_train {

inline void check_label_shapes(const ModelConfig& cfg, const FrameLabels& lb) {
  if (lb.det_p.rows() != cfg.out_h() || lb.det_p.cols() != cfg.out_w())
    throw std::runtime_error("train: label grid does not match the model output grid");
  if (lb.seg_mask.rows() != cfg.out_h() || lb.seg_mask.cols() != cfg.out_w())
    throw std::runtime_error("train: mask grid does not match the model output grid");
}

inline Arr probs_of_logits(const Arr& logits) {
  Arr p(logits.shape);
  for (int64_t i = 0; i < p.numel(); ++i) p.data[i] = kernels::sigmoid_of(logits.data[i]);
  return p;
}

}  // namespace detail_train

// Epochs of seeded-shuffle mini-batches. Per epoch the log gains one
// JSON-lines row {epoch, loss_det, loss_seg, and f1@L / miou@L for every
// supervised prefix when a validation set is given}. A non-finite loss aborts
// with a diagnostic; non-finite gradients skip the step and are counted.
inline TrainResult train(Params& P, const ModelConfig& cfg, const TrainConfig& tc,
                         const std::vector<TrainSample>& data,
                         const std::vector<TrainSample>& val, const GridSpec& grid,
                         std::ostream* log = nullptr) {
  if (data.empty()) throw std::runtime_error("train: empty dataset");
  if (tc.batch_size < 1 || tc.epochs < 0) throw std::runtime_error("train: bad batch/epochs");
  const std::vector<int> prefixes =
      tc.prefix_supervision ? tc.prefixes(cfg.n_c) : std::vector<int>{cfg.n_c};
  for (const TrainSample& s : data) detail_train::check_label_shapes(cfg, s.labels);
  for (const TrainSample& s : val) detail_train::check_label_shapes(cfg, s.labels);

  AdamW<float> opt;
  opt.lr = (float)tc.lr;
  opt.weight_decay = (float)tc.weight_decay;
  Rng shuffle_rng(tc.seed ^ 0x9E3779B97F4A7C15ULL);
  TrainResult res;

  const int n = (int)data.size();
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(idx);
    double sum_det = 0, sum_seg = 0;
    for (int start = 0; start < n; start += tc.batch_size) {
      const int nb = std::min(tc.batch_size, n - start);
      P.zero_grad();
      for (int b = 0; b < nb; ++b) {
        const TrainSample& s = data[idx[start + b]];
        Tape<float> tape;
        Params::Bind bind(P, tape, true);
        PrefixLoss<float> lp = multi_prefix_loss<float>(
            bind, cfg, tape, s.frame, s.labels.det_p, s.labels.det_off, s.labels.seg_mask, tc,
            prefixes);
        const double lv = lp.total.val().data[0];
        if (!std::isfinite(lv)) {
          std::ostringstream msg;
          msg << "train: non-finite loss " << lv << " at epoch " << (epoch + 1) << ", sample "
              << idx[start + b] << " (det=" << lp.det.val().data[0]
              << ", seg=" << lp.seg.val().data[0] << ")";
          throw std::runtime_error(msg.str());
        }
        sum_det += lp.det.val().data[0];
        sum_seg += lp.seg.val().data[0];
        tape.backward(scale(lp.total, 1.0f / (float)nb));
        bind.accumulate_grads();
      }
      if (!adam_step(opt, P)) ++res.skipped_steps;
    }
    res.last_loss_det = sum_det / n;
    res.last_loss_seg = sum_seg / n;

    nlohmann::json row;
    row["epoch"] = epoch + 1;
    row["loss_det"] = res.last_loss_det;
    row["loss_seg"] = res.last_loss_seg;
    if (res.skipped_steps > 0) row["skipped_steps"] = res.skipped_steps;
    if (!val.empty()) {
      for (int L : prefixes) {
        double f1 = 0, miou = 0;
        for (const TrainSample& s : val) {
          ForwardResult fr = forward_frame(P, cfg, s.frame, L);
          std::vector<Detection> dets =
              decode_detections(fr.det, tc.det_threshold, tc.nms_radius_cells, grid);
          f1 += det_pr(dets, s.labels.centers_xy_m, tc.match_radius_m).f1;
          miou += iou(detail_train::probs_of_logits(fr.seg.logits), s.labels.seg_mask);
        }
        row["f1@" + std::to_string(L)] = f1 / (double)val.size();
        row["miou@" + std::to_string(L)] = miou / (double)val.size();
      }
    }
    const std::string line = row.dump();
    res.log_lines.push_back(line);
    if (log) (*log) << line << "\n" << std::flush;
  }
  return res;
}

}  // namespace raven
