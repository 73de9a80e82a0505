#pragma once
// Evaluation metrics: mask overlap (Dice / IoU), point-set Chamfer distance,
// and score-ranked detection precision/recall with distance-based matching.
// All pure functions over plain arrays and point lists.

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "raven/array.hpp"
#include "raven/model.hpp"

namespace raven {

constexpr double kMaskThreshold = 0.5;

namespace detail_metrics {

struct Overlap {
  int64_t inter = 0, a = 0, b = 0;
};

inline Overlap mask_overlap(const Arr& pa, const Arr& pb) {
  if (pa.shape != pb.shape) throw std::runtime_error("mask metrics: shape mismatch");
  Overlap o;
  for (int64_t i = 0; i < pa.numel(); ++i) {
    const bool a = pa.data[(size_t)i] > kMaskThreshold;
    const bool b = pb.data[(size_t)i] > kMaskThreshold;
    o.a += a;
    o.b += b;
    o.inter += (a && b);
  }
  return o;
}

}  // namespace detail_metrics

// Dice = 2|A∩B| / (|A|+|B|); probabilities are binarized at 0.5 first.
// Two empty masks agree perfectly and score 1.
inline double dice(const Arr& pred, const Arr& truth) {
  const auto o = detail_metrics::mask_overlap(pred, truth);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * (double)o.inter / (double)(o.a + o.b);
}

// IoU = |A∩B| / |A∪B|, same conventions as dice().
inline double iou(const Arr& pred, const Arr& truth) {
  const auto o = detail_metrics::mask_overlap(pred, truth);
  const int64_t uni = o.a + o.b - o.inter;
  if (uni == 0) return 1.0;
  return (double)o.inter / (double)uni;
}

using PointXY = std::array<double, 2>;

struct ChamferResult {
  double dist = 0;       // metres
  bool one_empty = false;   // scored as empty_dist
  bool both_empty = false;  // scored as 0, flagged
};

// Symmetric Chamfer distance: half the sum of mean nearest-neighbour
// distances in each direction. With exactly one empty set the caller-supplied
// empty_dist (typically the scene-extent diagonal) is reported.
inline ChamferResult chamfer(const std::vector<PointXY>& a, const std::vector<PointXY>& b,
                             double empty_dist) {
  ChamferResult res;
  if (a.empty() && b.empty()) {
    res.both_empty = true;
    return res;
  }
  if (a.empty() || b.empty()) {
    res.one_empty = true;
    res.dist = empty_dist;
    return res;
  }
  auto mean_nn = [](const std::vector<PointXY>& from, const std::vector<PointXY>& to) {
    double s = 0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to)
        best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1]));
      s += best;
    }
    return s / (double)from.size();
  };
  res.dist = 0.5 * (mean_nn(a, b) + mean_nn(b, a));
  return res;
}

struct PrMetrics {
  double ap = 0;      // 11-point interpolated area under precision-recall
  double ar = 0;      // recall over the supplied (operating-point) predictions
  double f1 = 0;
  double re_m = 0;    // mean |range error| over matched pairs, metres
  double ae_deg = 0;  // mean |azimuth error| over matched pairs, degrees
  int tp = 0, fp = 0, fn = 0;
};

// Greedy one-to-one matching in descending score order: each prediction takes
// the nearest unclaimed truth within match_radius. The full supplied list is
// the operating point for AR/F1/RE/AE; AP sweeps score-ordered prefixes.
inline PrMetrics det_pr(std::vector<Detection> preds, const std::vector<PointXY>& gts,
                        double match_radius) {
  if (match_radius <= 0) throw std::runtime_error("det_pr: match_radius must be positive");
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<bool> taken(gts.size(), false);
  std::vector<bool> is_tp(preds.size(), false);
  std::vector<int> match_of(preds.size(), -1);
  for (size_t i = 0; i < preds.size(); ++i) {
    double best = match_radius;
    int pick = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      if (taken[j]) continue;
      const double d = std::hypot(preds[i].x - gts[j][0], preds[i].y - gts[j][1]);
      if (d <= best) {
        best = d;
        pick = (int)j;
      }
    }
    if (pick >= 0) {
      taken[(size_t)pick] = true;
      is_tp[i] = true;
      match_of[i] = pick;
    }
  }

  PrMetrics m;
  for (bool t : is_tp) (t ? m.tp : m.fp)++;
  m.fn = (int)gts.size() - m.tp;

  if (gts.empty() && preds.empty()) {
    m.ap = m.ar = m.f1 = 1.0;  // vacuously perfect
    return m;
  }

  // precision/recall over score-ordered prefixes -> 11-point interpolated AP
  if (!gts.empty()) {
    std::vector<double> prec(preds.size()), rec(preds.size());
    int ctp = 0;
    for (size_t k = 0; k < preds.size(); ++k) {
      ctp += is_tp[k];
      prec[k] = (double)ctp / (double)(k + 1);
      rec[k] = (double)ctp / (double)gts.size();
    }
    double ap = 0;
    for (int ri = 0; ri <= 10; ++ri) {
      const double r = ri / 10.0;
      double best = 0;
      for (size_t k = 0; k < preds.size(); ++k)
        if (rec[k] >= r) best = std::max(best, prec[k]);
      ap += best;
    }
    m.ap = ap / 11.0;
    m.ar = preds.empty() ? 0.0 : rec.back();
  }

  const double prec_op =
      preds.empty() ? 0.0 : (double)m.tp / (double)preds.size();
  m.f1 = (prec_op + m.ar > 0) ? 2 * prec_op * m.ar / (prec_op + m.ar) : 0.0;

  if (m.tp > 0) {
    double se = 0, sa = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
      if (!is_tp[i]) continue;
      const auto& g = gts[(size_t)match_of[i]];
      const double rp = std::hypot(preds[i].x, preds[i].y);
      const double rg = std::hypot(g[0], g[1]);
      // azimuth from boresight: x is cross-range, y down-range
      const double ap_ = std::atan2(preds[i].x, preds[i].y);
      const double ag = std::atan2(g[0], g[1]);
      se += std::abs(rp - rg);
      sa += std::abs(ap_ - ag) * 180.0 / M_PI;
    }
    m.re_m = se / m.tp;
    m.ae_deg = sa / m.tp;
  }
  return m;
}

}  // namespace raven
