#pragma once

// Early exit along the chirp axis: per-chirp novelty of the streamed backbone
// state (minimum cosine distance to all earlier states, or a normalized
// softmax-entropy alternative), a block-averaged stopping rule, threshold
// calibration by the max-distance-to-chord knee of the mean novelty curve,
// and a streaming driver that stops as soon as a block qualifies and decodes
// from the accumulated prefix.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "raven/macs.hpp"
#include "raven/model.hpp"

namespace raven {

enum class ExitRule { kCosine, kEntropy };

struct ExitConfig {
  // Block-mean novelty at or below tau triggers the exit. tau <= 0 disables
  // early exit entirely (the stream always runs the whole frame).
  double tau = 0.2;
  int K = 8;  // block size in chirps; must divide n_c
  ExitRule rule = ExitRule::kCosine;
  int min_blocks = 1;

  void validate(const ModelConfig& cfg) const {
    if (K < 1 || cfg.n_c % K != 0) throw std::runtime_error("ExitConfig: K must divide n_c");
    if (min_blocks < 1) throw std::runtime_error("ExitConfig: min_blocks must be >= 1");
    if (tau >= 2.0) throw std::runtime_error("ExitConfig: tau must be below 2");
  }
};

// ---------------------------------------------------------------------------
// Novelty scores
// ---------------------------------------------------------------------------

// Minimum cosine distance 1 - cos(z, prior) over the prior set, in [0, 2].
// Degenerate pairs (either vector with zero norm) score distance 1; an empty
// prior set scores 1 (a first observation is maximally novel).
inline double novelty(const std::vector<double>& z, const std::vector<std::vector<double>>& priors) {
  double zn = 0;
  for (double v : z) zn += v * v;
  zn = std::sqrt(zn);
  double best = 1.0;
  bool any = false;
  for (const std::vector<double>& p : priors) {
    if (p.size() != z.size()) throw std::runtime_error("novelty: dimension mismatch");
    double pn = 0, dot = 0;
    for (size_t i = 0; i < p.size(); ++i) {
      pn += p[i] * p[i];
      dot += z[i] * p[i];
    }
    pn = std::sqrt(pn);
    const double d = (zn == 0.0 || pn == 0.0) ? 1.0 : 1.0 - dot / (zn * pn);
    best = any ? std::min(best, d) : d;
    any = true;
  }
  return std::min(2.0, std::max(0.0, best));
}

// Shannon entropy of softmax(z), normalized by ln(dim) to [0, 1].
inline double entropy_novelty(const std::vector<double>& z) {
  if (z.size() < 2) throw std::runtime_error("entropy_novelty: needs at least 2 components");
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double denom = 0;
  for (double v : z) denom += std::exp(v - mx);
  double h = 0;
  for (double v : z) {
    const double p = std::exp(v - mx) / denom;
    if (p > 0) h -= p * std::log(p);
  }
  return h / std::log((double)z.size());
}

// ---------------------------------------------------------------------------
// Stopping rule
// ---------------------------------------------------------------------------

// Earliest block (1-based index m >= min_blocks) whose mean novelty is at or
// below tau; returns K*m clamped to the curve length (a trailing partial
// block is scored by its own mean). nullopt means no block qualifies.
inline std::optional<int> exit_index(const std::vector<double>& d, const ExitConfig& cfg) {
  if (cfg.K < 1 || cfg.min_blocks < 1) throw std::runtime_error("exit_index: bad config");
  const int n = (int)d.size();
  const int n_blocks = (n + cfg.K - 1) / cfg.K;
  for (int m = cfg.min_blocks; m <= n_blocks; ++m) {
    const int lo = (m - 1) * cfg.K;
    const int hi = std::min(m * cfg.K, n);
    double mean = 0;
    for (int i = lo; i < hi; ++i) mean += d[i];
    mean /= (double)(hi - lo);
    if (mean <= cfg.tau) return std::min(m * cfg.K, n);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Threshold calibration
// ---------------------------------------------------------------------------

struct CalibratedTau {
  double tau = 0.2;
  bool degenerate = false;  // constant mean curve; tau is the clamp midpoint
};

constexpr double kTauClampLo = 0.05;
constexpr double kTauClampHi = 0.5;

// Averages per-frame novelty curves and places tau at the knee of the mean
// curve, located by the point of maximum perpendicular distance to the chord
// between the curve's endpoints; the result is clamped to [0.05, 0.5].
inline CalibratedTau calibrate_tau(const std::vector<std::vector<double>>& curves) {
  if (curves.size() < 10)
    throw std::runtime_error("calibrate_tau: needs at least 10 calibration frames");
  size_t len = curves[0].size();
  for (const auto& c : curves) len = std::min(len, c.size());
  if (len < 3) throw std::runtime_error("calibrate_tau: curves too short");
  std::vector<double> y(len, 0.0);
  for (const auto& c : curves)
    for (size_t i = 0; i < len; ++i) y[i] += c[i];
  for (double& v : y) v /= (double)curves.size();

  const double dx = (double)(len - 1);
  const double dy = y[len - 1] - y[0];
  const double chord = std::hypot(dx, dy);
  double best = 0;
  size_t knee = 0;
  for (size_t i = 0; i < len; ++i) {
    const double dist = std::fabs(dy * (double)i - dx * (y[i] - y[0])) / chord;
    if (dist > best) {
      best = dist;
      knee = i;
    }
  }
  double span = 0;
  for (size_t i = 0; i < len; ++i) span = std::max(span, std::fabs(y[i] - y[0]));
  CalibratedTau out;
  if (best <= 1e-12 * (1.0 + span)) {
    out.tau = 0.5 * (kTauClampLo + kTauClampHi);
    out.degenerate = true;
    return out;
  }
  out.tau = std::min(kTauClampHi, std::max(kTauClampLo, y[knee]));
  return out;
}

// ---------------------------------------------------------------------------
// Streaming driver
// ---------------------------------------------------------------------------

struct ExitOutcome {
  DetOutput det;
  SegOutput seg;
  int l_exit = 0;           // chirps consumed
  bool exited = false;      // false: the stream ran the whole frame
  std::vector<double> d;    // per-chirp novelty, d[k] for chirp k+1
  MacReport macs_used;      // counted at l_exit
  MacReport macs_full;      // counted at n_c
};

namespace detail_exit {

inline std::vector<double> row_vec(const Arr& Z, int r) {
  std::vector<double> v((size_t)Z.cols());
  for (int c = 0; c < Z.cols(); ++c) v[(size_t)c] = (double)Z.at(r, c);
  return v;
}

}  // namespace detail_exit

// Streams chirps through the backbone, scoring novelty online, and stops at
// the first qualifying block boundary. Decoding from the streamed states is
// bitwise identical to a batched prefix decode at the same length. Exits are
// deferred until the prefix is long enough for both decoders.
inline ExitOutcome run_with_exit(Params& P, const ModelConfig& cfg, const AdcFrame& frame,
                                 const ExitConfig& ec) {
  ec.validate(cfg);
  const int min_len = std::max(cfg.t_det, cfg.t_seg);
  const int min_blocks_eff =
      std::max(ec.min_blocks, (min_len + ec.K - 1) / ec.K);
  ExitOutcome out;
  StreamState st;
  st.reset(cfg);
  std::vector<std::vector<double>> priors;
  int stop_at = -1;
  for (int k = 0; k < cfg.n_c; ++k) {
    stream_push_chirp(P, cfg, frame, st);
    std::vector<double> z = detail_exit::row_vec(st.Z, k);
    out.d.push_back(ec.rule == ExitRule::kCosine ? novelty(z, priors) : entropy_novelty(z));
    priors.push_back(std::move(z));
    const int len = k + 1;
    if (ec.tau > 0.0 && len % ec.K == 0) {
      const int m = len / ec.K;
      if (m >= min_blocks_eff) {
        double mean = 0;
        for (int i = len - ec.K; i < len; ++i) mean += out.d[(size_t)i];
        mean /= (double)ec.K;
        if (mean <= ec.tau) {
          stop_at = len;
          break;
        }
      }
    }
  }
  out.exited = stop_at > 0;
  out.l_exit = out.exited ? stop_at : cfg.n_c;
  ForwardResult fr = decode_from_states(P, cfg, st.Z);
  out.det = fr.det;
  out.seg = fr.seg;
  out.macs_used = count_macs(cfg, out.l_exit);
  out.macs_full = count_macs(cfg, cfg.n_c);
  return out;
}

// Calibration trace rows "frame_id,L,d_L" (header written by the caller once).
inline void write_novelty_csv(std::ostream& os, int frame_id, const std::vector<double>& d) {
  for (size_t i = 0; i < d.size(); ++i)
    os << frame_id << "," << (i + 1) << "," << d[i] << "\n";
}

}  // namespace raven
