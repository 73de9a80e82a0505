#include "raven/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace raven::dsp {

int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::vector<cd>& x, bool inverse) {
  const int n = (int)x.size();
  if (n == 0 || (n & (n - 1))) throw std::runtime_error("fft: size must be a power of two");
  // bit-reversal permutation
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * M_PI / len;
    const cd wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      cd w(1.0, 0.0);
      for (int j = 0; j < len / 2; ++j) {
        const cd u = x[i + j];
        const cd v = x[i + j + len / 2] * w;
        x[i + j] = u + v;
        x[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& v : x) v /= (double)n;
}

std::vector<cd> fft_padded(const std::vector<cd>& x) {
  std::vector<cd> out(x);
  out.resize(next_pow2((int)x.size()), cd(0, 0));
  fft_inplace(out);
  return out;
}

std::vector<double> hann_window(int n) {
  if (n == 1) return {1.0};
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / (n - 1)));
  return w;
}

// ---------------------------------------------------------------------------
// Range-Doppler
// ---------------------------------------------------------------------------

RdMap range_doppler(const AdcFrame& frame, bool window) {
  const RadarConfig& cfg = frame.cfg;
  const int Nc = cfg.n_chirps, Ns = cfg.n_samples, Ntx = cfg.n_tx, Nrx = cfg.n_rx;
  const bool ddm = cfg.multiplexing == Multiplexing::DDM;

  RdMap rd;
  rd.n_tx = Ntx;
  rd.n_rx = Nrx;
  rd.n_virt = Ntx * Nrx;
  rd.n_rng = next_pow2(Ns);
  rd.mux = cfg.multiplexing;
  rd.chirp_interval_s = cfg.chirp_interval_s;
  rd.wavelength_m = cfg.wavelength();
  const int n_slow = ddm ? Nc : Nc / Ntx;  // chirps per TX sequence
  if (n_slow < 1) throw std::runtime_error("range_doppler: not enough chirps per TX");
  rd.n_dop = next_pow2(n_slow);
  // fast-time bin: frequency resolution 1/(n_rng*T_s), range = c f/(2S)
  rd.rng_bin_m = kSpeedOfLight / (2.0 * cfg.slope() * rd.n_rng * cfg.sample_period_s);
  // slow-time bin: PRI is T_R (DDM) or Ntx*T_R (TDM sub-sequence)
  const double pri = ddm ? cfg.chirp_interval_s : Ntx * cfg.chirp_interval_s;
  rd.dop_bin_mps = cfg.wavelength() / 2.0 / (rd.n_dop * pri);
  rd.data.assign((size_t)rd.n_virt * rd.n_rng * rd.n_dop, cd(0, 0));

  const std::vector<double> wf = window ? hann_window(Ns) : std::vector<double>(Ns, 1.0);
  const std::vector<double> ws =
      window ? hann_window(n_slow) : std::vector<double>(n_slow, 1.0);

  // fast-time FFT per (chirp, rx)
  std::vector<std::vector<cd>> fast((size_t)Nc * Nrx);
  for (int k = 0; k < Nc; ++k)
    for (int r = 0; r < Nrx; ++r) {
      std::vector<cd> row(Ns);
      for (int n = 0; n < Ns; ++n)
        row[n] = cd(frame.re(k, n, r), frame.im(k, n, r)) * wf[n];
      fast[(size_t)k * Nrx + r] = fft_padded(row);
    }

  // slow-time FFT per (tx hypothesis, rx, range bin)
  for (int t = 0; t < Ntx; ++t)
    for (int r = 0; r < Nrx; ++r) {
      const int v = t * Nrx + r;
      for (int ir = 0; ir < rd.n_rng; ++ir) {
        std::vector<cd> slow(rd.n_dop, cd(0, 0));
        if (ddm) {
          // undo this TX's Doppler-division code, then transform all chirps
          for (int k = 0; k < Nc; ++k) {
            const cd decode = std::polar(1.0, -2.0 * M_PI * (double)k * t / Ntx);
            slow[k] = fast[(size_t)k * Nrx + r][ir] * decode * ws[k];
          }
        } else {
          // take this TX's chirp subset
          for (int m = 0; m < n_slow; ++m) {
            const int k = t + m * Ntx;
            slow[m] = fast[(size_t)k * Nrx + r][ir] * ws[m];
          }
        }
        fft_inplace(slow);
        for (int id = 0; id < rd.n_dop; ++id) rd.at(v, ir, id) = slow[id];
      }
    }
  return rd;
}

ArrD RdMap::power_map() const {
  const int vd = valid_dop();
  ArrD out({n_rng, 2 * vd});
  for (int ir = 0; ir < n_rng; ++ir)
    for (int col = 0; col < 2 * vd; ++col) {
      const int sbin = col - vd;
      const int id = (sbin + n_dop) % n_dop;
      double p = 0;
      for (int v = 0; v < n_virt; ++v) p += std::norm(at(v, ir, id));
      out.at(ir, col) = p;
    }
  return out;
}

std::vector<cd> RdMap::snapshot(int ir, int signed_dop_bin) const {
  const int id = (signed_dop_bin + n_dop) % n_dop;
  std::vector<cd> x(n_virt);
  for (int v = 0; v < n_virt; ++v) x[v] = at(v, ir, id);
  return x;
}

// ---------------------------------------------------------------------------
// Angle spectrum
// ---------------------------------------------------------------------------

std::vector<double> angle_grid_rad(int n_points) {
  std::vector<double> g(n_points);
  for (int i = 0; i < n_points; ++i)
    g[i] = (-90.0 + 180.0 * i / (n_points - 1)) * M_PI / 180.0;
  return g;
}

std::vector<double> angle_spectrum(const std::vector<cd>& snapshot, const RadarConfig& cfg,
                                   int n_points) {
  const int n = (int)snapshot.size();
  if (n != cfg.n_virtual())
    throw std::runtime_error("angle_spectrum: snapshot length != virtual array size");
  const std::vector<double> grid = angle_grid_rad(n_points);
  std::vector<double> p(n_points, 0.0);
  for (int i = 0; i < n_points; ++i) {
    const double phi =
        2.0 * M_PI * (cfg.rx_spacing() / cfg.wavelength()) * std::sin(grid[i]);
    cd acc(0, 0);
    for (int e = 0; e < n; ++e) acc += std::polar(1.0, -e * phi) * snapshot[e];
    p[i] = std::norm(acc);
  }
  return p;
}

// ---------------------------------------------------------------------------
// CFAR
// ---------------------------------------------------------------------------

std::vector<CfarDetection> cfar_detect(const ArrD& map, int guard, int train, double scale) {
  if (map.rank() != 2) throw std::runtime_error("cfar: need 2-d map");
  const int H = map.rows(), W = map.cols();
  if (2 * (guard + train) + 1 > H || 2 * (guard + train) + 1 > W)
    throw std::runtime_error("cfar: window larger than map");
  std::vector<CfarDetection> out;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double sum = 0;
      int count = 0;
      for (int di = -(guard + train); di <= guard + train; ++di)
        for (int dj = -(guard + train); dj <= guard + train; ++dj) {
          if (std::max(std::abs(di), std::abs(dj)) <= guard) continue;
          const int ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
          sum += map.at(ii, jj);
          ++count;
        }
      if (count == 0) continue;
      const double thr = scale * sum / count;
      if (map.at(i, j) > thr) out.push_back({i, j, map.at(i, j)});
    }
  return out;
}

// ---------------------------------------------------------------------------
// Oracle estimate
// ---------------------------------------------------------------------------

double oracle_azimuth(const RdMap& rd, int rng_bin, int dop_col) {
  const int sbin = dop_col - rd.valid_dop();
  std::vector<cd> snap = rd.snapshot(rng_bin, sbin);
  if (rd.mux == Multiplexing::TDM) {
    // TX t transmits t*T_R later within the TDM cycle; a moving target
    // accrues extra Doppler phase that must be removed before angle forming
    const double v_hat = rd.col_to_mps(dop_col);
    const double f_d = 2.0 * v_hat / rd.wavelength_m;
    for (int t = 0; t < rd.n_tx; ++t) {
      const cd comp = std::polar(1.0, -2.0 * M_PI * f_d * t * rd.chirp_interval_s);
      for (int r = 0; r < rd.n_rx; ++r) snap[(size_t)t * rd.n_rx + r] *= comp;
    }
  }
  RadarConfig geom;  // only spacing/wavelength are used by the beamformer
  geom.carrier_hz = kSpeedOfLight / rd.wavelength_m;
  geom.n_tx = rd.n_tx;
  geom.n_rx = rd.n_rx;
  const std::vector<double> spec = angle_spectrum(snap, geom, 181);
  const std::vector<double> grid = angle_grid_rad(181);
  int best = 0;
  for (int i = 1; i < (int)spec.size(); ++i)
    if (spec[i] > spec[best]) best = i;
  return grid[best];
}

OracleEstimate oracle_estimate(const AdcFrame& frame) {
  const RdMap rd = range_doppler(frame, true);
  const ArrD pw = rd.power_map();
  int bi = 0, bj = 0;
  double best = -1;
  for (int i = 0; i < pw.rows(); ++i)
    for (int j = 0; j < pw.cols(); ++j)
      if (pw.at(i, j) > best) {
        best = pw.at(i, j);
        bi = i;
        bj = j;
      }
  OracleEstimate est;
  est.rng_bin = bi;
  est.dop_col = bj;
  est.r_m = bi * rd.rng_bin_m;
  est.v_mps = rd.col_to_mps(bj);
  est.theta_rad = oracle_azimuth(rd, bi, bj);
  return est;
}

}  // namespace raven::dsp
