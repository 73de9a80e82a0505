#pragma once

// Classical FFT/CFAR reference pipeline. Independent of the learned engine:
// used to validate the simulator end-to-end and to provide brute-force
// (range, velocity, azimuth) estimates.

#include <complex>
#include <vector>

#include "raven/array.hpp"
#include "raven/sim.hpp"

namespace raven::dsp {

using cd = std::complex<double>;

int next_pow2(int n);

// iterative radix-2, size must be a power of two; forward kernel e^{-j2pi kn/N},
// unnormalized (inverse divides by N)
void fft_inplace(std::vector<cd>& x, bool inverse = false);

// zero-pads to the next power of two, forward transform
std::vector<cd> fft_padded(const std::vector<cd>& x);

std::vector<double> hann_window(int n);

// ---------------------------------------------------------------------------
// Range-Doppler maps per virtual channel
// ---------------------------------------------------------------------------

struct RdMap {
  int n_virt = 0;   // N_tx * N_rx, index v = t*N_rx + r
  int n_rng = 0;    // fast-time FFT length
  int n_dop = 0;    // slow-time FFT length (per-TX sequence for TDM)
  double rng_bin_m = 0;
  double dop_bin_mps = 0;  // velocity per Doppler bin
  Multiplexing mux = Multiplexing::TDM;
  int n_tx = 1, n_rx = 1;
  double chirp_interval_s = 0, wavelength_m = 0;
  std::vector<cd> data;  // [virt][rng][dop]

  cd& at(int v, int ir, int id) { return data[((size_t)v * n_rng + ir) * n_dop + id]; }
  const cd& at(int v, int ir, int id) const {
    return data[((size_t)v * n_rng + ir) * n_dop + id];
  }

  // Doppler columns with unambiguous TX attribution. DDM folds the other TX
  // copies in at +/- n_dop/n_tx offsets, so only the central 1/n_tx of the
  // span is usable; TDM keeps the full (already slower) span.
  int valid_dop() const {
    return mux == Multiplexing::DDM ? n_dop / (2 * n_tx) : n_dop / 2;
  }

  // power summed over virtual channels, Doppler recentered so column j
  // corresponds to signed bin j - valid_dop()
  ArrD power_map() const;
  double col_to_mps(int col) const { return (col - valid_dop()) * dop_bin_mps; }
  int signed_bin_to_col(int sbin) const { return sbin + valid_dop(); }

  // complex snapshot over the virtual array at a (range, signed Doppler) cell
  std::vector<cd> snapshot(int ir, int signed_dop_bin) const;
};

RdMap range_doppler(const AdcFrame& frame, bool window = true);

// ---------------------------------------------------------------------------
// Angle estimation and CFAR
// ---------------------------------------------------------------------------

std::vector<double> angle_grid_rad(int n_points = 181);  // uniform over +/-90 deg

// conventional beamformer P(theta) = |a_v(theta)^H x|^2 over the grid
std::vector<double> angle_spectrum(const std::vector<cd>& snapshot, const RadarConfig& cfg,
                                   int n_points = 181);

struct CfarDetection {
  int row = 0, col = 0;
  double value = 0;
};

// cell-averaging CFAR on a 2-D magnitude map; training ring at Chebyshev
// distance (guard, guard+train], clipped at map borders
std::vector<CfarDetection> cfar_detect(const ArrD& map, int guard, int train, double scale);

// ---------------------------------------------------------------------------
// End-to-end oracle estimate (strongest target)
// ---------------------------------------------------------------------------

struct OracleEstimate {
  double r_m = 0;
  double v_mps = 0;
  double theta_rad = 0;
  int rng_bin = 0;
  int dop_col = 0;  // column in the recentered power map
};

OracleEstimate oracle_estimate(const AdcFrame& frame);

// azimuth at a specific power-map cell (with TDM motion compensation)
double oracle_azimuth(const RdMap& rd, int rng_bin, int dop_col);

}  // namespace raven::dsp
