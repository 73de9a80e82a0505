#pragma once

// FMCW MIMO scene simulator: point targets with constant radial velocity,
// far-field, stop-and-hop (range frozen within a chirp). Produces the raw
// ADC frames the engine consumes and the BEV training labels.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "raven/array.hpp"

namespace raven {

inline constexpr double kSpeedOfLight = 299792458.0;

enum class Multiplexing : uint8_t { TDM = 0, DDM = 1 };

struct RadarConfig {
  int n_chirps = 64;    // N_c
  int n_samples = 64;   // N_s
  int n_tx = 2;
  int n_rx = 4;
  double bandwidth_hz = 150e6;   // B, swept over T_c
  double chirp_dur_s = 32e-6;    // T_c
  double sample_period_s = 0.5e-6;  // T_s
  double chirp_interval_s = 40e-6;  // T_R
  double carrier_hz = 77e9;      // f0
  double spacing_m = 0.0;        // RX element spacing; 0 -> lambda/2
  Multiplexing multiplexing = Multiplexing::DDM;

  double wavelength() const { return kSpeedOfLight / carrier_hz; }
  double slope() const { return bandwidth_hz / chirp_dur_s; }
  double rx_spacing() const { return spacing_m > 0 ? spacing_m : wavelength() / 2; }
  // TX elements sit n_rx RX-spacings apart so the virtual array is a filled ULA
  double tx_spacing() const { return n_rx * rx_spacing(); }
  int n_virtual() const { return n_tx * n_rx; }
  // range covered by one fast-time FFT bin (no padding)
  double range_bin_m() const {
    return kSpeedOfLight / (2.0 * slope() * n_samples * sample_period_s);
  }
  void validate() const;
};

struct Target {
  double r = 0;          // range, m
  double v = 0;          // radial velocity, m/s (positive = receding)
  double theta_rad = 0;  // azimuth
  double amp = 1.0;
  double phase = 0.0;
};

struct SceneSpec {
  std::vector<Target> targets;
  double noise_sigma = 0.0;
  uint64_t seed = 0;
};

struct AdcFrame {
  RadarConfig cfg;
  Arr data;  // [N_c, N_s, 2*N_rx], I/Q interleaved per receiver

  AdcFrame() = default;
  explicit AdcFrame(const RadarConfig& c)
      : cfg(c), data({c.n_chirps, c.n_samples, 2 * c.n_rx}) {}

  float& re(int k, int n, int r) {
    return data.data[((size_t)k * cfg.n_samples + n) * (2 * cfg.n_rx) + 2 * r];
  }
  float& im(int k, int n, int r) {
    return data.data[((size_t)k * cfg.n_samples + n) * (2 * cfg.n_rx) + 2 * r + 1];
  }
  float re(int k, int n, int r) const {
    return data.data[((size_t)k * cfg.n_samples + n) * (2 * cfg.n_rx) + 2 * r];
  }
  float im(int k, int n, int r) const {
    return data.data[((size_t)k * cfg.n_samples + n) * (2 * cfg.n_rx) + 2 * r + 1];
  }
};

// f_r = 2 S R / c (range beat), f_D = 2 v / lambda (Doppler)
struct BeatFreqs {
  double f_r = 0;
  double f_D = 0;
  bool aliased = false;  // beat beyond fast-time Nyquist; warning, not failure
};
BeatFreqs beat_frequencies(const RadarConfig& cfg, const Target& t);

// a(theta) = [1, e^{j phi}, ...], phi = 2 pi (spacing/lambda) sin(theta)
std::vector<std::array<double, 2>> steering_vector(const RadarConfig& cfg, double theta_rad,
                                                   int n_elem, double spacing_m);

AdcFrame synthesize_frame(const RadarConfig& cfg, const SceneSpec& scene);

// ---------------------------------------------------------------------------
// BEV labels
// ---------------------------------------------------------------------------

struct GridSpec {
  int H = 32;             // rows, y (down-range) axis
  int W = 32;             // cols, x (cross-range) axis
  double extent_m = 16.0; // x in [-extent/2, extent/2], y in [0, extent]
  double blob_sigma_cells = 1.0;
  double seg_radius_cells = 3.0;

  double cell_m() const { return extent_m / H; }
};

struct FrameLabels {
  Arr det_p;    // [H, W] Gaussian center heatmap (max-combined)
  Arr det_off;  // [2, H, W] (dx, dy) to true center, cell units
  Arr seg_mask; // [H, W] binary occupancy disks
  std::vector<std::array<double, 2>> centers_xy_m;  // in-extent target centers
  int n_excluded = 0;  // targets outside the extent
};

FrameLabels labels_for_scene(const RadarConfig& cfg, const SceneSpec& scene,
                             const GridSpec& grid);

// ---------------------------------------------------------------------------
// I/O: frame file ("RVNF") and scene JSON
// ---------------------------------------------------------------------------

void save_frame(const std::string& path, const AdcFrame& frame);
AdcFrame load_frame(const std::string& path);

std::string scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const std::string& text);

}  // namespace raven
