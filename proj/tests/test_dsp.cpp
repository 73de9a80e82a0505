#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "raven/dsp.hpp"
#include "raven/rng.hpp"
#include "raven/sim.hpp"

using namespace raven;
using raven::dsp::cd;

namespace {

// O(n^2) DFT as the independent reference for the fast transform
std::vector<cd> naive_dft(const std::vector<cd>& x) {
  const int n = (int)x.size();
  std::vector<cd> out(n, cd(0, 0));
  for (int k = 0; k < n; ++k)
    for (int t = 0; t < n; ++t)
      out[k] += x[t] * std::polar(1.0, -2.0 * M_PI * k * t / n);
  return out;
}

RadarConfig desk_config(Multiplexing mux) {
  RadarConfig cfg;
  cfg.multiplexing = mux;
  return cfg;
}

double sigma_for_snr(double amp, double snr_db) {
  return amp / std::sqrt(2.0 * std::pow(10.0, snr_db / 10.0));
}

}  // namespace

TEST_CASE("fft matches the naive DFT") {
  Rng rng(5);
  for (int n : {8, 32, 64}) {
    std::vector<cd> x(n);
    for (auto& v : x) v = cd(rng.normal(), rng.normal());
    std::vector<cd> fast = x;
    dsp::fft_inplace(fast);
    const std::vector<cd> slow = naive_dft(x);
    for (int i = 0; i < n; ++i) {
      CHECK(fast[i].real() == doctest::Approx(slow[i].real()).epsilon(1e-8));
      CHECK(fast[i].imag() == doctest::Approx(slow[i].imag()).epsilon(1e-8));
    }
  }
}

TEST_CASE("fft inverse round trip and Parseval (no window)") {
  Rng rng(6);
  const int n = 128;
  std::vector<cd> x(n);
  for (auto& v : x) v = cd(rng.normal(), rng.normal());

  std::vector<cd> y = x;
  dsp::fft_inplace(y);
  double e_time = 0, e_freq = 0;
  for (const auto& v : x) e_time += std::norm(v);
  for (const auto& v : y) e_freq += std::norm(v);
  CHECK(std::abs(e_freq - n * e_time) / (n * e_time) < 1e-4);

  dsp::fft_inplace(y, true);
  for (int i = 0; i < n; ++i) {
    CHECK(y[i].real() == doctest::Approx(x[i].real()).epsilon(1e-9));
    CHECK(y[i].imag() == doctest::Approx(x[i].imag()).epsilon(1e-9));
  }
}

TEST_CASE("zero frame produces an all-zero map") {
  const RadarConfig cfg = desk_config(Multiplexing::TDM);
  const AdcFrame frame = synthesize_frame(cfg, SceneSpec{});
  const dsp::RdMap rd = dsp::range_doppler(frame);
  for (const auto& v : rd.data) CHECK(std::norm(v) == 0.0);
}

TEST_CASE("static target peaks at the expected range bin, zero Doppler") {
  for (Multiplexing mux : {Multiplexing::TDM, Multiplexing::DDM}) {
    const RadarConfig cfg = desk_config(mux);
    SceneSpec scene;
    Target t;
    t.r = 9.0;
    scene.targets.push_back(t);
    const AdcFrame frame = synthesize_frame(cfg, scene);
    const dsp::OracleEstimate est = dsp::oracle_estimate(frame);
    const dsp::RdMap rd = dsp::range_doppler(frame);
    const BeatFreqs bf = beat_frequencies(cfg, t);
    const int want_bin = (int)std::lround(bf.f_r * rd.n_rng * cfg.sample_period_s);
    CHECK(std::abs(est.rng_bin - want_bin) <= 1);
    CHECK(std::abs(est.r_m - t.r) <= rd.rng_bin_m);
    CHECK(std::abs(est.v_mps) <= rd.dop_bin_mps);
  }
}

TEST_CASE("moving target lands on the right Doppler column") {
  for (Multiplexing mux : {Multiplexing::TDM, Multiplexing::DDM}) {
    const RadarConfig cfg = desk_config(mux);
    SceneSpec scene;
    Target t;
    t.r = 6.5;
    t.v = 3.2;
    scene.targets.push_back(t);
    const AdcFrame frame = synthesize_frame(cfg, scene);
    const dsp::OracleEstimate est = dsp::oracle_estimate(frame);
    const dsp::RdMap rd = dsp::range_doppler(frame);
    CHECK(std::abs(est.v_mps - t.v) <= rd.dop_bin_mps);
    // negative velocity too
    t.v = -2.4;
    scene.targets = {t};
    const dsp::OracleEstimate est2 = dsp::oracle_estimate(synthesize_frame(cfg, scene));
    CHECK(std::abs(est2.v_mps - t.v) <= rd.dop_bin_mps);
  }
}

TEST_CASE("angle spectrum: matched steering peaks at the true angle") {
  const RadarConfig cfg = desk_config(Multiplexing::TDM);
  const double theta0 = 23.0 * M_PI / 180.0;
  const auto steer =
      steering_vector(cfg, theta0, cfg.n_virtual(), cfg.rx_spacing());
  std::vector<cd> snap(cfg.n_virtual());
  for (int e = 0; e < cfg.n_virtual(); ++e) snap[e] = cd(steer[e][0], steer[e][1]);
  const std::vector<double> spec = dsp::angle_spectrum(snap, cfg, 181);
  const std::vector<double> grid = dsp::angle_grid_rad(181);
  int best = 0;
  for (int i = 1; i < 181; ++i)
    if (spec[i] > spec[best]) best = i;
  CHECK(std::abs(grid[best] - theta0) <= M_PI / 180.0 + 1e-9);
}

TEST_CASE("angle spectrum: pure noise has no dominant peak") {
  const RadarConfig cfg = desk_config(Multiplexing::TDM);
  Rng rng(99);
  int exceed = 0;
  const int trials = 50;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<cd> snap(cfg.n_virtual());
    for (auto& v : snap) v = cd(rng.normal(), rng.normal());
    const std::vector<double> spec = dsp::angle_spectrum(snap, cfg, 181);
    double mean = 0, mx = 0;
    for (double p : spec) {
      mean += p / spec.size();
      mx = std::max(mx, p);
    }
    if (mx > mean * std::pow(10.0, 0.6)) ++exceed;  // mean + 6 dB
  }
  // matched signals exceed this margin every time; noise only rarely
  CHECK(exceed < trials / 2);
}

TEST_CASE("angle spectrum: two well-separated targets give two peaks") {
  const RadarConfig cfg = desk_config(Multiplexing::TDM);
  // 8-element half-wavelength ULA beamwidth ~ 2/8 rad; use +/-30 degrees
  const double th1 = -30.0 * M_PI / 180.0, th2 = 30.0 * M_PI / 180.0;
  std::vector<cd> snap(cfg.n_virtual(), cd(0, 0));
  for (double th : {th1, th2}) {
    const auto a = steering_vector(cfg, th, cfg.n_virtual(), cfg.rx_spacing());
    for (int e = 0; e < cfg.n_virtual(); ++e) snap[e] += cd(a[e][0], a[e][1]);
  }
  const std::vector<double> spec = dsp::angle_spectrum(snap, cfg, 181);
  const std::vector<double> grid = dsp::angle_grid_rad(181);
  // local maxima above half the global max
  double gmax = 0;
  for (double p : spec) gmax = std::max(gmax, p);
  std::vector<double> peaks;
  for (int i = 1; i + 1 < 181; ++i)
    if (spec[i] > spec[i - 1] && spec[i] >= spec[i + 1] && spec[i] > 0.5 * gmax)
      peaks.push_back(grid[i]);
  REQUIRE(peaks.size() == 2);
  CHECK(std::abs(peaks[0] - th1) < 2.0 * M_PI / 180.0);
  CHECK(std::abs(peaks[1] - th2) < 2.0 * M_PI / 180.0);
}

TEST_CASE("CFAR basics") {
  ArrD flat({16, 16});
  flat.fill(3.0);
  CHECK(dsp::cfar_detect(flat, 1, 3, 1.5).empty());

  ArrD impulse({16, 16});
  impulse.fill(0.0);
  impulse.at(7, 9) = 5.0;
  const auto dets = dsp::cfar_detect(impulse, 1, 3, 2.0);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].row == 7);
  CHECK(dets[0].col == 9);
}

TEST_CASE("oracle closure: noiseless single targets within one bin each way") {
  Rng rng(4242);
  for (Multiplexing mux : {Multiplexing::TDM, Multiplexing::DDM}) {
    const RadarConfig cfg = desk_config(mux);
    const dsp::RdMap probe = dsp::range_doppler(synthesize_frame(cfg, SceneSpec{}));
    for (int trial = 0; trial < 25; ++trial) {
      SceneSpec scene;
      Target t;
      t.r = 3.0 + 10.0 * rng.uniform();
      t.v = -4.0 + 8.0 * rng.uniform();
      t.theta_rad = (-45.0 + 90.0 * rng.uniform()) * M_PI / 180.0;
      scene.targets.push_back(t);
      const dsp::OracleEstimate est = dsp::oracle_estimate(synthesize_frame(cfg, scene));
      CHECK(std::abs(est.r_m - t.r) <= probe.rng_bin_m);
      CHECK(std::abs(est.v_mps - t.v) <= probe.dop_bin_mps);
      CHECK(std::abs(est.theta_rad - t.theta_rad) <= M_PI / 180.0 + 1e-9);
    }
  }
}

TEST_CASE("CFAR recovers three targets at 20 dB") {
  const RadarConfig cfg = desk_config(Multiplexing::DDM);
  SceneSpec scene;
  const double amps[3] = {1.0, 0.9, 1.1};
  const double rs[3] = {4.0, 8.0, 12.0};
  const double vs[3] = {-3.0, 0.5, 3.5};
  const double ths[3] = {-0.5, 0.1, 0.6};
  for (int i = 0; i < 3; ++i) {
    Target t;
    t.r = rs[i];
    t.v = vs[i];
    t.theta_rad = ths[i];
    t.amp = amps[i];
    scene.targets.push_back(t);
  }
  scene.noise_sigma = sigma_for_snr(1.0, 20.0);
  scene.seed = 31;
  const AdcFrame frame = synthesize_frame(cfg, scene);
  const dsp::RdMap rd = dsp::range_doppler(frame);
  const ArrD pw = rd.power_map();
  const auto dets = dsp::cfar_detect(pw, 2, 4, 3.0);
  int hits = 0;
  for (int i = 0; i < 3; ++i) {
    const BeatFreqs bf = beat_frequencies(cfg, scene.targets[i]);
    const int want_r = (int)std::lround(bf.f_r * rd.n_rng * cfg.sample_period_s);
    const int want_c = rd.valid_dop() + (int)std::lround(vs[i] / rd.dop_bin_mps);
    bool found = false;
    for (const auto& det : dets)
      if (std::abs(det.row - want_r) <= 1 && std::abs(det.col - want_c) <= 1) found = true;
    if (found) ++hits;
  }
  CHECK(hits == 3);
}
