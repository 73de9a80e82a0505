#include "raven/sim.hpp"

#include <cmath>
#include <complex>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "raven/rng.hpp"

namespace raven {

using cd = std::complex<double>;

void RadarConfig::validate() const {
  if (n_chirps < 1 || n_samples < 1 || n_tx < 1 || n_rx < 1)
    throw std::runtime_error("RadarConfig: dimensions must be positive");
  if (n_samples * sample_period_s > chirp_dur_s + 1e-12)
    throw std::runtime_error("RadarConfig: sampling window exceeds chirp duration");
  if (chirp_interval_s < chirp_dur_s)
    throw std::runtime_error("RadarConfig: chirp interval shorter than chirp");
  if (bandwidth_hz <= 0 || carrier_hz <= 0)
    throw std::runtime_error("RadarConfig: bandwidth/carrier must be positive");
}

BeatFreqs beat_frequencies(const RadarConfig& cfg, const Target& t) {
  BeatFreqs out;
  out.f_r = 2.0 * cfg.slope() * t.r / kSpeedOfLight;
  out.f_D = 2.0 * t.v / cfg.wavelength();
  out.aliased = out.f_r >= 0.5 / cfg.sample_period_s;
  return out;
}

std::vector<std::array<double, 2>> steering_vector(const RadarConfig& cfg, double theta_rad,
                                                   int n_elem, double spacing_m) {
  if (n_elem < 1) throw std::runtime_error("steering_vector: n_elem < 1");
  const double phi = 2.0 * M_PI * (spacing_m / cfg.wavelength()) * std::sin(theta_rad);
  std::vector<std::array<double, 2>> a(n_elem);
  for (int r = 0; r < n_elem; ++r) a[r] = {std::cos(r * phi), std::sin(r * phi)};
  return a;
}

AdcFrame synthesize_frame(const RadarConfig& cfg, const SceneSpec& scene) {
  cfg.validate();
  const int Nc = cfg.n_chirps, Ns = cfg.n_samples, Ntx = cfg.n_tx, Nrx = cfg.n_rx;
  const bool ddm = cfg.multiplexing == Multiplexing::DDM;

  // accumulate in double, cast to f32 at the end
  std::vector<cd> acc((size_t)Nc * Ns * Nrx, cd(0.0, 0.0));

  for (const Target& tgt : scene.targets) {
    const BeatFreqs bf = beat_frequencies(cfg, tgt);
    const cd amp = std::polar(tgt.amp, tgt.phase);
    // virtual-array steering phase per element (TX stride = Nrx)
    const double phi =
        2.0 * M_PI * (cfg.rx_spacing() / cfg.wavelength()) * std::sin(tgt.theta_rad);
    std::vector<cd> steer(Ntx * Nrx);
    for (int e = 0; e < Ntx * Nrx; ++e) steer[e] = std::polar(1.0, e * phi);

    const cd rot_fast = std::polar(1.0, 2.0 * M_PI * bf.f_r * cfg.sample_period_s);
    for (int k = 0; k < Nc; ++k) {
      const cd dop = std::polar(1.0, 2.0 * M_PI * bf.f_D * k * cfg.chirp_interval_s);
      for (int t = 0; t < Ntx; ++t) {
        if (!ddm && (k % Ntx) != t) continue;  // TDM: one TX per chirp
        const cd code =
            ddm ? std::polar(1.0, 2.0 * M_PI * (double)k * t / Ntx) : cd(1.0, 0.0);
        cd fast = amp * dop * code;  // value at n = 0
        for (int n = 0; n < Ns; ++n) {
          cd* row = acc.data() + ((size_t)k * Ns + n) * Nrx;
          for (int r = 0; r < Nrx; ++r) row[r] += fast * steer[t * Nrx + r];
          fast *= rot_fast;
        }
      }
    }
  }

  AdcFrame frame(cfg);
  if (scene.noise_sigma > 0) {
    Rng rng(scene.seed);
    for (size_t i = 0; i < acc.size(); ++i) {
      acc[i] += cd(rng.normal(0.0, scene.noise_sigma), rng.normal(0.0, scene.noise_sigma));
    }
  }
  for (int k = 0; k < Nc; ++k)
    for (int n = 0; n < Ns; ++n)
      for (int r = 0; r < Nrx; ++r) {
        const cd v = acc[((size_t)k * Ns + n) * Nrx + r];
        frame.re(k, n, r) = (float)v.real();
        frame.im(k, n, r) = (float)v.imag();
      }
  return frame;
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

FrameLabels labels_for_scene(const RadarConfig& /*cfg*/, const SceneSpec& scene,
                             const GridSpec& grid) {
  const int H = grid.H, W = grid.W;
  const double cell = grid.cell_m();
  FrameLabels out;
  out.det_p = Arr({H, W});
  out.det_off = Arr({2, H, W});
  out.seg_mask = Arr({H, W});

  struct Center {
    double cx, cy;  // in cell coordinates
  };
  std::vector<Center> centers;
  for (const Target& t : scene.targets) {
    const double x = t.r * std::sin(t.theta_rad);
    const double y = t.r * std::cos(t.theta_rad);
    if (x < -grid.extent_m / 2 || x > grid.extent_m / 2 || y < 0 || y > grid.extent_m) {
      ++out.n_excluded;
      continue;
    }
    centers.push_back({(x + grid.extent_m / 2) / cell, y / cell});
    out.centers_xy_m.push_back({x, y});
  }

  const double s2 = 2.0 * grid.blob_sigma_cells * grid.blob_sigma_cells;
  const double seg_r2 = grid.seg_radius_cells * grid.seg_radius_cells;
  for (int iy = 0; iy < H; ++iy) {
    for (int ix = 0; ix < W; ++ix) {
      const double px = ix + 0.5, py = iy + 0.5;  // cell center
      double best_p = 0.0, best_dx = 0.0, best_dy = 0.0, best_d2 = 1e30;
      bool occupied = false;
      for (const Center& c : centers) {
        const double dx = c.cx - px, dy = c.cy - py;
        const double d2 = dx * dx + dy * dy;
        const double p = std::exp(-d2 / s2);
        if (p > best_p) best_p = p;
        if (d2 < best_d2) {
          best_d2 = d2;
          best_dx = dx;
          best_dy = dy;
        }
        if (d2 <= seg_r2) occupied = true;
      }
      out.det_p.at(iy, ix) = (float)best_p;
      out.det_off.data[(size_t)0 * H * W + iy * W + ix] = (float)best_dx;
      out.det_off.data[(size_t)1 * H * W + iy * W + ix] = (float)best_dy;
      out.seg_mask.at(iy, ix) = occupied ? 1.0f : 0.0f;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame file I/O ("RVNF")
// ---------------------------------------------------------------------------

namespace {
void w_u32(FILE* f, uint32_t v) {
  uint8_t b[4] = {(uint8_t)(v & 0xff), (uint8_t)((v >> 8) & 0xff),
                  (uint8_t)((v >> 16) & 0xff), (uint8_t)((v >> 24) & 0xff)};
  std::fwrite(b, 1, 4, f);
}
uint32_t r_u32(FILE* f) {
  uint8_t b[4];
  if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("truncated frame file");
  return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) |
         ((uint32_t)b[3] << 24);
}
}  // namespace

void save_frame(const std::string& path, const AdcFrame& frame) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path);
  std::fwrite("RVNF", 1, 4, f);
  w_u32(f, 1);
  w_u32(f, (uint32_t)frame.cfg.n_chirps);
  w_u32(f, (uint32_t)frame.cfg.n_samples);
  w_u32(f, (uint32_t)frame.cfg.n_rx);
  w_u32(f, (uint32_t)frame.cfg.n_tx);
  const uint8_t mux = (uint8_t)frame.cfg.multiplexing;
  std::fwrite(&mux, 1, 1, f);
  for (int64_t i = 0; i < frame.data.numel(); ++i) {
    uint32_t u;
    std::memcpy(&u, &frame.data.data[i], 4);
    w_u32(f, u);
  }
  std::fclose(f);
}

AdcFrame load_frame(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot read " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "RVNF", 4) != 0) {
    std::fclose(f);
    throw std::runtime_error("bad frame magic in " + path);
  }
  const uint32_t version = r_u32(f);
  if (version != 1) {
    std::fclose(f);
    throw std::runtime_error("unsupported frame version");
  }
  RadarConfig cfg;
  cfg.n_chirps = (int)r_u32(f);
  cfg.n_samples = (int)r_u32(f);
  cfg.n_rx = (int)r_u32(f);
  cfg.n_tx = (int)r_u32(f);
  uint8_t mux = 0;
  if (std::fread(&mux, 1, 1, f) != 1) {
    std::fclose(f);
    throw std::runtime_error("truncated frame file");
  }
  cfg.multiplexing = (Multiplexing)mux;
  AdcFrame frame(cfg);
  for (int64_t i = 0; i < frame.data.numel(); ++i) {
    const uint32_t u = r_u32(f);
    std::memcpy(&frame.data.data[i], &u, 4);
  }
  std::fclose(f);
  return frame;
}

// ---------------------------------------------------------------------------
// Scene JSON
// ---------------------------------------------------------------------------

std::string scene_to_json(const SceneSpec& scene) {
  nlohmann::json j;
  j["targets"] = nlohmann::json::array();
  for (const Target& t : scene.targets) {
    j["targets"].push_back({{"r", t.r},
                            {"v", t.v},
                            {"theta_deg", t.theta_rad * 180.0 / M_PI},
                            {"amp", t.amp},
                            {"phase", t.phase}});
  }
  j["noise_sigma"] = scene.noise_sigma;
  j["seed"] = scene.seed;
  return j.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  SceneSpec s;
  for (const auto& jt : j.at("targets")) {
    Target t;
    t.r = jt.at("r").get<double>();
    t.v = jt.at("v").get<double>();
    t.theta_rad = jt.at("theta_deg").get<double>() * M_PI / 180.0;
    t.amp = jt.at("amp").get<double>();
    t.phase = jt.value("phase", 0.0);
    s.targets.push_back(t);
  }
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

}  // namespace raven
