#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace raven {

// Seeded RNG with pinned output streams. std::mt19937_64 is fully specified
// by the standard; the uniform/normal transforms are written out here so the
// byte streams never depend on the standard library's distribution
// implementations. Every dataset, init and shuffle goes through this.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return (double)(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, one cached value
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // avoid log(0)
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // integer in [0, n)
  uint64_t below(uint64_t n) {
    // rejection-free modulo is fine here; bias at these n is irrelevant and
    // the mapping stays pinned
    return eng_() % n;
  }

  template <class V>
  void shuffle(V& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = (size_t)below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // derive an independent stream (e.g. per-frame seeds)
  uint64_t fork_seed() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace raven
