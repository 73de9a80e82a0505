// Metric definitions checked against hand-computed cases, brute-force
// oracles, and algebraic identities.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "raven/metrics.hpp"
#include "raven/rng.hpp"

using namespace raven;

namespace {

Arr mask_of(std::vector<int> shape, std::vector<float> v) {
  return Arr(std::move(shape), std::move(v));
}

Detection det_at(double x, double y, double s) {
  Detection d;
  d.x = x;
  d.y = y;
  d.score = s;
  return d;
}

}  // namespace

TEST_CASE("dice and iou on hand-built masks") {
  Arr a = mask_of({2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
  Arr b = mask_of({2, 4}, {1, 1, 0, 0, 1, 1, 0, 0});  // overlap 2, |a|=|b|=4
  CHECK(dice(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(dice(a, b) == doctest::Approx(0.5));
  CHECK(iou(a, b) == doctest::Approx(2.0 / 6.0));

  Arr dis = mask_of({2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(dice(a, dis) == doctest::Approx(0.0));
  CHECK(iou(a, dis) == doctest::Approx(0.0));

  Arr z({2, 4});
  CHECK(dice(z, z) == doctest::Approx(1.0));
  CHECK(iou(z, z) == doctest::Approx(1.0));

  // probabilities binarize at 0.5 (strictly greater)
  Arr p = mask_of({1, 4}, {0.51f, 0.5f, 0.49f, 0.9f});
  Arr t = mask_of({1, 4}, {1, 0, 0, 1});
  CHECK(iou(p, t) == doctest::Approx(1.0));

  CHECK_THROWS(dice(a, Arr({3, 3})));
}

TEST_CASE("dice equals 2*iou/(1+iou) on random masks") {
  Rng rng(5);
  for (int it = 0; it < 200; ++it) {
    Arr a({8, 8}), b({8, 8});
    for (auto& v : a.data) v = rng.uniform(0, 1) < 0.3 ? 1.0f : 0.0f;
    for (auto& v : b.data) v = rng.uniform(0, 1) < 0.3 ? 1.0f : 0.0f;
    const double i = iou(a, b);
    CHECK(dice(a, b) == doctest::Approx(2 * i / (1 + i)).epsilon(1e-12));
  }
}

TEST_CASE("chamfer distance: hand cases, symmetry, brute-force oracle") {
  std::vector<PointXY> a = {{0, 0}}, b = {{3, 4}};
  CHECK(chamfer(a, a, 10).dist == doctest::Approx(0.0));
  CHECK(chamfer(a, b, 10).dist == doctest::Approx(5.0));

  auto e = chamfer({}, b, 22.6);
  CHECK(e.one_empty);
  CHECK(e.dist == doctest::Approx(22.6));
  auto ee = chamfer({}, {}, 22.6);
  CHECK(ee.both_empty);
  CHECK(ee.dist == doctest::Approx(0.0));

  Rng rng(9);
  for (int it = 0; it < 50; ++it) {
    std::vector<PointXY> p, q;
    const int np = 1 + (int)rng.below(6), nq = 1 + (int)rng.below(6);
    for (int i = 0; i < np; ++i) p.push_back({rng.uniform(-8, 8), rng.uniform(0, 16)});
    for (int i = 0; i < nq; ++i) q.push_back({rng.uniform(-8, 8), rng.uniform(0, 16)});
    // independent accumulation order: min over all pairs per point
    double s1 = 0;
    for (const auto& x : p) {
      double best = 1e300;
      for (const auto& y : q) {
        const double d = std::sqrt((x[0] - y[0]) * (x[0] - y[0]) +
                                   (x[1] - y[1]) * (x[1] - y[1]));
        best = std::min(best, d);
      }
      s1 += best;
    }
    double s2 = 0;
    for (const auto& y : q) {
      double best = 1e300;
      for (const auto& x : p) {
        const double d = std::sqrt((x[0] - y[0]) * (x[0] - y[0]) +
                                   (x[1] - y[1]) * (x[1] - y[1]));
        best = std::min(best, d);
      }
      s2 += best;
    }
    const double want = 0.5 * (s1 / np + s2 / nq);
    CHECK(chamfer(p, q, 0).dist == doctest::Approx(want).epsilon(1e-12));
    CHECK(chamfer(p, q, 0).dist == doctest::Approx(chamfer(q, p, 0).dist).epsilon(1e-12));
  }
}

TEST_CASE("detection precision-recall: hand cases") {
  std::vector<PointXY> gts = {{1, 2}, {-3, 5}};

  SUBCASE("perfect predictions") {
    auto m = det_pr({det_at(1, 2, 0.9), det_at(-3, 5, 0.8)}, gts, 0.5);
    CHECK(m.ap == doctest::Approx(1.0));
    CHECK(m.ar == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(1.0));
    CHECK(m.re_m == doctest::Approx(0.0));
    CHECK(m.ae_deg == doctest::Approx(0.0));
    CHECK(m.tp == 2);
    CHECK(m.fp == 0);
    CHECK(m.fn == 0);
  }
  SUBCASE("no predictions against nonempty truth") {
    auto m = det_pr({}, gts, 0.5);
    CHECK(m.ap == doctest::Approx(0.0));
    CHECK(m.ar == doctest::Approx(0.0));
    CHECK(m.f1 == doctest::Approx(0.0));
    CHECK(m.fn == 2);
  }
  SUBCASE("one true and one false positive") {
    auto m = det_pr({det_at(1, 2, 0.9), det_at(6, 6, 0.8)}, {{1, 2}}, 0.5);
    CHECK(m.ar == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.tp == 1);
    CHECK(m.fp == 1);
  }
  SUBCASE("both empty is vacuously perfect") {
    auto m = det_pr({}, {}, 0.5);
    CHECK(m.ap == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(1.0));
  }
  SUBCASE("11-point interpolated AP for a known ranking") {
    // ranking: TP (r=0.5, p=1), FP (p=0.5), TP (r=1, p=2/3)
    // recall levels 0..0.5 interpolate to precision 1, 0.6..1.0 to 2/3
    auto m = det_pr({det_at(1, 2, 0.9), det_at(6, 6, 0.8), det_at(-3, 5, 0.7)}, gts, 0.5);
    CHECK(m.ap == doctest::Approx((6 * 1.0 + 5 * 2.0 / 3.0) / 11.0));
    CHECK(m.ar == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(2 * (2.0 / 3.0) * 1.0 / (2.0 / 3.0 + 1.0)));
  }
  SUBCASE("range and azimuth errors over matches") {
    // truth at range 1, boresight; prediction at range 1.1, azimuth 5 degrees
    const double az = 5.0 * M_PI / 180.0;
    auto m = det_pr({det_at(1.1 * std::sin(az), 1.1 * std::cos(az), 0.9)}, {{0, 1}}, 0.5);
    REQUIRE(m.tp == 1);
    CHECK(m.re_m == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(m.ae_deg == doctest::Approx(5.0).epsilon(1e-9));
  }
  SUBCASE("greedy matching is one-to-one") {
    // two predictions near one truth: only the higher-scored one matches
    auto m = det_pr({det_at(1, 2, 0.9), det_at(1.1, 2, 0.8)}, {{1, 2}}, 0.5);
    CHECK(m.tp == 1);
    CHECK(m.fp == 1);
  }
  SUBCASE("matching respects the radius") {
    auto m = det_pr({det_at(1, 2.6, 0.9)}, {{1, 2}}, 0.5);
    CHECK(m.tp == 0);
    auto m2 = det_pr({det_at(1, 2.4, 0.9)}, {{1, 2}}, 0.5);
    CHECK(m2.tp == 1);
  }
}
