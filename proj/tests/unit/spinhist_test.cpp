#include "qndtomo/error.hpp"
#include "qndtomo/random.hpp"
#include "qndtomo/spinhist.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace qndtomo;

TEST_SUITE("spinhist") {

TEST_CASE("binning") {
  SpinHistogram h(4, 1.0);
  h.add(-0.9, -0.9);
  h.add(0.1, 0.6);
  h.add(1.5, 0.0);
  CHECK(h.total() == 3);
  CHECK(h.outside() == 1);
  CHECK(h.count(0, 0) == 1);
  CHECK(h.count(2, 3) == 1);
  CHECK(h.center(0) == doctest::Approx(-0.75));
  CHECK_THROWS_AS(SpinHistogram(2, 1.0), InvalidInput);
  CHECK_THROWS_AS(SpinHistogram(8, 0.0), InvalidInput);
}

TEST_CASE("smoothing conserves mass away from the border") {
  SpinHistogram h(21, 1.0);
  for (int i = 0; i < 50; ++i) h.add(0.0, 0.0);
  const auto s = h.smoothed(1.5);
  double total = 0.0;
  for (double v : s) total += v;
  CHECK(total == doctest::Approx(50.0).epsilon(1e-12));
  CHECK(s[10 * 21 + 10] < 50.0);
  const auto raw = h.smoothed(0.0);
  CHECK(raw[10 * 21 + 10] == 50.0);
}

TEST_CASE("peaks of a ring of clusters") {
  SpinHistogram h(64, 1.0);
  Rng rng(3);
  for (int n = 0; n < 8; ++n)
    for (int i = 0; i < 2000 + 300 * n; ++i) {
      const double a = n * std::numbers::pi / 4;
      h.add(0.7 * std::cos(a) + 0.04 * (rng.uniform() - 0.5), 0.7 * std::sin(a) + 0.04 * (rng.uniform() - 0.5));
    }
  const auto peaks = find_peaks(h, {1.0, 2, 0.02});
  REQUIRE(peaks.size() == 8);
  for (std::size_t i = 1; i < peaks.size(); ++i) CHECK(peaks[i].height <= peaks[i - 1].height);
  for (const auto& p : peaks) {
    const double nearest = std::round(p.angle / (std::numbers::pi / 4));
    CHECK(angle_distance(p.angle, nearest * std::numbers::pi / 4) < 0.06);
    CHECK(std::abs(p.radius - 0.7) < 0.04);
  }
  CHECK(find_peaks(SpinHistogram(8, 1.0)).empty());
}

TEST_CASE("angles and classification") {
  CHECK(angle_distance(0.1, 2 * std::numbers::pi - 0.1) == doctest::Approx(0.2));
  CHECK(angle_distance(0.0, std::numbers::pi) == doctest::Approx(std::numbers::pi));
  const ProbeModel probe;
  CHECK(classify_spin({0.0, 0.7, 0.0, 110}, probe, 0.35) == 2);
  CHECK(classify_spin({0.7, -0.05, 0.0, 110}, probe, 0.35) == 0);
  CHECK(classify_spin({0.5, -0.5, 0.0, 110}, probe, 0.35) == 7);
  CHECK(classify_spin({0.1, 0.1, 0.0, 110}, probe, 0.35) == -1);
}

}  // TEST_SUITE
