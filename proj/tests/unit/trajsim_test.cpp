#include "qndtomo/bayesfilter.hpp"
#include "qndtomo/error.hpp"
#include "qndtomo/random.hpp"
#include "qndtomo/trajsim.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace qndtomo;

namespace {

const double kKappa = 1.0 / 0.130;

JumpPath fixed_path(int n) { return JumpPath{n, {}}; }

}  // namespace

TEST_SUITE("trajsim") {

TEST_CASE("vacuum is absorbing at zero temperature") {
  const GeneratorMatrix k = build_generator({kKappa, 0.0, 7});
  for (std::uint64_t s = 0; s < 20; ++s) CHECK(sample_jump_path(k, 0, 100.0, s).events.empty());
}

TEST_CASE("single-photon decay time") {
  const GeneratorMatrix k = build_generator({kKappa, 0.0, 7});
  const int paths = 10000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < paths; ++i) {
    const JumpPath p = sample_jump_path(k, 1, 100.0, derive_seed(1, static_cast<std::uint64_t>(i)));
    REQUIRE(p.events.size() == 1);
    CHECK(p.events[0].new_n == 0);
    sum += p.events[0].time;
    sum2 += p.events[0].time * p.events[0].time;
  }
  const double mean = sum / paths;
  const double se = std::sqrt((sum2 / paths - mean * mean) / paths);
  CHECK(std::abs(mean - 0.130) < 3.0 * se);
}

TEST_CASE("exit rate and branching out of n = 7") {
  const GeneratorMatrix k = build_generator({kKappa, 0.06, 7});
  const int paths = 10000;
  double total_dwell = 0.0;
  int down = 0;
  for (int i = 0; i < paths; ++i) {
    const JumpPath p = sample_jump_path(k, 7, 10.0, derive_seed(2, static_cast<std::uint64_t>(i)));
    REQUIRE_FALSE(p.events.empty());
    total_dwell += p.events[0].time;
    down += p.events[0].new_n == 6;
  }
  // maximum-likelihood exit rate: jumps over total dwell time
  const double rate = paths / total_dwell;
  const double se = rate / std::sqrt(paths);
  CHECK(std::abs(rate - (-k(7, 7))) < 3.0 * se);
  CHECK(down == paths);  // the upward rate out of n_max is truncated away
}

TEST_CASE("per-state exit rates and branching over many path segments") {
  const GeneratorMatrix k = build_generator({kKappa, 0.5, 7});
  std::vector<double> dwell(8, 0.0);
  std::vector<int> exits(8, 0), ups(8, 0);
  for (int i = 0; i < 2000; ++i) {
    const JumpPath p = sample_jump_path(k, PhotonDistribution::flat(), 3.0, derive_seed(3, static_cast<std::uint64_t>(i)));
    int state = p.initial_n;
    double t = 0.0;
    for (const Jump& j : p.events) {
      CHECK(std::abs(j.new_n - state) == 1);
      dwell[static_cast<std::size_t>(state)] += j.time - t;
      ++exits[static_cast<std::size_t>(state)];
      ups[static_cast<std::size_t>(state)] += j.new_n > state;
      state = j.new_n;
      t = j.time;
    }
    dwell[static_cast<std::size_t>(state)] += 3.0 - t;  // censored final segment
  }
  // 16 simultaneous checks: 4 sigma keeps the family-wise false alarm rate below 0.1%
  for (int n = 0; n <= 7; ++n) {
    const auto i = static_cast<std::size_t>(n);
    REQUIRE(exits[i] > 500);
    const double rate = exits[i] / dwell[i];
    CHECK(std::abs(rate + k(n, n)) < 4.0 * rate / std::sqrt(exits[i]));
    const double p_up = n < 7 ? k(n + 1, n) / -k(n, n) : 0.0;
    const double se = std::sqrt(std::max(p_up * (1 - p_up), 1e-12) / exits[i]);
    CHECK(std::abs(static_cast<double>(ups[i]) / exits[i] - p_up) < 4.0 * se + 1e-12);
  }
}

TEST_CASE("photon number along a path") {
  const JumpPath p{3, {{0.1, 2}, {0.3, 1}}};
  CHECK(p.photon_number_at(0.0) == 3);
  CHECK(p.photon_number_at(0.1) == 2);
  CHECK(p.photon_number_at(0.29) == 2);
  CHECK(p.photon_number_at(5.0) == 1);
  CHECK_NOTHROW(p.validate(7));
  CHECK_THROWS_AS((JumpPath{3, {{0.1, 3}}}.validate(7)), InvalidInput);
  CHECK_THROWS_AS((JumpPath{3, {{0.1, 2}, {0.1, 1}}}.validate(7)), InvalidInput);
  CHECK_THROWS_AS((JumpPath{9, {}}.validate(7)), InvalidInput);
}

TEST_CASE("uninformative probe gives fair coins") {
  ProbeModel probe;
  probe.offset = 0.0;
  probe.contrast = 0.0;
  const auto det = sample_detections(fixed_path(5), probe, 20.0, 77);
  double zeros = 0;
  for (const auto& e : det) zeros += e.outcome == 0;
  const double n = static_cast<double>(det.size());
  CHECK(std::abs(zeros / n - 0.5) < 3.0 * 0.5 / std::sqrt(n));
}

TEST_CASE("outcome frequencies at n = 0, phi = 0") {
  ProbeModel probe;
  probe.phase_settings = {0.0};
  const auto det = sample_detections(fixed_path(0), probe, 30.0, 5);
  double zeros = 0;
  for (const auto& e : det) zeros += e.outcome == 0;
  const double n = static_cast<double>(det.size());
  const double expected = 0.5 * (1.0 + (-0.1 + 0.7));
  CHECK(expected == doctest::Approx(0.80));
  CHECK(std::abs(zeros / n - expected) < 3.0 * std::sqrt(expected * (1 - expected) / n));
}

TEST_CASE("outcome frequencies conditioned on (n, phi) match the likelihood") {
  const ProbeModel probe;
  for (int n = 0; n <= 7; ++n) {
    const auto det = sample_detections(fixed_path(n), probe, 10.0, 100 + static_cast<std::uint64_t>(n));
    for (int k = 0; k < probe.phase_count(); ++k) {
      double count = 0, zeros = 0;
      for (const auto& e : det)
        if (e.phase_index == k) {
          ++count;
          zeros += e.outcome == 0;
        }
      const double p = 0.5 * (1.0 + probe.offset + probe.contrast * std::cos(n * std::numbers::pi / 4 + probe.phase_settings[static_cast<std::size_t>(k)]));
      CHECK(std::abs(zeros / count - p) < 3.5 * std::sqrt(p * (1 - p) / count) + 1e-12);
    }
  }
}

TEST_CASE("arrival statistics") {
  const ProbeModel probe;
  double count = 0;
  for (std::uint64_t s = 0; s < 200; ++s) count += static_cast<double>(sample_detections(fixed_path(0), probe, 0.130, s).size());
  // expected count 0.130 / 0.24e-3 = 541.7, about 500 atoms per damping time
  const double mean = count / 200;
  CHECK(std::abs(mean - 0.130 / 0.24e-3) < 3.0 * std::sqrt(541.7 / 200));

  ProbeModel periodic = probe;
  periodic.arrival_mode = ArrivalMode::periodic;
  const auto det = sample_detections(fixed_path(0), periodic, 0.010, 1);
  REQUIRE(det.size() == 41);  // 0.24 ms .. 9.84 ms
  CHECK(det[0].time == doctest::Approx(0.24e-3));
  for (std::size_t i = 0; i < det.size(); ++i) CHECK(det[i].phase_index == static_cast<int>(i % 4));

  ProbeModel random = probe;
  random.schedule = PhaseSchedule::random;
  std::vector<int> hits(4, 0);
  for (const auto& e : sample_detections(fixed_path(0), random, 1.0, 2)) ++hits[static_cast<std::size_t>(e.phase_index)];
  for (int h : hits) CHECK(h > 800);
}

TEST_CASE("synthesized runs") {
  const CavityParams cav;
  const ProbeModel probe;
  const auto run = synthesize_run(cav, probe, 4.4, 0.650, 2000, 42, 0);
  REQUIRE(run.size() == 2000);
  double detections = 0;
  std::vector<double> hist(8, 0.0);
  for (const auto& r : run) {
    detections += static_cast<double>(r.detections.size());
    REQUIRE(r.truth);
    CHECK_NOTHROW(r.validate(probe));
    hist[static_cast<std::size_t>(r.truth->initial_n)] += 1;
  }
  const double per_seq = detections / 2000;
  CHECK(std::abs(per_seq - 0.650 / 0.24e-3) < 10.0);  // ~2708, the same order as 2750
  // chi-square of the initial photon numbers against truncated Poisson(4.4), 7 dof, 1% level 18.48
  const PhotonDistribution law = PhotonDistribution::truncated_poisson(4.4);
  double chi2 = 0.0;
  for (int n = 0; n <= 7; ++n) {
    const double e = 2000 * law[n];
    chi2 += (hist[static_cast<std::size_t>(n)] - e) * (hist[static_cast<std::size_t>(n)] - e) / e;
  }
  CHECK(chi2 < 18.48);

  for (const auto& r : synthesize_run(cav, probe, 0.0, 0.1, 50, 1, 0)) CHECK(r.truth->initial_n == 0);
}

TEST_CASE("runs are reproducible and independent of the worker count") {
  const CavityParams cav;
  const ProbeModel probe;
  const auto a = synthesize_run(cav, probe, 4.4, 0.2, 64, 7, 1);
  const auto b = synthesize_run(cav, probe, 4.4, 0.2, 64, 7, 4);
  const auto c = synthesize_run(cav, probe, 4.4, 0.2, 64, 8, 1);
  CHECK(a == b);
  CHECK_FALSE(a == c);
}

TEST_CASE("probe validation") {
  ProbeModel p;
  p.offset = 0.5;
  p.contrast = 0.6;
  CHECK_THROWS_AS(p.validate(), InvalidInput);
  ProbeModel q;
  q.phase_settings.clear();
  CHECK_THROWS_AS(q.validate(), InvalidInput);
  ProbeModel r;
  r.mean_interval = 0.0;
  CHECK_THROWS_AS(r.validate(), InvalidInput);
  CHECK_THROWS_AS(synthesize_run(CavityParams{1.0, 0.0, 5}, ProbeModel{}, 1.0, 1.0, 1, 1), InvalidInput);
}

}  // TEST_SUITE
