// Acceptance run: one PASS/FAIL line per criterion. Exits non-zero only when a check cannot be
// executed at all; a FAIL line is a measured outcome, not a crash.

#include "qndtomo/ensemble.hpp"
#include "qndtomo/io.hpp"
#include "qndtomo/numkernel.hpp"
#include "qndtomo/pipeline.hpp"
#include "qndtomo/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace qndtomo;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGeneratorUlps = 4.0;
constexpr double kGeneratorMaxSeconds = 1e-3;
constexpr double kBinomialTol = 1e-8;
constexpr double kBinomialMaxSeconds = 1.0;
constexpr double kTimeConstantRel = 0.05;
constexpr double kOffsetTol = 0.03;
constexpr double kPipelineMaxSeconds = 600.0;
constexpr double kPoissonTv = 0.05;
constexpr double kSlope = 1.12, kSlopeTol = 0.10;
constexpr double kIntercept = 0.06, kInterceptTol = 0.04;
constexpr double kLifetimeRel = 0.15;
constexpr double kOffbandPerKappa = 0.1;
constexpr double kUpwardFactor = 2.0;
constexpr double kPredictionError = 0.05;
constexpr double kAngleTol = 0.1, kRadiusTol = 0.1;

constexpr double kTc = 0.130;
constexpr double kNb = 0.06;
constexpr int kNMax = 7;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int passed = 0;
int total = 0;

void report(int id, bool ok, const std::string& detail) {
  ++total;
  passed += ok;
  std::printf("%s %2d %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

io::Table table(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return io::read_table(in);
}

double meta_double(const io::Table& t, const std::string& key) {
  const std::string* v = t.find_meta(key);
  if (!v) throw std::runtime_error("missing metadata " + key);
  return io::parse_double(*v);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double wrapped(double a) {
  a = std::fmod(a, 2.0 * std::numbers::pi);
  if (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  if (a < -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

void generator_entries() {
  const double kappa = 1.0;
  bool ok = true;
  double worst = 0.0;
  const GeneratorMatrix k = build_generator({kappa, kNb, kNMax});
  for (int from = 0; from <= kNMax; ++from) {
    for (int to = 0; to <= kNMax; ++to) {
      // rates as exact rationals over 100: down 106 n / 100, up 6 (n + 1) / 100
      long num = 0;
      if (to == from - 1) num = 106L * from;
      if (to == from + 1 && from < kNMax) num = 6L * (from + 1);
      if (to == from) num = -(106L * from + (from < kNMax ? 6L * (from + 1) : 0L));
      const double expected = static_cast<double>(num) / 100.0;
      const double err = std::abs(k(to, from) - expected);
      worst = std::max(worst, err);
      ok = ok && err <= kGeneratorUlps * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(expected));
    }
  }
  const int reps = 1000;
  const auto t0 = Clock::now();
  double sink = 0.0;
  for (int i = 0; i < reps; ++i) sink += build_generator({kappa, kNb, kNMax})(0, 1);
  const double per_call = seconds_since(t0) / reps;
  ok = ok && sink > 0.0 && per_call < kGeneratorMaxSeconds;
  report(1, ok, "generator entries max_err=" + fmt("%.2e", worst) + " build_time_s=" + fmt("%.2e", per_call));
}

void binomial_decay() {
  const double kappa = 1.0 / kTc;
  const auto t0 = Clock::now();
  const GeneratorMatrix k = build_generator({kappa, 0.0, kNMax});
  double worst = 0.0;
  for (int n0 = 0; n0 <= kNMax; ++n0) {
    for (int i = 0; i < 50; ++i) {
      const double t = 5.0 * kTc * i / 49.0;
      const PhotonDistribution p = propagate(PhotonDistribution::delta(n0), k, t);
      const double q = std::exp(-kappa * t);
      for (int n = 0; n <= kNMax; ++n) {
        double exact = 0.0;
        if (n <= n0) {
          double binom = 1.0;
          for (int j = 1; j <= n; ++j) binom = binom * (n0 - n + j) / j;
          exact = binom * std::pow(q, n) * std::pow(1.0 - q, n0 - n);
        }
        worst = std::max(worst, std::abs(p[n] - exact));
      }
    }
  }
  const double elapsed = seconds_since(t0);
  report(2, worst < kBinomialTol && elapsed < kBinomialMaxSeconds,
         "binomial decay max_err=" + fmt("%.2e", worst) + " time_s=" + fmt("%.3f", elapsed));
}

void coherent(const fs::path& dir, double elapsed) {
  const io::Table fit = table(dir / artifact::coherent_fit);
  const double tc = meta_double(fit, "time_constant_s");
  const double offset = meta_double(fit, "offset");
  const bool ok = std::abs(tc - kTc) / kTc < kTimeConstantRel && std::abs(offset - kNb) <= kOffsetTol &&
                  elapsed < kPipelineMaxSeconds;
  report(3, ok,
         "coherent fit T_s=" + fmt("%.4f", tc) + " offset=" + fmt("%.4f", offset) + " pipeline_s=" + fmt("%.1f", elapsed));

  const std::size_t tv = fit.column("tv_residual");
  const std::size_t time = fit.column("time_s");
  bool ok4 = fit.rows.size() >= 3;
  std::string detail = "poisson tv";
  for (const auto& row : fit.rows) {
    ok4 = ok4 && row[tv] < kPoissonTv;
    detail += " t=" + fmt("%g", row[time]) + ":" + fmt("%.4f", row[tv]);
  }
  report(4, ok4, detail);
}

void generator_fit(const fs::path& dir) {
  const io::Table m = table(dir / artifact::fit_matrix);
  const double kappa = 1.0 / kTc;
  Matrix k = Matrix::Zero(kNMax + 1, kNMax + 1);
  const std::size_t to = m.column("to"), from = m.column("from"), rate = m.column("k_per_s");
  for (const auto& row : m.rows) k(static_cast<int>(row[to]), static_cast<int>(row[from])) = row[rate];

  // ordinary least squares of -K[n][n] / kappa on n for n below the truncation edge
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const int points = kNMax;
  for (int n = 0; n < kNMax; ++n) {
    const double y = -k(n, n) / kappa;
    sx += n;
    sy += y;
    sxx += n * n;
    sxy += n * y;
  }
  const double slope = (points * sxy - sx * sy) / (points * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / points;
  const double lifetime = -1.0 / k(kNMax, kNMax);
  const double planted = 1.0 / (kappa * (1.0 + kNb) * kNMax);
  const bool ok5 = std::abs(slope - kSlope) <= kSlopeTol && std::abs(intercept - kIntercept) <= kInterceptTol &&
                   std::abs(lifetime - planted) / planted <= kLifetimeRel;
  report(5, ok5,
         "diagonal law slope=" + fmt("%.3f", slope) + " intercept=" + fmt("%.3f", intercept) +
             " lifetime7_s=" + fmt("%.4f", lifetime) + " planted_s=" + fmt("%.4f", planted));

  double offband = 0.0;
  for (int i = 0; i <= kNMax; ++i)
    for (int j = 0; j <= kNMax; ++j)
      if (std::abs(i - j) >= 2) offband = std::max(offband, std::abs(k(i, j)) / kappa);
  report(6, offband < kOffbandPerKappa, "max offband_per_kappa=" + fmt("%.3f", offband));

  bool ok7 = true;
  std::string detail = "upward_per_kappa";
  for (int n = 0; n <= 3; ++n) {
    const double fitted = k(n + 1, n) / kappa;
    const double expected = kNb * (n + 1);
    ok7 = ok7 && fitted > 0.0 && fitted <= kUpwardFactor * expected && fitted >= expected / kUpwardFactor;
    detail += " n=" + std::to_string(n) + ":" + fmt("%.3f", fitted) + "/" + fmt("%.2f", expected);
  }
  report(7, ok7, detail);
}

void prediction(const fs::path& dir) {
  const io::Table t = table(dir / artifact::prediction_error);
  const std::size_t err = t.column("max_abs_error"), n0 = t.column("n0");
  double worst = 0.0;
  int at = -1;
  for (const auto& row : t.rows)
    if (row[err] > worst) {
      worst = row[err];
      at = static_cast<int>(row[n0]);
    }
  report(8, t.rows.size() == kNMax + 1 && worst < kPredictionError,
         "prediction max_abs_error=" + fmt("%.4f", worst) + " n0=" + std::to_string(at));
}

void fixed_point() {
  const ProbeModel probe;
  const PhotonDistribution planted = PhotonDistribution::truncated_poisson(4.4);
  bool ok = true;
  std::string detail = "fixed point";
  for (int count : {500, 2000, 8000}) {
    std::vector<WindowLikelihood> windows;
    for (int i = 0; i < count; ++i) {
      const auto id = static_cast<std::uint64_t>(i);
      Rng rng(derive_seed(9, id, 0));
      SequenceRecord s;
      s.id = i;
      s.truth = JumpPath{sample_photon_number(planted, rng.uniform()), {}};
      s.detections = sample_detections(*s.truth, probe, 0.02, derive_seed(9, id, 1));
      windows.push_back(window_products(s, 0.0, 25, probe));
    }
    const double tv = total_variation(fixed_point_step(windows, planted), planted);
    const double bound = 3.0 / std::sqrt(count);
    ok = ok && tv < bound;
    detail += " M=" + std::to_string(count) + ":" + fmt("%.4f", tv) + "<" + fmt("%.4f", bound);
  }
  report(9, ok, detail);
}

void spin_peaks(const fs::path& dir) {
  const io::Table t = table(dir / artifact::spin_peaks);
  const std::size_t angle = t.column("angle_rad"), radius = t.column("radius");
  const double contrast = ProbeModel{}.contrast;
  std::set<int> matched;
  double worst_angle = 0.0, worst_radius = 0.0;
  for (const auto& row : t.rows) {
    int best = -1;
    double best_d = 1e9;
    for (int n = 0; n <= kNMax; ++n) {
      const double d = std::abs(wrapped(row[angle] - n * std::numbers::pi / 4.0));
      if (d < best_d) {
        best_d = d;
        best = n;
      }
    }
    matched.insert(best);
    worst_angle = std::max(worst_angle, best_d);
    worst_radius = std::max(worst_radius, std::abs(row[radius] - contrast));
  }
  const bool ok = t.rows.size() == kNMax + 1 && matched.size() == kNMax + 1 && worst_angle <= kAngleTol &&
                  worst_radius <= kRadiusTol;
  report(10, ok,
         "spin peaks count=" + std::to_string(t.rows.size()) + " distinct_n=" + std::to_string(matched.size()) +
             " max_angle_err=" + fmt("%.3f", worst_angle) + " max_radius_err=" + fmt("%.3f", worst_radius));
}

void determinism(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a))
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::size_t other = 0;
  for (const auto& e : fs::directory_iterator(b)) other += e.is_regular_file();
  int differing = 0;
  std::string first;
  for (const auto& n : names) {
    // the config record lists the output directory and worker count, which differ by design
    if (n == artifact::config) continue;
    if (!fs::exists(b / n) || slurp(a / n) != slurp(b / n)) {
      if (differing++ == 0) first = n;
    }
  }
  const bool ok = differing == 0 && names.size() == other && names.size() > 20;
  report(11, ok,
         "determinism files=" + std::to_string(names.size()) + " differing=" + std::to_string(differing) +
             (first.empty() ? "" : " first=" + first));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "qndtomo_acceptance";
  try {
    fs::remove_all(root);
    generator_entries();
    binomial_decay();

    PipelineConfig cfg;
    cfg.output.dir = root / "run_a";
    auto t0 = Clock::now();
    run_pipeline(cfg, parse_stages({"all"}));
    const double elapsed = seconds_since(t0);
    coherent(cfg.output.dir, elapsed);
    generator_fit(cfg.output.dir);
    prediction(cfg.output.dir);
    fixed_point();
    spin_peaks(cfg.output.dir);

    PipelineConfig again = cfg;
    again.output.dir = root / "run_b";
    again.run.workers = 3;
    run_pipeline(again, parse_stages({"all"}));
    determinism(cfg.output.dir, again.output.dir);
  } catch (const std::exception& e) {
    std::printf("ERROR %s\n", e.what());
    return 1;
  }
  std::printf("acceptance %d/%d passed\n", passed, total);
  return 0;
}
