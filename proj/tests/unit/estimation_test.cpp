#include "qndtomo/error.hpp"
#include "qndtomo/estimation.hpp"
#include "qndtomo/random.hpp"

#include <doctest.h>

#include <cmath>

using namespace qndtomo;

namespace {

const double kKappa = 1.0 / 0.130;

// Exact model timelines from delta initial states under k.
std::map<int, DistributionTimeline> model_timelines(const GeneratorMatrix& k, double window, double step, int count) {
  std::map<int, DistributionTimeline> out;
  const auto grid = uniform_grid(window, step);
  for (int n0 = 0; n0 < k.size(); ++n0) {
    DistributionTimeline tl;
    tl.grid = grid;
    tl.table = Matrix(static_cast<Eigen::Index>(grid.size()), k.size());
    tl.realization_count.assign(grid.size(), count);
    for (std::size_t i = 0; i < grid.size(); ++i)
      tl.table.row(static_cast<Eigen::Index>(i)) =
          propagate(PhotonDistribution::delta(n0, k.n_max()), k, grid[i]).vec().transpose();
    out.emplace(n0, std::move(tl));
  }
  return out;
}

double max_relative_error(const GeneratorMatrix& fit, const GeneratorMatrix& truth) {
  double worst = 0.0;
  for (int r = 0; r < truth.size(); ++r)
    for (int c = 0; c < truth.size(); ++c)
      if (truth(r, c) != 0.0) worst = std::max(worst, std::abs(fit(r, c) - truth(r, c)) / std::abs(truth(r, c)));
  return worst;
}

DistributionTimeline mean_only_timeline(const std::vector<double>& t, const std::vector<double>& mean) {
  // two-point distributions on {0, 7} carrying the requested mean
  DistributionTimeline tl;
  tl.grid = t;
  tl.table = Matrix::Zero(static_cast<Eigen::Index>(t.size()), 8);
  tl.realization_count.assign(t.size(), 100);
  for (std::size_t i = 0; i < t.size(); ++i) {
    tl.table(static_cast<Eigen::Index>(i), 7) = mean[i] / 7.0;
    tl.table(static_cast<Eigen::Index>(i), 0) = 1.0 - mean[i] / 7.0;
  }
  return tl;
}

}  // namespace

TEST_SUITE("estimation") {

TEST_CASE("exponential fit recovers exact parameters") {
  std::vector<double> t, y;
  for (int i = 0; i <= 300; ++i) {
    t.push_back(0.002 * i);
    y.push_back(0.06 + 4.34 * std::exp(-t.back() / 0.130));
  }
  const ExpFit f = fit_exponential(t, y);
  CHECK(f.status == FitStatus::ok);
  CHECK(std::abs(f.time_constant - 0.130) < 1e-9);
  CHECK(std::abs(f.offset - 0.06) < 1e-9);
  CHECK(std::abs(f.amplitude - 4.34) < 1e-9);
  CHECK(f.rms_residual < 1e-9);
}

TEST_CASE("exponential fit is invariant under a time-origin shift") {
  std::vector<double> t, y, ts;
  for (int i = 0; i <= 100; ++i) {
    t.push_back(0.005 * i);
    y.push_back(0.1 + 3.0 * std::exp(-t.back() / 0.2));
    ts.push_back(t.back() + 0.37);
  }
  const ExpFit a = fit_exponential(t, y);
  const ExpFit b = fit_exponential(ts, y);
  CHECK(b.time_constant == doctest::Approx(a.time_constant).epsilon(1e-9));
  CHECK(b.offset == doctest::Approx(a.offset).epsilon(1e-9));
  CHECK(b.amplitude == doctest::Approx(a.amplitude * std::exp(0.37 / a.time_constant)).epsilon(1e-8));
}

TEST_CASE("constant data is flagged") {
  const std::vector<double> t{0.0, 0.1, 0.2, 0.3, 0.4}, y(5, 2.5);
  const ExpFit f = fit_exponential(t, y);
  CHECK(f.status == FitStatus::unidentifiable);
  for (double ti : t) CHECK(f.offset + f.amplitude * std::exp(-ti / f.time_constant) == doctest::Approx(2.5).epsilon(1e-9));
  CHECK_THROWS_AS(fit_exponential({0.0, 1.0, 2.0}, {1.0, 1.0, 1.0}), InvalidInput);
}

TEST_CASE("exponential fit of a timeline's mean photon number") {
  std::vector<double> t, m;
  for (int i = 0; i <= 50; ++i) {
    t.push_back(0.01 * i);
    m.push_back(0.06 + 4.0 * std::exp(-t.back() / 0.13));
  }
  DistributionTimeline tl = mean_only_timeline(t, m);
  tl.realization_count[5] = 3;  // ignored below the minimum
  tl.table.row(5).setZero();
  tl.table(5, 7) = 1.0;
  const ExpFit f = fit_exponential_mean(tl, 50);
  CHECK(std::abs(f.time_constant - 0.13) < 1e-9);
  CHECK(fit_exponential_mean(tl, 1).rms_residual > 1e-3);
}

TEST_CASE("Poisson fit") {
  const PoissonFit exact = fit_poisson(PhotonDistribution::truncated_poisson(2.0));
  CHECK(exact.mean == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(exact.tv_residual < 1e-10);

  // delta at 5: TV to any Poisson is 1 - q(5), and q(5) <= 5^5 e^-5 / 5! < 0.18
  const PoissonFit d = fit_poisson(PhotonDistribution::delta(5));
  CHECK(d.tv_residual > 0.3);
  CHECK(mean_photon(PhotonDistribution::truncated_poisson(d.mean)) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(d.tv_residual == doctest::Approx(1.0 - PhotonDistribution::truncated_poisson(d.mean)[5]).epsilon(1e-12));
}

TEST_CASE("noiseless generator fit is exact") {
  const GeneratorMatrix k = build_generator({kKappa, 0.06, 7});
  const auto data = model_timelines(k, 0.020, 0.002, 1000);
  for (ConstraintMode mode : {ConstraintMode::constrained, ConstraintMode::relaxed}) {
    GeneratorFitOptions o;
    o.mode = mode;
    const FitResult fit = fit_generator(data, o);
    CHECK(fit.residual < 1e-10);
    CHECK(max_relative_error(fit.k_hat, k) < 1e-6);
    CHECK(fit.all_stages_converged());
    CHECK(fit.stages.size() == 7);
    CHECK(fit.k_hat.max_column_sum() < 1e-9);
    for (int n0 = 0; n0 <= 7; ++n0) CHECK(fit.initial_dists.at(n0)[n0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(fit.kappa_seed > 0.5 * kKappa);
  }
}

TEST_CASE("constrained fits are valid generators on noisy data") {
  const GeneratorMatrix k = build_generator({kKappa, 0.06, 7});
  auto data = model_timelines(k, 0.020, 0.002, 200);
  Rng rng(17);
  for (auto& [n0, tl] : data)
    for (Eigen::Index i = 0; i < tl.table.rows(); ++i) {
      Vector row = tl.table.row(i).transpose();
      for (Eigen::Index n = 0; n < row.size(); ++n) row[n] = std::max(0.0, row[n] + 0.03 * (rng.uniform() - 0.5));
      tl.table.row(i) = (row / row.sum()).transpose();
    }
  const FitResult fit = fit_generator(data, {});
  CHECK(fit.k_hat.nonnegative());
  CHECK(fit.k_hat.max_column_sum() < 1e-9);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      if (r != c) CHECK(fit.k_hat(r, c) >= 0.0);
  for (const auto& [to, from] : fit.active_constraints) CHECK(fit.k_hat(to, from) == 0.0);
  CHECK(fit.k_stderr.rows() == 8);
  CHECK(fit.degrees_of_freedom > 0);
  for (const auto& [n0, p] : fit.initial_dists) CHECK(p.vec().sum() == doctest::Approx(1.0));

  GeneratorFitOptions relaxed;
  relaxed.mode = ConstraintMode::relaxed;
  const FitResult free = fit_generator(data, relaxed);
  CHECK(free.residual <= fit.residual * (1.0 + 1e-9));
  CHECK(free.k_hat.max_column_sum() < 1e-9);
}

TEST_CASE("generator fit input validation") {
  const auto data = model_timelines(build_generator({}), 0.020, 0.002, 100);
  std::map<int, DistributionTimeline> only_zero{{0, data.at(0)}};
  CHECK_THROWS_AS(fit_generator(only_zero, {}), InvalidInput);
  GeneratorFitOptions o;
  o.fit_window = 0.0;
  CHECK_THROWS_AS(fit_generator(data, o), InvalidInput);
}

TEST_CASE("finite-difference and forward sensitivities agree") {
  const Matrix k = build_generator({kKappa, 0.06, 7}).matrix();
  // perturbing K[2][3] with the diagonal following the column sum
  Matrix dk = Matrix::Zero(8, 8);
  dk(2, 3) = 1.0;
  dk(3, 3) = -1.0;
  const Vector p0 = PhotonDistribution::truncated_poisson(3.0).vec();
  const double t = 0.02, h = 1e-4;
  const Vector plus = propagate_raw(p0, GeneratorMatrix::relaxed(k + h * dk), t);
  const Vector minus = propagate_raw(p0, GeneratorMatrix::relaxed(k - h * dk), t);
  const Vector fd = (plus - minus) / (2 * h);
  const Vector fwd = propagate_sensitivity(p0, k, dk, t, 2000);
  CHECK((fd - fwd).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("prediction") {
  FitResult frozen;
  frozen.k_hat = GeneratorMatrix::zero();
  frozen.initial_dists.emplace(2, PhotonDistribution::truncated_poisson(2.0));
  const auto flat = predict_curves(frozen, uniform_grid(0.4, 0.01));
  for (Eigen::Index i = 0; i < flat.at(2).table.rows(); ++i)
    CHECK((flat.at(2).table.row(i) - flat.at(2).table.row(0)).cwiseAbs().maxCoeff() == 0.0);

  const GeneratorMatrix k = build_generator({});
  FitResult planted;
  planted.k_hat = k;
  for (int n0 = 0; n0 <= 7; ++n0) planted.initial_dists.emplace(n0, PhotonDistribution::delta(n0));
  const auto grid = uniform_grid(0.4, 0.002);
  const auto curves = predict_curves(planted, grid);
  for (int n0 = 0; n0 <= 7; ++n0)
    for (std::size_t i = 0; i < grid.size(); i += 20) {
      const Vector ref = propagate(PhotonDistribution::delta(n0), k, grid[i]).vec();
      CHECK((curves.at(n0).table.row(static_cast<Eigen::Index>(i)).transpose() - ref).cwiseAbs().maxCoeff() < 1e-12);
    }
  CHECK_THROWS_AS(predict_curves(planted, {0.1, 0.05}), InvalidInput);
}

TEST_CASE("Fock lifetimes") {
  const auto cold = fock_lifetimes(build_generator({kKappa, 0.0, 7}));
  CHECK_FALSE(cold[0].finite);
  CHECK(cold[1].lifetime == doctest::Approx(0.130).epsilon(1e-14));
  CHECK(cold[7].lifetime == doctest::Approx(0.130 / 7).epsilon(1e-14));
  CHECK(cold[7].lifetime * 1e3 == doctest::Approx(18.6).epsilon(0.01));
  for (int n = 1; n <= 7; ++n) CHECK(cold[static_cast<std::size_t>(n)].lifetime * n == doctest::Approx(0.130).epsilon(1e-14));

  const auto warm = fock_lifetimes(build_generator({kKappa, 0.06, 7}));
  CHECK(warm[1].lifetime == doctest::Approx(0.130 / 1.18).epsilon(1e-14));
  CHECK(warm[1].lifetime == doctest::Approx(0.110).epsilon(0.01));
  for (std::size_t n = 1; n < warm.size(); ++n) CHECK(warm[n].lifetime < warm[n - 1].lifetime);
}

TEST_CASE("diagonal law of the theoretical generator") {
  const LinearFit law = diagonal_law(build_generator({kKappa, 0.06, 7}), kKappa, 6);
  CHECK(law.slope == doctest::Approx(1.0 + 2 * 0.06).epsilon(1e-12));
  CHECK(law.intercept == doctest::Approx(0.06).epsilon(1e-10));
  CHECK_THROWS_AS(diagonal_law(build_generator({}), kKappa, 8), InvalidInput);
  const LinearFit line = linear_regression({1, 2, 3, 4}, {3, 5, 7, 9});
  CHECK(line.slope == doctest::Approx(2.0));
  CHECK(line.intercept == doctest::Approx(1.0));
  CHECK_THROWS_AS(linear_regression({1, 1}, {2, 3}), InvalidInput);
}

}  // TEST_SUITE
