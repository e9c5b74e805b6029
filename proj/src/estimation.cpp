#include "qndtomo/estimation.hpp"

#include "qndtomo/error.hpp"
#include "qndtomo/lsq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace qndtomo {

const char* to_string(FitStatus status) {
  switch (status) {
    case FitStatus::ok: return "ok";
    case FitStatus::unidentifiable: return "unidentifiable";
    case FitStatus::not_converged: return "not_converged";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// exponential decay of the mean photon number

ExpFit fit_exponential(const std::vector<double>& t, const std::vector<double>& y) {
  if (t.size() != y.size()) throw InvalidInput("fit_exponential: t and y differ in length");
  if (t.size() < 4) throw InvalidInput("fit_exponential: need at least 4 points");
  const auto m = static_cast<Eigen::Index>(t.size());
  const auto [tmin_it, tmax_it] = std::minmax_element(t.begin(), t.end());
  const double span = *tmax_it - *tmin_it;
  if (!(span > 0.0)) throw InvalidInput("fit_exponential: time points must span a positive interval");

  // for a fixed rate the model is linear in (offset, amplitude)
  auto linear_part = [&](double rate, double& offset, double& amplitude) {
    Eigen::MatrixXd basis(m, 2);
    Eigen::VectorXd rhs(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      basis(i, 0) = 1.0;
      basis(i, 1) = std::exp(-rate * (t[static_cast<std::size_t>(i)] - *tmin_it));
      rhs[i] = y[static_cast<std::size_t>(i)];
    }
    const Eigen::Vector2d c = basis.colPivHouseholderQr().solve(rhs);
    offset = c[0];
    amplitude = c[1];
    return (basis * c - rhs).squaredNorm();
  };

  double best_rate = 1.0 / span;
  double best_cost = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 240; ++i) {
    const double rate = 0.05 / span * std::pow(10.0, i * 5.0 / 240.0);
    double off = 0.0, amp = 0.0;
    const double c = linear_part(rate, off, amp);
    if (c < best_cost) {
      best_cost = c;
      best_rate = rate;
    }
  }
  double off0 = 0.0, amp0 = 0.0;
  linear_part(best_rate, off0, amp0);

  // amplitude is referenced to the first time point inside the optimization
  const ResidualFunction residual = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(m);
    const double rate = std::exp(p[2]);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto k = static_cast<std::size_t>(i);
      r[i] = p[0] + p[1] * std::exp(-rate * (t[k] - *tmin_it)) - y[k];
    }
    return r;
  };
  LeastSquaresOptions opts;
  opts.fd_step = 1e-7;
  const LeastSquaresResult res = levenberg_marquardt(residual, Eigen::Vector3d(off0, amp0, std::log(best_rate)), opts);

  ExpFit fit;
  const double rate = std::exp(res.x[2]);
  fit.time_constant = 1.0 / rate;
  fit.offset = res.x[0];
  fit.amplitude = res.x[1] * std::exp(rate * *tmin_it);
  fit.rms_residual = std::sqrt(res.cost / static_cast<double>(m));
  const double signal = std::abs(res.x[1]) * (1.0 - std::exp(-rate * span));
  const double scale = std::max(1.0, std::abs(fit.offset));
  if (!(signal > 1e-8 * scale) || signal < fit.rms_residual)
    fit.status = FitStatus::unidentifiable;
  else if (!res.converged)
    fit.status = FitStatus::not_converged;
  return fit;
}

ExpFit fit_exponential_mean(const DistributionTimeline& timeline, int min_realizations) {
  const std::vector<double> means = timeline.mean_photon();
  std::vector<double> t, y;
  for (std::size_t i = 0; i < timeline.size(); ++i) {
    if (timeline.realization_count[i] <= 0 || timeline.realization_count[i] < min_realizations) continue;
    t.push_back(timeline.grid[i]);
    y.push_back(means[i]);
  }
  return fit_exponential(t, y);
}

// ---------------------------------------------------------------------------

PoissonFit fit_poisson(const PhotonDistribution& p) {
  const int n_max = p.n_max();
  const double target = mean_photon(p);
  auto truncated_mean = [&](double mu) { return mean_photon(PhotonDistribution::truncated_poisson(mu, n_max)); };
  double lo = 0.0;
  double hi = std::max(1.0, target);
  while (truncated_mean(hi) < target && hi < 1e8) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (truncated_mean(mid) < target ? lo : hi) = mid;
  }
  PoissonFit fit;
  fit.mean = 0.5 * (lo + hi);
  fit.tv_residual = total_variation(p, PhotonDistribution::truncated_poisson(fit.mean, n_max));
  return fit;
}

// ---------------------------------------------------------------------------
// staged generator fit

namespace {

struct Series {
  int n0 = 0;
  std::vector<double> t;
  std::vector<Vector> data;
  std::vector<double> count;
};

using Entry = std::pair<int, int>;  // (to, from)

class GeneratorModel {
 public:
  GeneratorModel(int dim, ConstraintMode mode, std::vector<Entry> free_entries, Matrix background,
                 std::vector<const Series*> series, double variance_floor)
      : dim_(dim),
        mode_(mode),
        free_(std::move(free_entries)),
        background_(std::move(background)),
        series_(std::move(series)),
        floor_(variance_floor) {}

  int k_params() const { return static_cast<int>(free_.size()); }
  int param_count() const { return k_params() + dim_ * static_cast<int>(series_.size()); }
  const std::vector<Entry>& free_entries() const { return free_; }

  Matrix generator(const Vector& theta) const {
    Matrix k = background_;
    for (std::size_t i = 0; i < free_.size(); ++i) k(free_[i].first, free_[i].second) = theta[static_cast<Eigen::Index>(i)];
    k.diagonal().setZero();
    const Vector outflow = k.colwise().sum().transpose();
    k.diagonal() = -outflow;
    return k;
  }

  Vector initial(const Vector& theta, std::size_t s) const {
    return theta.segment(k_params() + dim_ * static_cast<Eigen::Index>(s), dim_);
  }

  /// Off-diagonals bounded below by 0 in constrained mode, initial populations always.
  Vector lower_bounds() const {
    Vector lo = Vector::Zero(param_count());
    if (mode_ == ConstraintMode::relaxed) lo.head(k_params()).setConstant(-std::numeric_limits<double>::infinity());
    return lo;
  }

  int residual_count() const {
    int m = 0;
    for (const Series* s : series_) m += static_cast<int>(s->t.size()) * dim_;
    return m;
  }

  /// Weighted residuals for generator `k` and the initial distributions `init`.
  Vector residuals(const Matrix& k, const std::vector<Vector>& init) const {
    const GeneratorMatrix gen = GeneratorMatrix::relaxed(k);
    std::vector<std::pair<double, Matrix>> steps;  // exp(K dt) cache
    auto step_matrix = [&](double dt) -> const Matrix& {
      for (const auto& [d, mat] : steps)
        if (std::abs(d - dt) <= 1e-15 * std::max(1.0, dt)) return mat;
      steps.emplace_back(dt, transition_matrix(gen, dt));
      return steps.back().second;
    };
    Vector r(residual_count());
    Eigen::Index pos = 0;
    for (std::size_t s = 0; s < series_.size(); ++s) {
      const Series& ser = *series_[s];
      Vector p = init[s];
      double t = 0.0;
      for (std::size_t i = 0; i < ser.t.size(); ++i) {
        if (ser.t[i] > t) {
          p = step_matrix(ser.t[i] - t) * p;
          t = ser.t[i];
        }
        for (int n = 0; n < dim_; ++n) {
          const double d = ser.data[i][n];
          const double w = ser.count[i] / std::max(d * (1.0 - d), floor_);
          r[pos++] = std::sqrt(w) * (p[n] - d);
        }
      }
    }
    return r;
  }

  Vector residuals(const Vector& theta) const {
    std::vector<Vector> init;
    init.reserve(series_.size());
    for (std::size_t s = 0; s < series_.size(); ++s) init.push_back(initial(theta, s));
    return residuals(generator(theta), init);
  }

 private:
  int dim_;
  ConstraintMode mode_;
  std::vector<Entry> free_;
  Matrix background_;
  std::vector<const Series*> series_;
  double floor_;
};

double regression_slope(const Series& s, int n, std::size_t points) {
  const std::size_t m = std::min(points, s.t.size());
  if (m < 2) return 0.0;
  std::vector<double> x(s.t.begin(), s.t.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<double> y;
  for (std::size_t i = 0; i < m; ++i) y.push_back(s.data[i][n]);
  return linear_regression(x, y).slope;
}

Matrix theoretical_offdiagonal(int dim, double kappa, double n_b) {
  Matrix k = Matrix::Zero(dim, dim);
  for (int n = 0; n + 1 < dim; ++n) {
    k(n, n + 1) = kappa * (1.0 + n_b) * (n + 1);
    k(n + 1, n) = kappa * n_b * (n + 1);
  }
  return k;
}

}  // namespace

bool FitResult::all_stages_converged() const {
  return std::all_of(stages.begin(), stages.end(), [](const StageReport& s) { return s.converged; });
}

FitResult fit_generator(const std::map<int, DistributionTimeline>& ensembles, const GeneratorFitOptions& options) {
  if (!(options.fit_window > 0.0)) throw InvalidInput("fit_generator: fit window must be > 0");
  if (!ensembles.count(0) || !ensembles.count(1))
    throw InvalidInput("fit_generator: ensembles for n0 = 0 and n0 = 1 are required");
  const int dim = ensembles.begin()->second.n_max() + 1;
  const int n_max = dim - 1;

  std::map<int, Series> series;
  for (const auto& [n0, tl] : ensembles) {
    if (tl.n_max() + 1 != dim) throw InvalidInput("fit_generator: timelines differ in n_max");
    if (n0 < 0 || n0 > n_max) throw InvalidInput("fit_generator: n0 out of range");
    Series s;
    s.n0 = n0;
    for (std::size_t i = 0; i < tl.size(); ++i) {
      if (tl.grid[i] < 0.0 || tl.grid[i] > options.fit_window * (1.0 + 1e-12)) continue;
      const int count = tl.realization_count[i];
      if (count <= 0 || count < options.min_realizations) continue;
      s.t.push_back(tl.grid[i]);
      s.data.push_back(tl.table.row(static_cast<Eigen::Index>(i)).transpose());
      s.count.push_back(count);
    }
    if (s.t.size() < 2) {
      if (n0 <= 1) throw InvalidInput("fit_generator: n0 = " + std::to_string(n0) + " has fewer than 2 usable points");
      continue;
    }
    series.emplace(n0, std::move(s));
  }

  // stage-1 seeds from initial slopes
  const Series& s0 = series.at(0);
  const Series& s1 = series.at(1);
  const double rate_floor = 0.1 / options.fit_window;
  const double down = std::max(-regression_slope(s1, 1, 4) / std::max(s1.data[0][1], 0.1), rate_floor);
  const double up = std::max(regression_slope(s0, 1, 4) / std::max(s0.data[0][0], 0.1), 1e-3 * down);
  FitResult result;
  result.mode = options.mode;
  result.fit_window = options.fit_window;
  result.kappa_seed = std::max(down - up, 0.5 * down);
  result.n_b_seed = up / result.kappa_seed;
  const Matrix pattern = theoretical_offdiagonal(dim, result.kappa_seed, result.n_b_seed);

  std::map<Entry, double> k_values;  // fitted so far
  std::map<int, Vector> init_values;
  LeastSquaresOptions lsq;
  lsq.max_iterations = options.max_iterations;
  lsq.gradient_tol = 1e-12;
  lsq.cost_tol = 1e-13;

  std::vector<Entry> free_entries;
  std::vector<const Series*> included;
  for (int stage = 1; stage <= n_max; ++stage) {
    free_entries.clear();
    for (int from = 0; from <= stage; ++from)
      for (int to = 0; to <= stage; ++to)
        if (to != from) free_entries.emplace_back(to, from);
    included.clear();
    for (const auto& [n0, s] : series)
      if (n0 <= stage) included.push_back(&s);

    GeneratorModel model(dim, options.mode, free_entries, pattern, included, options.variance_floor);
    Vector theta(model.param_count());
    for (std::size_t i = 0; i < free_entries.size(); ++i) {
      const Entry e = free_entries[i];
      theta[static_cast<Eigen::Index>(i)] = k_values.count(e) ? k_values.at(e) : pattern(e.first, e.second);
    }
    for (std::size_t s = 0; s < included.size(); ++s) {
      const int n0 = included[s]->n0;
      theta.segment(model.k_params() + dim * static_cast<Eigen::Index>(s), dim) =
          init_values.count(n0) ? init_values.at(n0) : Vector(included[s]->data.front().cwiseMax(0.0));
    }

    const LeastSquaresResult res = levenberg_marquardt([&](const Vector& th) { return model.residuals(th); }, theta,
                                                       model.lower_bounds(), lsq);
    const Matrix k = model.generator(res.x);
    for (std::size_t i = 0; i < free_entries.size(); ++i) k_values[free_entries[i]] = res.x[static_cast<Eigen::Index>(i)];
    for (std::size_t s = 0; s < included.size(); ++s) init_values[included[s]->n0] = model.initial(res.x, s);

    StageReport report;
    report.stage = stage;
    report.parameters = model.param_count();
    report.residuals = model.residual_count();
    report.cost = res.cost;
    report.iterations = res.iterations;
    report.converged = res.converged;
    report.message = res.message;
    result.stages.push_back(report);

    if (stage == n_max) {
      result.residual = res.cost;
      result.k_hat = options.mode == ConstraintMode::constrained ? GeneratorMatrix(k) : GeneratorMatrix::relaxed(k);
      for (std::size_t s = 0; s < included.size(); ++s)
        result.initial_dists.emplace(included[s]->n0, PhotonDistribution(model.initial(res.x, s)));
      if (options.mode == ConstraintMode::constrained)
        for (std::size_t i = 0; i < free_entries.size(); ++i)
          if (res.x[static_cast<Eigen::Index>(i)] <= 0.0) result.active_constraints.push_back(free_entries[i]);

      // covariance from the final Jacobian; parameters are already the natural ones
      const int kp = model.k_params();
      result.degrees_of_freedom = std::max(1, model.residual_count() - model.param_count());
      const double sigma2 = res.cost / result.degrees_of_freedom;
      const Matrix& jac = res.jacobian;
      const Matrix cov = sigma2 * Matrix(jac.transpose() * jac).completeOrthogonalDecomposition().pseudoInverse();
      result.k_stderr = Matrix::Zero(dim, dim);
      for (int i = 0; i < kp; ++i) {
        const Entry e = free_entries[static_cast<std::size_t>(i)];
        result.k_stderr(e.first, e.second) = std::sqrt(std::max(cov(i, i), 0.0));
      }
      for (int col = 0; col < dim; ++col) {
        double var = 0.0;
        for (int i = 0; i < kp; ++i)
          for (int j = 0; j < kp; ++j)
            if (free_entries[static_cast<std::size_t>(i)].second == col &&
                free_entries[static_cast<std::size_t>(j)].second == col)
              var += cov(i, j);
        result.k_stderr(col, col) = std::sqrt(std::max(var, 0.0));
      }
    }
  }
  return result;
}

std::map<int, DistributionTimeline> predict_curves(const FitResult& fit, const std::vector<double>& grid) {
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < 0.0) throw InvalidInput("predict_curves: grid times must be >= 0");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw InvalidInput("predict_curves: grid must be strictly increasing");
  }
  std::map<int, DistributionTimeline> out;
  const int dim = fit.k_hat.size();
  for (const auto& [n0, init] : fit.initial_dists) {
    DistributionTimeline tl;
    tl.grid = grid;
    tl.table = Matrix(static_cast<Eigen::Index>(grid.size()), dim);
    tl.realization_count.assign(grid.size(), 0);
    Vector p = init.vec();
    double t = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      p = propagate_raw(p, fit.k_hat, grid[i] - t);
      t = grid[i];
      tl.table.row(static_cast<Eigen::Index>(i)) = p.transpose();
    }
    out.emplace(n0, std::move(tl));
  }
  return out;
}

std::vector<FockLifetime> fock_lifetimes(const GeneratorMatrix& k) {
  std::vector<FockLifetime> out;
  for (int n = 0; n < k.size(); ++n) {
    const double diag = k(n, n);
    if (diag < 0.0)
      out.push_back({n, -1.0 / diag, true});
    else
      out.push_back({n, std::numeric_limits<double>::infinity(), false});
  }
  return out;
}

std::vector<FockLifetime> fock_lifetimes(const FitResult& fit) { return fock_lifetimes(fit.k_hat); }

Vector propagate_sensitivity(const Vector& p0, const Matrix& k, const Matrix& dk, double t, int steps) {
  if (steps < 1) throw InvalidInput("propagate_sensitivity: steps must be >= 1");
  const double h = t / steps;
  Vector p = p0;
  Vector s = Vector::Zero(p0.size());
  auto rhs = [&](const Vector& pp, const Vector& ss, Vector& dp, Vector& ds) {
    dp = k * pp;
    ds = k * ss + dk * pp;
  };
  Vector dp1, ds1, dp2, ds2, dp3, ds3, dp4, ds4;
  for (int i = 0; i < steps; ++i) {
    rhs(p, s, dp1, ds1);
    rhs(p + 0.5 * h * dp1, s + 0.5 * h * ds1, dp2, ds2);
    rhs(p + 0.5 * h * dp2, s + 0.5 * h * ds2, dp3, ds3);
    rhs(p + h * dp3, s + h * ds3, dp4, ds4);
    p += h / 6.0 * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4);
    s += h / 6.0 * (ds1 + 2.0 * ds2 + 2.0 * ds3 + ds4);
  }
  return s;
}

LinearFit linear_regression(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidInput("linear_regression: need >= 2 paired points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw InvalidInput("linear_regression: x values are all equal");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

LinearFit diagonal_law(const GeneratorMatrix& k, double kappa, int last_n) {
  if (!(kappa > 0.0)) throw InvalidInput("diagonal_law: kappa must be > 0");
  if (last_n < 1 || last_n > k.n_max()) throw InvalidInput("diagonal_law: last_n must lie in [1, n_max]");
  std::vector<double> x, y;
  for (int n = 0; n <= last_n; ++n) {
    x.push_back(n);
    y.push_back(-k(n, n) / kappa);
  }
  return linear_regression(x, y);
}

}  // namespace qndtomo
