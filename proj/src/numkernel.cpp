#include "qndtomo/numkernel.hpp"

#include "qndtomo/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qndtomo {

namespace {

constexpr double kNegativeNoise = 1e-12;

Vector checked_weights(Vector w) {
  if (w.size() < 2) throw InvalidInput("photon distribution needs at least two entries");
  double total = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) throw InvalidInput("photon distribution has a non-finite entry");
    if (w[i] < 0.0) {
      if (w[i] < -kNegativeNoise)
        throw InvalidInput("photon distribution has negative entry at n=" + std::to_string(i));
      w[i] = 0.0;
    }
    total += w[i];
  }
  if (!(total > 0.0)) throw InvalidInput("photon distribution has zero total weight");
  return w / total;
}

double column_sum_tolerance(const Matrix& k) {
  return 1e-12 * std::max(1.0, k.cwiseAbs().maxCoeff());
}

}  // namespace

PhotonDistribution::PhotonDistribution(const Vector& weights) : p_(checked_weights(weights)) {}

PhotonDistribution::PhotonDistribution(std::span<const double> weights)
    : PhotonDistribution(Vector(Eigen::Map<const Vector>(weights.data(),
                                                         static_cast<Eigen::Index>(weights.size())))) {}

PhotonDistribution PhotonDistribution::delta(int n, int n_max) {
  if (n_max < 1 || n < 0 || n > n_max) throw InvalidInput("delta: photon number out of range");
  Vector w = Vector::Zero(n_max + 1);
  w[n] = 1.0;
  return PhotonDistribution(w);
}

PhotonDistribution PhotonDistribution::flat(int n_max) {
  if (n_max < 1) throw InvalidInput("flat: n_max must be >= 1");
  return PhotonDistribution(Vector::Ones(n_max + 1));
}

PhotonDistribution PhotonDistribution::truncated_poisson(double mean, int n_max) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) throw InvalidInput("truncated_poisson: mean must be >= 0");
  if (n_max < 1) throw InvalidInput("truncated_poisson: n_max must be >= 1");
  if (mean == 0.0) return delta(0, n_max);
  // log-domain terms, shifted by the largest to stay finite for large means
  Vector logw(n_max + 1);
  for (int n = 0; n <= n_max; ++n) logw[n] = n * std::log(mean) - std::lgamma(n + 1.0);
  const double top = logw.maxCoeff();
  return PhotonDistribution(Vector((logw.array() - top).exp()));
}

int PhotonDistribution::argmax() const {
  Eigen::Index i = 0;
  p_.maxCoeff(&i);
  return static_cast<int>(i);
}

GeneratorMatrix::GeneratorMatrix(Matrix rates) : k_(std::move(rates)) {
  if (k_.rows() != k_.cols() || k_.rows() < 2) throw InvalidInput("generator must be square with n_max >= 1");
  if (!k_.allFinite()) throw InvalidInput("generator has non-finite entries");
  const double tol = column_sum_tolerance(k_);
  for (Eigen::Index c = 0; c < k_.cols(); ++c) {
    if (std::abs(k_.col(c).sum()) > tol)
      throw InvalidInput("generator column " + std::to_string(c) + " does not sum to zero");
    for (Eigen::Index r = 0; r < k_.rows(); ++r) {
      if (r != c && k_(r, c) < 0.0)
        throw InvalidInput("generator off-diagonal K[" + std::to_string(r) + "][" + std::to_string(c) +
                           "] is negative");
    }
  }
}

GeneratorMatrix::GeneratorMatrix(Matrix rates, Unchecked) : k_(std::move(rates)) {
  for (Eigen::Index c = 0; c < k_.cols(); ++c)
    for (Eigen::Index r = 0; r < k_.rows(); ++r)
      if (r != c && k_(r, c) < 0.0) nonnegative_ = false;
}

GeneratorMatrix GeneratorMatrix::relaxed(Matrix rates) {
  if (rates.rows() != rates.cols() || rates.rows() < 2)
    throw InvalidInput("generator must be square with n_max >= 1");
  if (!rates.allFinite()) throw InvalidInput("generator has non-finite entries");
  const double tol = column_sum_tolerance(rates);
  for (Eigen::Index c = 0; c < rates.cols(); ++c)
    if (std::abs(rates.col(c).sum()) > tol)
      throw InvalidInput("generator column " + std::to_string(c) + " does not sum to zero");
  return GeneratorMatrix(std::move(rates), Unchecked{});
}

GeneratorMatrix GeneratorMatrix::zero(int n_max) {
  if (n_max < 1) throw InvalidInput("n_max must be >= 1");
  return GeneratorMatrix(Matrix::Zero(n_max + 1, n_max + 1));
}

double GeneratorMatrix::max_column_sum() const {
  return k_.colwise().sum().cwiseAbs().maxCoeff();
}

void CavityParams::validate() const {
  if (!std::isfinite(kappa) || !(kappa > 0.0)) throw InvalidInput("cavity: kappa must be finite and > 0");
  if (!std::isfinite(n_b) || n_b < 0.0) throw InvalidInput("cavity: n_b must be finite and >= 0");
  if (n_max < 1) throw InvalidInput("cavity: n_max must be >= 1");
}

GeneratorMatrix build_generator(const CavityParams& params) {
  params.validate();
  const int dim = params.n_max + 1;
  const double down = params.kappa * (1.0 + params.n_b);
  const double up = params.kappa * params.n_b;
  Matrix k = Matrix::Zero(dim, dim);
  for (int n = 0; n < dim; ++n) {
    if (n + 1 < dim) k(n, n + 1) = down * (n + 1);
    if (n >= 1) k(n, n - 1) = up * n;
  }
  // diagonal from the column sums: equals -kappa[(1+n_b)n + n_b(n+1)] except at
  // n_max, whose upward channel is cut
  for (int c = 0; c < dim; ++c) {
    double out = 0.0;
    for (int r = 0; r < dim; ++r)
      if (r != c) out += k(r, c);
    k(c, c) = -out;
  }
  return GeneratorMatrix(std::move(k));
}

Matrix matrix_exponential(const Matrix& a) {
  if (a.rows() != a.cols()) throw InvalidInput("matrix_exponential: matrix must be square");
  if (!a.allFinite()) throw InvalidInput("matrix_exponential: non-finite entries");
  const Eigen::Index dim = a.rows();
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix b = a / std::ldexp(1.0, squarings);

  Matrix sum = Matrix::Identity(dim, dim);
  Matrix term = Matrix::Identity(dim, dim);
  bool converged = false;
  for (int k = 1; k <= 40; ++k) {
    term = term * b / static_cast<double>(k);
    sum += term;
    if (term.cwiseAbs().maxCoeff() <= 1e-18 * sum.cwiseAbs().maxCoeff()) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NumericalError("matrix_exponential: Taylor series did not converge");
  for (int s = 0; s < squarings; ++s) sum = sum * sum;
  return sum;
}

Matrix transition_matrix(const GeneratorMatrix& k, double dt) {
  if (!(dt >= 0.0) || !std::isfinite(dt)) throw InvalidInput("propagate: dt must be finite and >= 0");
  const Matrix& rates = k.matrix();
  const Eigen::Index dim = rates.rows();
  if (dt == 0.0) return Matrix::Identity(dim, dim);
  if (!k.nonnegative()) return matrix_exponential(rates * dt);

  const double q = (-rates.diagonal()).maxCoeff();
  if (!(q > 0.0)) return Matrix::Identity(dim, dim);

  // exp(K dt) = exp(-tau) exp(tau S) with S = I + K/q column-stochastic
  Matrix stochastic = Matrix::Identity(dim, dim) + rates / q;
  stochastic = stochastic.cwiseMax(0.0);
  const double tau = q * dt;
  int squarings = 0;
  if (tau > 0.5) squarings = static_cast<int>(std::ceil(std::log2(tau / 0.5)));
  const double step = tau / std::ldexp(1.0, squarings);

  Matrix sum = Matrix::Identity(dim, dim);
  Matrix term = Matrix::Identity(dim, dim);
  bool converged = false;
  for (int n = 1; n <= 40; ++n) {
    term = term * stochastic * (step / n);
    sum += term;
    if (term.maxCoeff() <= 1e-18) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NumericalError("propagate: uniformized series did not converge");
  sum *= std::exp(-step);
  for (int s = 0; s < squarings; ++s) sum = sum * sum;
  return sum;
}

PhotonDistribution propagate(const PhotonDistribution& p, const GeneratorMatrix& k, double dt) {
  if (p.size() != k.size()) throw InvalidInput("propagate: dimension mismatch");
  if (dt == 0.0) return p;
  const Vector out = transition_matrix(k, dt) * p.vec();
  if (std::abs(out.sum() - 1.0) > 1e-10) throw NumericalError("propagate: normalization drift above 1e-10");
  return PhotonDistribution(out);
}

Vector propagate_raw(const Vector& p, const GeneratorMatrix& k, double dt) {
  if (p.size() != k.size()) throw InvalidInput("propagate: dimension mismatch");
  return transition_matrix(k, dt) * p;
}

Vector propagate_rk4(const Vector& p, const Matrix& k, double dt, int steps) {
  if (steps < 1) throw InvalidInput("propagate_rk4: steps must be >= 1");
  if (!(dt >= 0.0)) throw InvalidInput("propagate_rk4: dt must be >= 0");
  const double h = dt / steps;
  Vector y = p;
  for (int s = 0; s < steps; ++s) {
    const Vector k1 = k * y;
    const Vector k2 = k * (y + 0.5 * h * k1);
    const Vector k3 = k * (y + 0.5 * h * k2);
    const Vector k4 = k * (y + h * k3);
    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return y;
}

PhotonDistribution stationary_distribution(const GeneratorMatrix& k) {
  const Eigen::JacobiSVD<Matrix> svd(k.matrix(), Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  const double top = sv[0];
  int null_dim = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (!(sv[i] > 1e-10 * top)) ++null_dim;
  if (null_dim != 1)
    throw NumericalError("stationary_distribution: null space has dimension " + std::to_string(null_dim));
  Vector v = svd.matrixV().col(sv.size() - 1);
  v /= v.sum();
  return PhotonDistribution(Vector(v.cwiseMax(0.0)));
}

double mean_photon(const PhotonDistribution& p) {
  double m = 0.0;
  for (int n = 0; n < p.size(); ++n) m += n * p[n];
  return m;
}

double total_variation(const PhotonDistribution& p, const PhotonDistribution& q) {
  if (p.size() != q.size()) throw InvalidInput("total_variation: dimension mismatch");
  return 0.5 * (p.vec() - q.vec()).cwiseAbs().sum();
}

}  // namespace qndtomo
