#pragma once

// Photon-number distributions, rate generators and their exact propagation.
//
// The field is restricted to photon numbers 0..n_max. A distribution P evolves as
// dP/dt = K P, where K[n][n'] is the flow rate from n' into n (columns sum to zero).

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace qndtomo {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr int kDefaultNMax = 7;

/// Probability vector over photon numbers 0..n_max.
class PhotonDistribution {
 public:
  PhotonDistribution() = default;

  /// Builds a distribution from non-negative weights, normalizing them to unit sum.
  /// Entries in (-1e-12, 0) are treated as rounding noise and clamped to zero.
  explicit PhotonDistribution(const Vector& weights);
  explicit PhotonDistribution(std::span<const double> weights);

  static PhotonDistribution delta(int n, int n_max = kDefaultNMax);
  static PhotonDistribution flat(int n_max = kDefaultNMax);
  /// Poisson(mean) restricted to 0..n_max and renormalized.
  static PhotonDistribution truncated_poisson(double mean, int n_max = kDefaultNMax);

  int n_max() const noexcept { return static_cast<int>(p_.size()) - 1; }
  int size() const noexcept { return static_cast<int>(p_.size()); }
  double operator[](int n) const { return p_[n]; }
  const Vector& vec() const noexcept { return p_; }
  std::vector<double> to_vector() const { return {p_.data(), p_.data() + p_.size()}; }

  int argmax() const;

 private:
  Vector p_;
};

/// Rate matrix K with K[n][n'] the flow from n' to n.
///
/// A checked generator has zero column sums, non-negative off-diagonals and
/// non-positive diagonals. A relaxed generator only keeps zero column sums and
/// is used when fitting without sign constraints.
class GeneratorMatrix {
 public:
  GeneratorMatrix() = default;
  explicit GeneratorMatrix(Matrix rates);

  static GeneratorMatrix relaxed(Matrix rates);
  static GeneratorMatrix zero(int n_max = kDefaultNMax);

  int n_max() const noexcept { return static_cast<int>(k_.rows()) - 1; }
  int size() const noexcept { return static_cast<int>(k_.rows()); }
  double operator()(int to, int from) const { return k_(to, from); }
  const Matrix& matrix() const noexcept { return k_; }

  /// True when every off-diagonal entry is non-negative.
  bool nonnegative() const noexcept { return nonnegative_; }
  /// Largest |column sum|.
  double max_column_sum() const;

 private:
  struct Unchecked {};
  GeneratorMatrix(Matrix rates, Unchecked);

  Matrix k_;
  bool nonnegative_ = true;
};

struct CavityParams {
  double kappa = 1.0 / 0.130;  ///< field energy damping rate, 1/s
  double n_b = 0.06;           ///< mean blackbody photon number
  int n_max = kDefaultNMax;

  void validate() const;
};

/// Theoretical damping generator with the upward rate out of n_max removed.
GeneratorMatrix build_generator(const CavityParams& params);

/// exp(A) for a general square matrix by Taylor scaling and squaring.
Matrix matrix_exponential(const Matrix& a);

/// exp(K dt). For non-negative generators the series runs on the uniformized
/// (stochastic) matrix so every term is non-negative and no cancellation occurs.
Matrix transition_matrix(const GeneratorMatrix& k, double dt);

/// Solution of dP/dt = K P at time dt.
PhotonDistribution propagate(const PhotonDistribution& p, const GeneratorMatrix& k, double dt);

/// Same, on a raw vector; used with relaxed generators whose output may leave the simplex.
Vector propagate_raw(const Vector& p, const GeneratorMatrix& k, double dt);

/// Fixed-step classical Runge-Kutta integration of dP/dt = K P. Independent cross-check
/// of transition_matrix.
Vector propagate_rk4(const Vector& p, const Matrix& k, double dt, int steps);

/// Normalized P with K P = 0. Throws NumericalError if the null space is not one-dimensional.
PhotonDistribution stationary_distribution(const GeneratorMatrix& k);

double mean_photon(const PhotonDistribution& p);
double total_variation(const PhotonDistribution& p, const PhotonDistribution& q);

}  // namespace qndtomo
