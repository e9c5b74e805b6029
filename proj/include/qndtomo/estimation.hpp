#pragma once

// Physical parameters from reconstructed timelines: exponential mean-photon decay,
// Poisson fits, and the staged fit of the full damping generator.

#include "qndtomo/ensemble.hpp"
#include "qndtomo/numkernel.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace qndtomo {

enum class FitStatus { ok, unidentifiable, not_converged };

const char* to_string(FitStatus status);

/// <n>(t) = offset + amplitude exp(-t / time_constant)
struct ExpFit {
  double time_constant = 0.0;  ///< s
  double offset = 0.0;
  double amplitude = 0.0;
  double rms_residual = 0.0;
  FitStatus status = FitStatus::ok;
};

/// Fits the mean photon number of every grid point with at least `min_realizations`
/// (and at least one) realization.
ExpFit fit_exponential_mean(const DistributionTimeline& timeline, int min_realizations = 1);
ExpFit fit_exponential(const std::vector<double>& t, const std::vector<double>& y);

struct PoissonFit {
  double mean = 0.0;         ///< Poisson parameter of the best truncated fit
  double tv_residual = 0.0;  ///< total-variation distance to that fit
};

/// Maximum-likelihood truncated Poisson; the ML condition is equality of means.
PoissonFit fit_poisson(const PhotonDistribution& p);

enum class ConstraintMode {
  constrained,  ///< off-diagonals bounded below by zero (K stays a valid generator)
  relaxed,      ///< off-diagonals free in sign; column sums still zero
};

struct GeneratorFitOptions {
  double fit_window = 0.020;  ///< s, grid points with t <= fit_window enter the fit
  ConstraintMode mode = ConstraintMode::constrained;
  double variance_floor = 1e-3;  ///< floor on P(1-P) in the binomial weights
  int min_realizations = 1;
  int max_iterations = 400;
};

struct StageReport {
  int stage = 0;  ///< block size minus one
  int parameters = 0;
  int residuals = 0;
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

struct FitResult {
  GeneratorMatrix k_hat;
  std::map<int, PhotonDistribution> initial_dists;  ///< per n0, at t = 0
  double residual = 0.0;                             ///< weighted sum of squares
  int degrees_of_freedom = 0;
  Matrix k_stderr;  ///< standard errors of k_hat entries (diagonal derived)
  std::vector<StageReport> stages;
  std::vector<std::pair<int, int>> active_constraints;  ///< (to, from) pinned at zero
  ConstraintMode mode = ConstraintMode::constrained;
  double fit_window = 0.0;
  double kappa_seed = 0.0;  ///< damping rate estimated in stage 1, 1/s
  double n_b_seed = 0.0;

  bool all_stages_converged() const;
};

/// Staged weighted least-squares fit of K and the initial distributions to Fock-selected
/// timelines. Stage s frees the off-diagonals of the leading (s+1) block and includes the
/// timelines with n0 <= s; earlier parameters are re-optimized at every stage.
FitResult fit_generator(const std::map<int, DistributionTimeline>& ensembles,
                        const GeneratorFitOptions& options = {});

/// Model P_{n0}(n, t) for every fitted n0. Predicted timelines carry zero realization counts.
std::map<int, DistributionTimeline> predict_curves(const FitResult& fit, const std::vector<double>& grid);

struct FockLifetime {
  int n = 0;
  double lifetime = 0.0;  ///< -1/K[n][n] s; infinite when the diagonal is not negative
  bool finite = true;
};

std::vector<FockLifetime> fock_lifetimes(const GeneratorMatrix& k);
std::vector<FockLifetime> fock_lifetimes(const FitResult& fit);

/// d P(t) / d theta for dP/dt = K P with dK/dtheta = dk, by RK4 on the forward
/// sensitivity system. Cross-check for finite-difference Jacobians.
Vector propagate_sensitivity(const Vector& p0, const Matrix& k, const Matrix& dk, double t, int steps);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Ordinary least-squares line through (x, y).
LinearFit linear_regression(const std::vector<double>& x, const std::vector<double>& y);

/// Line through (n, -K[n][n] / kappa) for n = 0..last_n.
LinearFit diagonal_law(const GeneratorMatrix& k, double kappa, int last_n);

}  // namespace qndtomo
