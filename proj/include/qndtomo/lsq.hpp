#pragma once

// Small dense nonlinear least squares (Levenberg-Marquardt trust region).

#include <Eigen/Dense>

#include <functional>
#include <string>

namespace qndtomo {

struct LeastSquaresOptions {
  int max_iterations = 500;
  double gradient_tol = 1e-14;  ///< on |J^T r|_inf relative to (1 + cost)
  double step_tol = 1e-13;      ///< on |dx| relative to (|x| + step_tol)
  double cost_tol = 1e-15;      ///< relative decrease of an accepted step
  double fd_step = 1e-6;        ///< relative central-difference step
};

struct LeastSquaresResult {
  Eigen::VectorXd x;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;  ///< at x
  double cost = 0.0;         ///< sum of squared residuals
  int iterations = 0;
  bool converged = false;
  std::string message;
};

using ResidualFunction = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Central-difference Jacobian of f at x.
Eigen::MatrixXd numeric_jacobian(const ResidualFunction& f, const Eigen::VectorXd& x, double rel_step = 1e-6);

/// Minimizes |f(x)|^2 from x0.
LeastSquaresResult levenberg_marquardt(const ResidualFunction& f, Eigen::VectorXd x0,
                                       const LeastSquaresOptions& options = {});

/// Same, subject to x >= lower (componentwise; -inf entries are unbounded). Steps are
/// projected onto the feasible box and parameters held at a bound by the gradient are
/// frozen for that step. x0 is clamped into the box first.
LeastSquaresResult levenberg_marquardt(const ResidualFunction& f, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                                       const LeastSquaresOptions& options = {});

}  // namespace qndtomo
