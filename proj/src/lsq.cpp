#include "qndtomo/lsq.hpp"

#include "qndtomo/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace qndtomo {

Eigen::MatrixXd numeric_jacobian(const ResidualFunction& f, const Eigen::VectorXd& x, double rel_step) {
  Eigen::VectorXd probe = x;
  Eigen::MatrixXd jac;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = rel_step * std::max(std::abs(x[j]), 1e-3);
    probe[j] = x[j] + h;
    const Eigen::VectorXd up = f(probe);
    probe[j] = x[j] - h;
    const Eigen::VectorXd down = f(probe);
    probe[j] = x[j];
    if (j == 0) jac.resize(up.size(), x.size());
    jac.col(j) = (up - down) / (2.0 * h);
  }
  return jac;
}

LeastSquaresResult levenberg_marquardt(const ResidualFunction& f, Eigen::VectorXd x0,
                                       const LeastSquaresOptions& options) {
  const Eigen::VectorXd lower = Eigen::VectorXd::Constant(x0.size(), -std::numeric_limits<double>::infinity());
  return levenberg_marquardt(f, std::move(x0), lower, options);
}

LeastSquaresResult levenberg_marquardt(const ResidualFunction& f, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                                       const LeastSquaresOptions& options) {
  if (lower.size() != x0.size()) throw InvalidInput("levenberg_marquardt: bound vector has the wrong size");
  LeastSquaresResult out;
  out.x = x0.cwiseMax(lower);
  out.residuals = f(out.x);
  if (!out.residuals.allFinite()) throw NumericalError("levenberg_marquardt: non-finite residuals at start");
  out.cost = out.residuals.squaredNorm();
  if (out.x.size() == 0) {
    out.converged = true;
    out.message = "no parameters";
    return out;
  }

  const Eigen::Index n = out.x.size();
  out.jacobian = numeric_jacobian(f, out.x, options.fd_step);
  Eigen::MatrixXd jtj = out.jacobian.transpose() * out.jacobian;
  Eigen::VectorXd grad = out.jacobian.transpose() * out.residuals;
  double lambda = 1e-3 * std::max(jtj.diagonal().maxCoeff(), 1e-300);
  double nu = 2.0;

  for (out.iterations = 0; out.iterations < options.max_iterations; ++out.iterations) {
    // parameters pinned at their bound by a gradient pointing outward stay put
    std::vector<Eigen::Index> free;
    free.reserve(static_cast<std::size_t>(n));
    double projected_grad = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (out.x[j] <= lower[j] && grad[j] > 0.0) continue;
      free.push_back(j);
      projected_grad = std::max(projected_grad, std::abs(grad[j]));
    }
    if (projected_grad <= options.gradient_tol * (1.0 + out.cost)) {
      out.converged = true;
      out.message = "gradient below tolerance";
      return out;
    }
    const auto m = static_cast<Eigen::Index>(free.size());
    Eigen::MatrixXd lhs(m, m);
    Eigen::VectorXd rhs(m);
    Eigen::VectorXd scale(m);
    double top = 0.0;
    for (Eigen::Index a = 0; a < m; ++a) top = std::max(top, jtj(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(a)]));
    for (Eigen::Index a = 0; a < m; ++a) {
      const Eigen::Index ja = free[static_cast<std::size_t>(a)];
      rhs[a] = -grad[ja];
      // Marquardt scaling, floored so parameters with no leverage stay damped
      scale[a] = std::max({jtj(ja, ja), 1e-12 * top, 1e-300});
      for (Eigen::Index b = 0; b < m; ++b) lhs(a, b) = jtj(ja, free[static_cast<std::size_t>(b)]);
    }
    lhs.diagonal() += lambda * scale;
    const Eigen::VectorXd reduced = lhs.ldlt().solve(rhs);
    if (!reduced.allFinite()) {
      lambda *= nu;
      nu *= 2.0;
      continue;
    }
    Eigen::VectorXd trial = out.x;
    for (Eigen::Index a = 0; a < m; ++a) trial[free[static_cast<std::size_t>(a)]] += reduced[a];
    trial = trial.cwiseMax(lower);
    const Eigen::VectorXd step = trial - out.x;
    if (step.norm() <= options.step_tol * (out.x.norm() + options.step_tol)) {
      out.converged = true;
      out.message = "step below tolerance";
      return out;
    }
    const Eigen::VectorXd trial_res = f(trial);
    const double trial_cost = trial_res.allFinite() ? trial_res.squaredNorm() : INFINITY;
    // predicted decrease of the quadratic model
    const double predicted = -(2.0 * step.dot(grad) + step.dot(jtj * step));
    const double actual = out.cost - trial_cost;
    const double rho = predicted > 0.0 ? actual / predicted : -1.0;
    if (rho > 0.0 && std::isfinite(trial_cost)) {
      const double previous = out.cost;
      out.x = trial;
      out.residuals = trial_res;
      out.cost = trial_cost;
      out.jacobian = numeric_jacobian(f, out.x, options.fd_step);
      jtj = out.jacobian.transpose() * out.jacobian;
      grad = out.jacobian.transpose() * out.residuals;
      lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
      nu = 2.0;
      if (previous - trial_cost <= options.cost_tol * previous) {
        out.converged = true;
        out.message = "cost decrease below tolerance";
        return out;
      }
    } else {
      lambda *= nu;
      nu *= 2.0;
      if (lambda > 1e300) {
        out.converged = true;
        out.message = "no further decrease possible";
        return out;
      }
    }
  }
  out.message = "iteration limit reached";
  return out;
}

}  // namespace qndtomo
