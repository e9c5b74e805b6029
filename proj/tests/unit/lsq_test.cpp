#include "qndtomo/lsq.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace qndtomo;
using Eigen::VectorXd;

TEST_SUITE("lsq") {

TEST_CASE("Rosenbrock") {
  const ResidualFunction f = [](const VectorXd& x) {
    VectorXd r(2);
    r << 10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0];
    return r;
  };
  const auto res = levenberg_marquardt(f, VectorXd::Constant(2, -1.2));
  CHECK(res.converged);
  CHECK(std::abs(res.x[0] - 1.0) < 1e-8);
  CHECK(std::abs(res.x[1] - 1.0) < 1e-8);
}

TEST_CASE("linear problem matches the normal equations") {
  Eigen::MatrixXd a(5, 2);
  a << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4;
  VectorXd b(5);
  b << 0.9, 3.1, 4.8, 7.2, 9.1;
  const ResidualFunction f = [&](const VectorXd& x) { return VectorXd(a * x - b); };
  const auto res = levenberg_marquardt(f, VectorXd::Zero(2));
  const VectorXd exact = (a.transpose() * a).ldlt().solve(a.transpose() * b);
  // the difference Jacobian carries rounding of order eps |r| / h, about 1e-9 here
  CHECK((res.x - exact).cwiseAbs().maxCoeff() < 1e-7);
  CHECK(res.jacobian.rows() == 5);
  CHECK((res.jacobian - a).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("bounds hold and bind when the optimum is infeasible") {
  // minimum of (x0 + 1)^2 + (x1 - 2)^2 subject to x >= 0 is (0, 2)
  const ResidualFunction f = [](const VectorXd& x) {
    VectorXd r(2);
    r << x[0] + 1.0, x[1] - 2.0;
    return r;
  };
  const auto res = levenberg_marquardt(f, VectorXd::Constant(2, 5.0), VectorXd::Zero(2));
  CHECK(res.converged);
  CHECK(res.x[0] == 0.0);
  CHECK(std::abs(res.x[1] - 2.0) < 1e-9);

  VectorXd lower(2);
  lower << -std::numeric_limits<double>::infinity(), 0.0;
  const auto half = levenberg_marquardt(f, VectorXd::Constant(2, 5.0), lower);
  CHECK(std::abs(half.x[0] + 1.0) < 1e-9);

  // an infeasible start is clamped first
  const auto clamped = levenberg_marquardt(f, VectorXd::Constant(2, -3.0), VectorXd::Zero(2));
  CHECK(clamped.x.minCoeff() >= 0.0);
}

TEST_CASE("numeric Jacobian") {
  const ResidualFunction f = [](const VectorXd& x) {
    VectorXd r(2);
    r << std::sin(x[0]) * x[1], std::exp(x[1]);
    return r;
  };
  VectorXd x(2);
  x << 0.3, 1.2;
  const auto j = numeric_jacobian(f, x);
  CHECK(j(0, 0) == doctest::Approx(std::cos(0.3) * 1.2).epsilon(1e-8));
  CHECK(j(0, 1) == doctest::Approx(std::sin(0.3)).epsilon(1e-8));
  CHECK(j(1, 1) == doctest::Approx(std::exp(1.2)).epsilon(1e-8));
  CHECK(j(1, 0) == doctest::Approx(0.0));
}

}  // TEST_SUITE
