#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "test_util.hpp"

using namespace fbsde;
using namespace fbsde::testing;

TEST(Tridiagonal, MatchesDenseSolve) {
  const std::size_t n = 12;
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> lo(n), di(n), up(n), rhs(n), scratch;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b(n);
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = i > 0 ? u(gen) : 0.0;
    up[i] = i + 1 < n ? u(gen) : 0.0;
    di[i] = 3.0 + u(gen);
    rhs[i] = u(gen);
    b(i) = rhs[i];
    M(i, i) = di[i];
    if (i > 0) M(i, i - 1) = lo[i];
    if (i + 1 < n) M(i, i + 1) = up[i];
  }
  solve_tridiagonal(lo, di, up, rhs, scratch);
  const Eigen::VectorXd x = M.partialPivLu().solve(b);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(rhs[i], x(i), 1e-13);
}

TEST(Tridiagonal, ZeroPivotFails) {
  std::vector<double> lo{0.0, 1.0}, di{0.0, 1.0}, up{1.0, 0.0}, rhs{1.0, 1.0}, scratch;
  try {
    solve_tridiagonal(lo, di, up, rhs, scratch);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LinearSolveFailure);
  }
}

TEST(Gradient, ExactForQuadraticsInside) {
  std::vector<double> y(11), dy(11);
  for (std::size_t j = 0; j < 11; ++j) y[j] = std::pow(0.1 * static_cast<double>(j), 2);
  finite_difference_gradient(y, 0.1, dy);
  for (std::size_t j = 1; j < 10; ++j) EXPECT_NEAR(dy[j], 0.2 * static_cast<double>(j), 1e-12);
}

TEST(Kolmogorov, LinearTerminalWithoutDriftIsStationary) {
  const ScalarModelSpec m = scalar_model(linear(0.0), 1.0, linear(1.0), linear(1.0));
  const SpaceGrid space(-12.0, 12.0, 241);
  const GridFunction y = solve_backward_kolmogorov(m, space, TimeGrid(1.0, 100));
  for (std::size_t k = 0; k <= 100; ++k)
    for (std::size_t j = 0; j < space.size(); ++j)
      if (std::abs(space.x(j)) <= 4.0) {
        ASSERT_NEAR(y.value(k, j), space.x(j), 1e-9);
      }
}

TEST(Kolmogorov, OuLinearTerminalMatchesClosedForm) {
  const ScalarModelSpec m = to_scalar(lg_benchmark());
  const SpaceGrid space(-10.0, 10.0, 401);
  const GridFunction y = solve_backward_kolmogorov(m, space, TimeGrid(1.0, 1000));
  for (std::size_t j = 0; j < space.size(); ++j) {
    const double x = space.x(j);
    if (std::abs(x) <= 3.0) {
      EXPECT_NEAR(y.value(0, j), std::exp(-1.0) * x, 1e-3 * (1.0 + std::abs(x)));
    }
  }
  EXPECT_NEAR(y.at(0, 1.0), 0.36788, 1e-3);
}

TEST(Kolmogorov, MaximumPrincipleAndConstants) {
  const ScalarModelSpec m =
      scalar_model(NamedFunction("double_well"), 0.5, linear(1.0), NamedFunction("indicator_positive"));
  const SpaceGrid space(-4.0, 4.0, 161);
  const GridFunction y = solve_backward_kolmogorov(m, space, TimeGrid(1.0, 100));
  for (double v : y.values) {
    ASSERT_GE(v, -1e-12);
    ASSERT_LE(v, 1.0 + 1e-12);
  }
  ScalarModelSpec c = m;
  c.terminal = constant(2.5);
  for (double v : solve_backward_kolmogorov(c, space, TimeGrid(1.0, 100)).values) ASSERT_NEAR(v, 2.5, 1e-12);
}

// Brute-force Euler-Maruyama with an independent generator.
TEST(Kolmogorov, DoubleWellMatchesMonteCarlo) {
  const ScalarModelSpec m =
      scalar_model(NamedFunction("double_well"), 0.5, linear(1.0), NamedFunction("indicator_positive"));
  const SpaceGrid space(-3.0, 3.0, 1201);
  const GridFunction y = solve_backward_kolmogorov(m, space, TimeGrid(1.0, 2000));
  const double pde = y.at(0, 0.5);

  const std::size_t paths = 1000000, steps = 500;
  const double dt = 1.0 / steps, sq = 0.5 * std::sqrt(dt);
  std::mt19937_64 gen(20240601);
  std::normal_distribution<double> normal;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < paths; ++i) {
    double x = 0.5;
    for (std::size_t k = 0; k < steps; ++k) x += (x - x * x * x) * dt + sq * normal(gen);
    hits += x > 0.0;
  }
  const double p = static_cast<double>(hits) / paths;
  const double se = std::sqrt(p * (1.0 - p) / paths);
  EXPECT_LT(std::abs(pde - p), 3.0 * se) << "pde " << pde << " mc " << p << " se " << se;
}

TEST(Kolmogorov, UpwindingFlagged) {
  const ScalarModelSpec m = scalar_model(linear(-20.0), 0.1, linear(1.0), linear(1.0));
  const GridFunction y = solve_backward_kolmogorov(m, SpaceGrid(-5.0, 5.0, 51), TimeGrid(1.0, 10));
  EXPECT_TRUE(y.upwinded);
  const GridFunction z = solve_backward_kolmogorov(to_scalar(lg_benchmark()), SpaceGrid(-5.0, 5.0, 201),
                                                   TimeGrid(1.0, 10));
  EXPECT_FALSE(z.upwinded);
}

TEST(FeynmanKac, ZeroObservationIsBitwiseKolmogorov) {
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, linear(0.0), NamedFunction("sine"));
  const SpaceGrid space(-6.0, 6.0, 121);
  const TimeGrid time(1.0, 200);
  EXPECT_EQ(solve_feynman_kac(m, space, time).values, solve_backward_kolmogorov(m, space, time).values);
}

TEST(FeynmanKac, ConstantObservationSeparates) {
  const double c = 1.0;
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, constant(c), NamedFunction("gaussian_bump"));
  const SpaceGrid space(-6.0, 6.0, 121);
  const TimeGrid time(1.0, 200);
  const GridFunction fk = solve_feynman_kac(m, space, time);
  const GridFunction bke = solve_backward_kolmogorov(m, space, time);
  for (std::size_t k = 0; k <= time.n_steps(); ++k) {
    const double factor = std::exp(-c * c * (1.0 - time.time(k)));
    for (std::size_t j = 0; j < space.size(); ++j)
      ASSERT_NEAR(fk.value(k, j) / (factor * bke.value(k, j)), 1.0, 1e-10);
  }
}

// E[exp(-int_0^T B_s^2 ds)] = cosh(sqrt(2) T)^(-1/2) for Brownian motion from 0.
TEST(FeynmanKac, QuadraticKillingMatchesMonteCarloAndClosedForm) {
  const ScalarModelSpec m = scalar_model(linear(0.0), 1.0, linear(1.0), constant(1.0));
  const SpaceGrid space(-8.0, 8.0, 801);
  const GridFunction y = solve_feynman_kac(m, space, TimeGrid(1.0, 2000));
  const double exact = 1.0 / std::sqrt(std::cosh(std::sqrt(2.0)));
  EXPECT_NEAR(y.at(0, 0.0), exact, 1e-3);

  const std::size_t paths = 1000000, steps = 400;
  const double dt = 1.0 / steps, sq = std::sqrt(dt);
  std::mt19937_64 gen(77);
  std::normal_distribution<double> normal;
  std::vector<double> v(paths);
  for (std::size_t i = 0; i < paths; ++i) {
    double x = 0.0, integral = 0.0;
    for (std::size_t k = 0; k < steps; ++k) {
      const double next = x + sq * normal(gen);
      integral += 0.5 * (x * x + next * next) * dt;
      x = next;
    }
    v[i] = std::exp(-integral);
  }
  const Stats s = stats(v);
  EXPECT_LT(std::abs(y.at(0, 0.0) - s.mean), 3.0 * s.se + 1e-4) << "pde " << y.at(0, 0.0) << " mc " << s.mean;
  EXPECT_LT(std::abs(exact - s.mean), 3.0 * s.se) << "mc " << s.mean << " se " << s.se;
}

TEST(WithSource, ZeroPolicyAndCostIsKolmogorov) {
  const ScalarModelSpec m = to_scalar(lg_benchmark());
  const SpaceGrid space(-6.0, 6.0, 121);
  const TimeGrid time(1.0, 100);
  EXPECT_EQ(solve_backward_with_source(m, {}, {}, space, time).values,
            solve_backward_kolmogorov(m, space, time).values);
  const Policy zero = [](std::size_t, double) { return 0.0; };
  const RunningCost none = [](std::size_t, double, double) { return 0.0; };
  EXPECT_EQ(solve_backward_with_source(m, zero, none, space, time).values,
            solve_backward_kolmogorov(m, space, time).values);
}

TEST(WithSource, UnitCostIsRemainingTime) {
  const ScalarModelSpec m = scalar_model(linear(0.0), 1.0, linear(1.0), constant(0.0));
  const SpaceGrid space(-3.0, 3.0, 31);
  const TimeGrid time(1.0, 50);
  const RunningCost one = [](std::size_t, double, double) { return 1.0; };
  const GridFunction y = solve_backward_with_source(m, {}, one, space, time);
  for (std::size_t k = 0; k <= 50; ++k)
    for (std::size_t j = 0; j < space.size(); ++j) ASSERT_NEAR(y.value(k, j), 1.0 - time.time(k), 1e-12);
}

TEST(WithSource, LqPolicyEvaluationMatchesRiccati) {
  const LinearGaussianModelSpec lg = lg_benchmark();
  ScalarModelSpec m = to_scalar(lg);
  m.terminal = NamedFunction("quadratic", {{"q", 1.0}});
  const TimeGrid time(1.0, 1000);
  const SpaceGrid space(-10.0, 10.0, 801);
  const ControlRiccati cr = lq_control_riccati(lg.A, lg.G, Matrix::Identity(1, 1), time, lg.sigma);
  const Policy policy = [&](std::size_t k, double x) { return -cr.K[k](0, 0) * x; };
  const RunningCost cost = [](std::size_t, double, double a) { return 0.5 * a * a; };
  const GridFunction y = solve_backward_with_source(m, policy, cost, space, time);
  for (int i = 0; i < 20; ++i) {
    const double x = -2.0 + 4.0 * i / 19.0;
    const double v = cr.value(0, Vector::Constant(1, x));
    EXPECT_NEAR(y.at(0, x), v, 1e-2 * v) << "x = " << x;
  }
}

TEST(Hjb, NoControlGainGivesZeroPolicy) {
  ScalarModelSpec m = to_scalar(lg_benchmark());
  m.control_gain = 0.0;
  m.terminal = NamedFunction("quadratic", {{"q", 1.0}});
  const SpaceGrid space(-6.0, 6.0, 121);
  const TimeGrid time(1.0, 100);
  const HjbSolution sol = solve_hjb_quadratic(m, space, time);
  for (double a : sol.policy) ASSERT_EQ(a, 0.0);
  EXPECT_EQ(sol.value.values, solve_backward_kolmogorov(m, space, time).values);
}

// Scalar control Riccati with a = -1, g = 1, q = 1: w = 1/P solves w' = -2w - 1, so
// P_t = 1 / (-1/2 + 3/2 exp(2 (T - t))).
TEST(Hjb, LqPolicyMatchesRiccatiGain) {
  ScalarModelSpec m = to_scalar(lg_benchmark());
  m.terminal = NamedFunction("quadratic", {{"q", 1.0}});
  const SpaceGrid space(-10.0, 10.0, 1001);
  const TimeGrid time(1.0, 1000);
  const HjbSolution sol = solve_hjb_quadratic(m, space, time);
  for (std::size_t k : {std::size_t{0}, std::size_t{500}, std::size_t{999}}) {
    const double P = 1.0 / (-0.5 + 1.5 * std::exp(2.0 * (1.0 - time.time(k))));
    for (std::size_t j = 0; j < space.size(); ++j) {
      const double x = space.x(j);
      if (std::abs(x) < 0.5 || std::abs(x) > 3.0) continue;
      const double a = sol.policy[k * space.size() + j];
      // backward Euler in time: O(dt) relative error in the gain
      ASSERT_NEAR(a, -P * x, 5e-3 * P * std::abs(x)) << "k = " << k << " x = " << x;
    }
  }
}

TEST(Hjb, SymmetricDoubleWellPolicyIsOdd) {
  ScalarModelSpec m = scalar_model(NamedFunction("double_well"), 0.5, linear(1.0), NamedFunction("quadratic"));
  m.control_gain = 1.0;
  const SpaceGrid space(-3.0, 3.0, 241);
  const TimeGrid time(1.0, 200);
  const HjbSolution sol = solve_hjb_quadratic(m, space, time);
  const std::size_t J = space.size();
  for (std::size_t k = 0; k <= time.n_steps(); ++k)
    for (std::size_t j = 0; j < J; ++j)
      ASSERT_NEAR(sol.policy[k * J + j], -sol.policy[k * J + (J - 1 - j)], 1e-10);
}

// One-step lookahead: argmin_a a^2 dt/2 + E[y_{k+1}(x + (b(x) + a) dt + sigma sqrt(dt) xi)].
TEST(Hjb, DoubleWellPolicyPushesTowardTarget) {
  ScalarModelSpec m = scalar_model(NamedFunction("double_well"), 0.5, linear(1.0),
                                   NamedFunction("quadratic", {{"q", 4.0}, {"center", 1.0}}));
  m.control_gain = 1.0;
  const SpaceGrid space(-4.0, 4.0, 321);
  const TimeGrid time(1.0, 100);
  const HjbSolution sol = solve_hjb_quadratic(m, space, time);
  const auto& rule = gauss_hermite_64();
  const double dt = time.dt();
  for (double x : {-1.5, -1.0, -0.5, 0.0, 0.5}) {
    double best = 0.0, best_cost = 1e300;
    for (int i = -600; i <= 600; ++i) {
      const double a = 0.01 * i;
      double c = 0.5 * a * a * dt;
      for (std::size_t q = 0; q < rule.nodes.size(); ++q)
        c += rule.weights[q] * sol.value.at(1, x + (m.drift(x) + a) * dt + m.sigma * std::sqrt(dt) * rule.nodes[q]);
      if (c < best_cost) {
        best_cost = c;
        best = a;
      }
    }
    const std::size_t j = static_cast<std::size_t>(std::lround((x - space.x_min()) / space.dx()));
    const double a_grid = sol.policy[j];
    EXPECT_GT(a_grid, 0.0) << "x = " << x;
    EXPECT_GT(best, 0.0) << "x = " << x;
    EXPECT_NEAR(a_grid, best, 0.05 * std::abs(best) + 0.02) << "x = " << x;
  }
}

TEST(BackwardVector, ZeroDriftKeepsTerminal) {
  const BackwardVector y = linear_backward_vector(Matrix::Zero(2, 2), Vector::Constant(2, 3.0), TimeGrid(1.0, 10));
  for (const auto& v : y.y) EXPECT_EQ(v, Vector::Constant(2, 3.0));
}

TEST(BackwardVector, ScalarDecay) {
  const BackwardVector y =
      linear_backward_vector(Matrix::Constant(1, 1, -1.0), Vector::Constant(1, 1.0), TimeGrid(1.0, 10));
  EXPECT_NEAR(y.y[0](0), std::exp(-1.0), 1e-14);
  EXPECT_NEAR(y.y[0](0), 0.36788, 1e-5);
}

TEST(BackwardVector, Nilpotent) {
  Matrix A(2, 2);
  A << 0, 1, 0, 0;
  Vector f(2);
  f << 0, 1;
  const BackwardVector y = linear_backward_vector(A, f, TimeGrid(1.0, 10));
  EXPECT_NEAR(y.y[0](0), 1.0, 1e-14);
  EXPECT_NEAR(y.y[0](1), 1.0, 1e-14);
  const BackwardVector r = linear_backward_vector_rk4(A, f, TimeGrid(1.0, 10));
  EXPECT_NEAR((r.y[0] - y.y[0]).norm(), 0.0, 1e-13);
}

TEST(BackwardVector, Rk4AgreesWithExponential) {
  Matrix A(2, 2);
  A << -1.0, 0.5, -0.3, -2.0;
  const Vector f = Vector::Constant(2, 1.0);
  const TimeGrid time(2.0, 200);
  const BackwardVector a = linear_backward_vector(A, f, time);
  const BackwardVector b = linear_backward_vector_rk4(A, f, time);
  for (std::size_t k = 0; k <= 200; ++k) EXPECT_LT((a.y[k] - b.y[k]).norm(), 1e-11);
}

TEST(ClosedLoop, NoObservationIsOpenLoop) {
  const TimeGrid time(1.0, 100);
  const Matrix A = Matrix::Constant(1, 1, -1.0);
  const Matrix H = Matrix::Zero(1, 1);
  const RiccatiSolution ric = riccati_filter(A, H, 1.0, Matrix::Identity(1, 1), time);
  const ClosedLoopSolution cl = linear_backward_closed_loop(A, H, ric.Sigma, Vector::Constant(1, 1.0), time);
  const BackwardVector open = linear_backward_vector(A, Vector::Constant(1, 1.0), time);
  for (std::size_t k = 0; k <= 100; ++k) EXPECT_NEAR(cl.ybar.y[k](0), open.y[k](0), 1e-10);
}

TEST(ClosedLoop, StationaryCovarianceDecay) {
  const double s = std::sqrt(2.0) - 1.0;
  const TimeGrid time(1.0, 1000);
  const Matrix A = Matrix::Constant(1, 1, -1.0);
  const Matrix H = Matrix::Constant(1, 1, 1.0);
  const RiccatiSolution ric = riccati_filter(A, H, 1.0, Matrix::Constant(1, 1, s), time);
  const ClosedLoopSolution cl =
      linear_backward_closed_loop(A, H, ric.Sigma, Vector::Constant(1, 1.0), time, ric.Sigma_mid);
  for (std::size_t k = 0; k <= 1000; k += 50)
    EXPECT_NEAR(cl.ybar.y[k](0), std::exp(-(1.0 + s) * (1.0 - time.time(k))), 1e-8);
}
