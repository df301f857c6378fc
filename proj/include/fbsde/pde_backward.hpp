#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"

namespace fbsde {

// Space-time field y[k][j] with its spatial gradient, stored time-major.
struct GridFunction {
  SpaceGrid space;
  TimeGrid time;
  std::vector<double> values;
  std::vector<double> gradient;
  // Set when the advection term had to be upwinded somewhere (|b| dx > sigma^2).
  bool upwinded = false;

  GridFunction() = default;
  GridFunction(const SpaceGrid& s, const TimeGrid& t)
      : space(s), time(t), values(s.size() * t.size(), 0.0), gradient(s.size() * t.size(), 0.0) {}

  [[nodiscard]] std::size_t width() const noexcept { return space.size(); }
  [[nodiscard]] double value(std::size_t k, std::size_t j) const { return values[k * width() + j]; }
  [[nodiscard]] double grad(std::size_t k, std::size_t j) const { return gradient[k * width() + j]; }
  [[nodiscard]] std::span<const double> row(std::size_t k) const { return {values.data() + k * width(), width()}; }
  [[nodiscard]] std::span<double> row(std::size_t k) { return {values.data() + k * width(), width()}; }
  [[nodiscard]] std::span<const double> grad_row(std::size_t k) const {
    return {gradient.data() + k * width(), width()};
  }

  // Linear interpolation in x, clamped to the boundary values outside the grid.
  [[nodiscard]] double at(std::size_t k, double x) const { return interpolate(values, k, x); }
  [[nodiscard]] double grad_at(std::size_t k, double x) const { return interpolate(gradient, k, x); }

 private:
  [[nodiscard]] double interpolate(const std::vector<double>& field, std::size_t k, double x) const {
    const std::size_t J = width();
    const double* r = field.data() + k * J;
    const double s = (x - space.x_min()) / space.dx();
    if (!(s > 0.0)) return r[0];
    if (s >= static_cast<double>(J - 1)) return r[J - 1];
    const auto j = static_cast<std::size_t>(s);
    const double w = s - static_cast<double>(j);
    return (1.0 - w) * r[j] + w * r[j + 1];
  }
};

// Central differences inside, one-sided at the two ends.
inline void finite_difference_gradient(std::span<const double> y, double dx, std::span<double> dy) {
  const std::size_t J = y.size();
  dy[0] = (y[1] - y[0]) / dx;
  dy[J - 1] = (y[J - 1] - y[J - 2]) / dx;
  for (std::size_t j = 1; j + 1 < J; ++j) dy[j] = (y[j + 1] - y[j - 1]) / (2.0 * dx);
}

// Thomas algorithm for lower/diag/upper bands; the right-hand side is overwritten with the solution.
inline void solve_tridiagonal(std::span<const double> lower, std::span<const double> diag,
                              std::span<const double> upper, std::span<double> rhs, std::vector<double>& scratch) {
  const std::size_t n = diag.size();
  scratch.resize(n);
  double pivot = diag[0];
  require(std::abs(pivot) > 1e-300, ErrorCode::LinearSolveFailure, "zero pivot in tridiagonal solve");
  scratch[0] = upper[0] / pivot;
  rhs[0] /= pivot;
  for (std::size_t i = 1; i < n; ++i) {
    pivot = diag[i] - lower[i] * scratch[i - 1];
    require(std::abs(pivot) > 1e-300 && std::isfinite(pivot), ErrorCode::LinearSolveFailure,
            "zero pivot in tridiagonal solve");
    scratch[i] = i + 1 < n ? upper[i] / pivot : 0.0;
    rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / pivot;
  }
  for (std::size_t i = n - 1; i-- > 0;) rhs[i] -= scratch[i] * rhs[i + 1];
}

// Coefficients of -d_t y = b_k(x) y' + sigma^2/2 y'' + V_k(x) y + s_k(x), all frozen at t_k.
// Empty potential/source callbacks mean zero.
struct BackwardProblem {
  std::function<double(std::size_t, double)> drift;
  double sigma = 1.0;
  std::function<double(std::size_t, double)> potential;
  std::function<double(std::size_t, double)> source;
};

namespace detail {

// Builds I - dt L for one time level and reports whether any node was upwinded.
// Neumann ends use a reflected ghost node, which removes the advection term there.
inline bool assemble_implicit(std::span<const double> drift, double sigma, double dx, double dt,
                              std::vector<double>& lower, std::vector<double>& diag, std::vector<double>& upper) {
  const std::size_t J = drift.size();
  lower.assign(J, 0.0);
  diag.assign(J, 1.0);
  upper.assign(J, 0.0);
  const double diffusion = 0.5 * sigma * sigma;
  const double d2 = diffusion / (dx * dx);
  bool upwinded = false;
  diag[0] = 1.0 + dt * 2.0 * d2;
  upper[0] = -dt * 2.0 * d2;
  diag[J - 1] = 1.0 + dt * 2.0 * d2;
  lower[J - 1] = -dt * 2.0 * d2;
  for (std::size_t j = 1; j + 1 < J; ++j) {
    // Central advection with the diffusion raised to |b| dx / 2 where |b| dx > sigma^2 (cell Peclet
    // number above one). That is plain upwinding there, and the coefficients stay continuous in b,
    // which policy iteration needs.
    const double b = drift[j];
    const double numerical = 0.5 * std::abs(b) * dx;
    if (numerical > diffusion) upwinded = true;
    const double e = std::max(diffusion, numerical) / (dx * dx);
    const double lo = e - b / (2.0 * dx), up = e + b / (2.0 * dx), di = -2.0 * e;
    lower[j] = -dt * lo;
    diag[j] = 1.0 - dt * di;
    upper[j] = -dt * up;
  }
  return upwinded;
}

}  // namespace detail

// Implicit (backward Euler in reverse time) solver. The potential enters through the exact
// factor exp(dt V) so that a constant potential separates from the transport part exactly.
inline GridFunction solve_backward(const BackwardProblem& problem, std::span<const double> terminal,
                                   const SpaceGrid& space, const TimeGrid& time) {
  require(problem.sigma > 0.0, ErrorCode::NonPositiveSigma, "sigma must be positive");
  require(terminal.size() == space.size(), ErrorCode::GridMismatch, "terminal values do not match the space grid");
  GridFunction out(space, time);
  const std::size_t J = space.size();
  const std::size_t n = time.n_steps();
  const double dt = time.dt();
  const double dx = space.dx();
  std::vector<double> xs(J), drift(J), lower, diag, upper, scratch;
  for (std::size_t j = 0; j < J; ++j) xs[j] = space.x(j);

  std::copy(terminal.begin(), terminal.end(), out.row(n).begin());
  finite_difference_gradient(out.row(n), dx, {out.gradient.data() + n * J, J});

  for (std::size_t k = n; k-- > 0;) {
    for (std::size_t j = 0; j < J; ++j) drift[j] = problem.drift ? problem.drift(k, xs[j]) : 0.0;
    out.upwinded |= detail::assemble_implicit(drift, problem.sigma, dx, dt, lower, diag, upper);
    std::span<double> y = out.row(k);
    const std::span<const double> next = out.row(k + 1);
    for (std::size_t j = 0; j < J; ++j) {
      double rhs = next[j];
      if (problem.potential) rhs *= std::exp(dt * problem.potential(k, xs[j]));
      if (problem.source) rhs += dt * problem.source(k, xs[j]);
      y[j] = rhs;
    }
    solve_tridiagonal(lower, diag, upper, y, scratch);
    for (double v : y) require(std::isfinite(v), ErrorCode::LinearSolveFailure, "backward solve produced non-finite values");
    finite_difference_gradient(y, dx, {out.gradient.data() + k * J, J});
  }
  return out;
}

inline std::vector<double> sample_on_grid(const std::function<double(double)>& f, const SpaceGrid& space) {
  std::vector<double> v(space.size());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = f(space.x(j));
  return v;
}

inline BackwardProblem transport_problem(const ScalarModelSpec& model) {
  model.validate();
  BackwardProblem p;
  p.drift = [b = model.drift](std::size_t, double x) { return b(x); };
  p.sigma = model.sigma;
  return p;
}

// -d_t y = b y' + sigma^2/2 y'',  y_T = f.
inline GridFunction solve_backward_kolmogorov(const ScalarModelSpec& model, const SpaceGrid& space,
                                              const TimeGrid& time) {
  return solve_backward(transport_problem(model), sample_on_grid(model.terminal, space), space, time);
}

// Same transport with a reaction term: -d_t y = L y + V(x) y.
inline GridFunction solve_with_potential(const ScalarModelSpec& model, const std::function<double(double)>& potential,
                                         const SpaceGrid& space, const TimeGrid& time) {
  BackwardProblem p = transport_problem(model);
  p.potential = [potential](std::size_t, double x) { return potential(x); };
  return solve_backward(p, sample_on_grid(model.terminal, space), space, time);
}

// Feynman-Kac equation with killing: -d_t y = L y - h(x)^2 y.
inline GridFunction solve_feynman_kac(const ScalarModelSpec& model, const SpaceGrid& space, const TimeGrid& time) {
  if (model.obs.is_zero()) return solve_backward_kolmogorov(model, space, time);
  return solve_with_potential(
      model, [h = model.obs](double x) { return -h(x) * h(x); }, space, time);
}

using Policy = std::function<double(std::size_t, double)>;
using RunningCost = std::function<double(std::size_t, double, double)>;

// Policy evaluation: -d_t y = (b + G a) y' + sigma^2/2 y'' + c(x, a), y_T = f.
inline GridFunction solve_backward_with_source(const ScalarModelSpec& model, const Policy& policy,
                                               const RunningCost& cost, const SpaceGrid& space,
                                               const TimeGrid& time) {
  BackwardProblem p = transport_problem(model);
  const double g = model.control_gain;
  p.drift = [b = model.drift, policy, g](std::size_t k, double x) { return b(x) + g * (policy ? policy(k, x) : 0.0); };
  if (cost) {
    p.source = [policy, cost](std::size_t k, double x) { return cost(k, x, policy ? policy(k, x) : 0.0); };
  }
  return solve_backward(p, sample_on_grid(model.terminal, space), space, time);
}

struct HjbSolution {
  GridFunction value;
  std::vector<double> policy;  // a[k * J + j] = -G dy_k(x_j)
  std::size_t max_inner_iterations = 0;
};

// HJB for additive control and cost |a|^2/2: a_t(x) = -G y_t'(x). Each reverse step runs a
// policy iteration (frozen policy, implicit sweep, policy update) until the policy moves < tol.
inline HjbSolution solve_hjb_quadratic(const ScalarModelSpec& model, const SpaceGrid& space, const TimeGrid& time,
                                       double tol = 1e-8, std::size_t max_inner = 50) {
  model.validate();
  HjbSolution sol;
  sol.value = GridFunction(space, time);
  GridFunction& y = sol.value;
  const std::size_t J = space.size();
  const std::size_t n = time.n_steps();
  const double dt = time.dt();
  const double dx = space.dx();
  const double g = model.control_gain;
  sol.policy.assign(J * time.size(), 0.0);

  std::vector<double> xs(J), base(J), drift(J), a(J), lower, diag, upper, scratch, grad(J);
  for (std::size_t j = 0; j < J; ++j) {
    xs[j] = space.x(j);
    base[j] = model.drift(xs[j]);
    y.values[n * J + j] = model.terminal(xs[j]);
  }
  finite_difference_gradient(y.row(n), dx, {y.gradient.data() + n * J, J});
  y.gradient[n * J] = y.gradient[n * J + J - 1] = 0.0;
  for (std::size_t j = 0; j < J; ++j) a[j] = -g * y.gradient[n * J + j];
  std::copy(a.begin(), a.end(), sol.policy.begin() + static_cast<std::ptrdiff_t>(n * J));

  for (std::size_t k = n; k-- > 0;) {
    std::span<double> row = y.row(k);
    bool converged = false;
    for (std::size_t it = 0; it < max_inner; ++it) {
      for (std::size_t j = 0; j < J; ++j) drift[j] = base[j] + g * a[j];
      y.upwinded |= detail::assemble_implicit(drift, model.sigma, dx, dt, lower, diag, upper);
      for (std::size_t j = 0; j < J; ++j) row[j] = y.values[(k + 1) * J + j] + dt * 0.5 * a[j] * a[j];
      solve_tridiagonal(lower, diag, upper, row, scratch);
      finite_difference_gradient(row, dx, grad);
      // The reflected ghost node means y' = 0 at the ends; one-sided slopes there feed back
      // through the running cost and blow up.
      grad[0] = grad[J - 1] = 0.0;
      double change = 0.0;
      for (std::size_t j = 0; j < J; ++j) {
        const double next = -g * grad[j];
        const double d = std::abs(next - a[j]);
        change = std::isfinite(d) ? std::max(change, d) : d;
        if (!std::isfinite(change)) break;
        a[j] = next;
      }
      sol.max_inner_iterations = std::max(sol.max_inner_iterations, it + 1);
      if (!std::isfinite(change)) break;
      if (change < tol) {
        converged = true;
        break;
      }
    }
    require(converged, ErrorCode::PolicyIterationDiverged,
            "policy iteration did not settle at t = " + std::to_string(time.time(k)));
    std::copy(grad.begin(), grad.end(), y.gradient.begin() + static_cast<std::ptrdiff_t>(k * J));
    std::copy(a.begin(), a.end(), sol.policy.begin() + static_cast<std::ptrdiff_t>(k * J));
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Linear-Gaussian backward vectors
// ---------------------------------------------------------------------------

struct BackwardVector {
  TimeGrid time;
  std::vector<Vector> y;  // y[k] for k = 0..n_steps
};

// -dy/dt = A y, y_T = f_bar: y_k = exp((T - t_k) A) f_bar.
inline BackwardVector linear_backward_vector(const Matrix& A, const Vector& f_bar, const TimeGrid& time) {
  require(A.rows() == A.cols() && A.rows() == f_bar.size(), ErrorCode::DimensionMismatch,
          "A must be square and match f_bar");
  BackwardVector out{time, std::vector<Vector>(time.size())};
  const std::size_t n = time.n_steps();
  for (std::size_t k = 0; k <= n; ++k) {
    const double tau = time.t_end() - time.time(k);
    out.y[k] = k == n ? f_bar : Vector((A * tau).exp() * f_bar);
  }
  return out;
}

// Classical RK4 on the same equation, integrated backward step by step.
inline BackwardVector linear_backward_vector_rk4(const Matrix& A, const Vector& f_bar, const TimeGrid& time,
                                                 std::size_t substeps = 4) {
  require(A.rows() == A.cols() && A.rows() == f_bar.size(), ErrorCode::DimensionMismatch,
          "A must be square and match f_bar");
  BackwardVector out{time, std::vector<Vector>(time.size())};
  const std::size_t n = time.n_steps();
  const double h = time.dt() / static_cast<double>(substeps);
  Vector y = f_bar;
  out.y[n] = y;
  for (std::size_t k = n; k-- > 0;) {
    for (std::size_t s = 0; s < substeps; ++s) {
      const Vector k1 = A * y;
      const Vector k2 = A * (y + 0.5 * h * k1);
      const Vector k3 = A * (y + 0.5 * h * k2);
      const Vector k4 = A * (y + h * k3);
      y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    out.y[k] = y;
  }
  return out;
}

struct ClosedLoopSolution {
  BackwardVector ybar;
  std::vector<Vector> u;  // u_k = -H^T Sigma_k ybar_k
};

// -dy/dt = (A - H H^T Sigma_t) y, y_T = f_bar, by RK4. Midpoint covariances are used when
// supplied; otherwise the endpoint average stands in for them.
inline ClosedLoopSolution linear_backward_closed_loop(const Matrix& A, const Matrix& H,
                                                      const std::vector<Matrix>& sigma_path, const Vector& f_bar,
                                                      const TimeGrid& time,
                                                      const std::vector<Matrix>& sigma_mid = {}) {
  require(sigma_path.size() == time.size(), ErrorCode::GridMismatch, "covariance path does not match grid");
  require(sigma_mid.empty() || sigma_mid.size() == time.n_steps(), ErrorCode::GridMismatch,
          "midpoint covariances do not match grid");
  require(A.rows() == A.cols() && H.rows() == A.rows() && f_bar.size() == A.rows(), ErrorCode::DimensionMismatch,
          "A, H, f_bar dimensions disagree");
  const Matrix HHt = H * H.transpose();
  const std::size_t n = time.n_steps();
  const double h = time.dt();
  ClosedLoopSolution out;
  out.ybar = BackwardVector{time, std::vector<Vector>(time.size())};
  out.u.resize(time.size());
  Vector y = f_bar;
  out.ybar.y[n] = y;
  for (std::size_t k = n; k-- > 0;) {
    // Reverse time s = T - t: dy/ds = (A - H H^T Sigma) y.
    const Matrix M1 = A - HHt * sigma_path[k + 1];
    const Matrix Mm = A - HHt * (sigma_mid.empty() ? Matrix(0.5 * (sigma_path[k] + sigma_path[k + 1])) : sigma_mid[k]);
    const Matrix M0 = A - HHt * sigma_path[k];
    const Vector k1 = M1 * y;
    const Vector k2 = Mm * (y + 0.5 * h * k1);
    const Vector k3 = Mm * (y + 0.5 * h * k2);
    const Vector k4 = M0 * (y + h * k3);
    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    out.ybar.y[k] = y;
  }
  for (std::size_t k = 0; k <= n; ++k) out.u[k] = -H.transpose() * sigma_path[k] * out.ybar.y[k];
  return out;
}

}  // namespace fbsde
