#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <ostream>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/estimators.hpp"
#include "fbsde/kalman.hpp"
#include "fbsde/model.hpp"
#include "fbsde/particle.hpp"
#include "fbsde/pde_backward.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/sde_sim.hpp"

namespace fbsde {

enum class PolicyProvenance { Hjb, LqRiccati, Zero };

struct PolicyField {
  SpaceGrid space;
  TimeGrid time;
  std::vector<double> a;  // a[k * J + j]
  PolicyProvenance provenance = PolicyProvenance::Zero;

  [[nodiscard]] double value(std::size_t k, std::size_t j) const { return a[k * space.size() + j]; }

  // Linear interpolation in x, clamped at the ends.
  [[nodiscard]] double at(std::size_t k, double x) const {
    const std::size_t J = space.size();
    const double* r = a.data() + k * J;
    const double s = (x - space.x_min()) / space.dx();
    if (!(s > 0.0)) return r[0];
    if (s >= static_cast<double>(J - 1)) return r[J - 1];
    const auto j = static_cast<std::size_t>(s);
    const double w = s - static_cast<double>(j);
    return (1.0 - w) * r[j] + w * r[j + 1];
  }

  [[nodiscard]] Policy as_policy() const {
    return [self = *this](std::size_t k, double x) { return self.at(k, x); };
  }
};

struct HjbPolicyResult {
  PolicyField policy;
  GridFunction value;
};

inline HjbPolicyResult hjb_policy(const ScalarModelSpec& model, const SpaceGrid& space, const TimeGrid& time) {
  HjbSolution sol = solve_hjb_quadratic(model, space, time);
  HjbPolicyResult out;
  out.policy = PolicyField{space, time, std::move(sol.policy),
                           model.control_gain == 0.0 ? PolicyProvenance::Zero : PolicyProvenance::Hjb};
  out.value = std::move(sol.value);
  return out;
}

// Scalar LQ feedback a_k(x) = -K_k x sampled on the grid.
inline PolicyField lq_policy_field(const ControlRiccati& cr, const SpaceGrid& space) {
  require(cr.K.front().rows() == 1 && cr.K.front().cols() == 1, ErrorCode::DimensionMismatch,
          "grid policy needs a scalar LQ problem");
  PolicyField p{space, cr.time, std::vector<double>(space.size() * cr.time.size()), PolicyProvenance::LqRiccati};
  for (std::size_t k = 0; k < cr.time.size(); ++k)
    for (std::size_t j = 0; j < space.size(); ++j) p.a[k * space.size() + j] = -cr.K[k](0, 0) * space.x(j);
  return p;
}

struct ControlRunReport {
  std::uint64_t seed = 0;
  double realized_cost = 0.0;
  double separated_cost_estimate = 0.0;
  double separated_std_err = 0.0;
  double mu_y0 = 0.0;
  std::vector<double> filter_mean;
  double min_ess = 0.0;
};

// Closed-loop LQG run with certainty equivalence: alpha_k = -K_k m_k from the running
// Kalman-Bucy mean. Returns the realized cost int |alpha|^2/2 dt + X_T^T Qf X_T / 2.
inline ControlRunReport certainty_equivalence_run(const LinearGaussianModelSpec& lg, const ControlRiccati& cr,
                                                  const Matrix& Qf, const RiccatiSolution& ric, std::uint64_t seed) {
  const TimeGrid& grid = ric.time;
  require(cr.time == grid, ErrorCode::GridMismatch, "control and filter Riccati grids differ");
  const Eigen::Index n = lg.state_dim();
  const Eigen::Index m = lg.obs_dim();
  const Matrix G = lg.control_matrix();
  const CounterRng rng(seed);
  const double dt = grid.dt();
  const double sqdt = std::sqrt(dt);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(lg.Sigma0);
  const Matrix root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();

  Vector x(n), z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal(Stream::Prior, static_cast<std::uint64_t>(i), 0);
  x = lg.m0 + root * z;
  Vector mean = lg.m0;
  ControlRunReport rep;
  rep.seed = seed;
  rep.filter_mean.push_back(mean(0));
  double cost = 0.0;
  Vector xi(n), eta(m);
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const Vector alpha = -cr.K[k] * mean;
    cost += 0.5 * alpha.squaredNorm() * dt;
    for (Eigen::Index i = 0; i < n; ++i) xi(i) = rng.normal(Stream::Truth, static_cast<std::uint64_t>(2 * i), k);
    for (Eigen::Index i = 0; i < m; ++i) eta(i) = rng.normal(Stream::Truth, static_cast<std::uint64_t>(2 * i + 1), k);
    const Vector dZ = lg.H.transpose() * x * dt + sqdt * eta;
    const Vector control_drift = G * alpha;
    x += (lg.A.transpose() * x + control_drift) * dt + lg.sigma * sqdt * xi;
    require(x.allFinite() && x.cwiseAbs().maxCoeff() <= kDivergenceBound, ErrorCode::SimulationDiverged,
            "controlled truth path diverged");
    mean = ric.Phi[k] * mean + ric.Gamma[k] * dZ + ric.Lambda[k] * control_drift;
    rep.filter_mean.push_back(mean(0));
  }
  rep.realized_cost = cost + 0.5 * x.dot(Qf * x);
  return rep;
}

// Certainty equivalence on a scalar model with a grid policy: alpha_k = pi_k[a_k] from a
// resampling particle filter. Running cost |alpha|^2/2, terminal cost f(X_T).
inline ControlRunReport certainty_equivalence_run(const ScalarModelSpec& model, const PolicyField& policy,
                                                  const TimeGrid& grid, std::uint64_t seed, std::size_t n_particles,
                                                  double ess_floor = 0.5) {
  model.validate();
  require(policy.time == grid, ErrorCode::GridMismatch, "policy grid differs from the run grid");
  const CounterRng rng(seed);
  const std::size_t n = grid.n_steps();
  const std::size_t N = n_particles;
  const double dt = grid.dt();
  const double sqdt = std::sqrt(dt);
  const double g = model.control_gain;
  const CounterRng filter_rng(derive_seed(seed, 1));

  double x = model.prior.sample(rng.uniforms(Stream::Prior, 0, 0).first, rng.normals(Stream::Prior, 0, 1).first);
  std::vector<double> px(N), lw(N, 0.0), w, tmp(N);
  for (std::size_t i = 0; i < N; ++i)
    px[i] = model.prior.sample(filter_rng.uniforms(Stream::Prior, i, 0).first,
                               filter_rng.normals(Stream::Prior, i, 1).first);
  ControlRunReport rep;
  rep.seed = seed;
  rep.min_ess = static_cast<double>(N);
  double cost = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double sw = relative_weights(lw, w);
    const double alpha = pairwise_sum(0, N, [&](std::size_t i) { return w[i] * policy.at(k, px[i]); }) / sw;
    rep.filter_mean.push_back(pairwise_sum(0, N, [&](std::size_t i) { return w[i] * px[i]; }) / sw);
    cost += 0.5 * alpha * alpha * dt;
    const auto [xi, eta] = rng.normals(Stream::Truth, 0, k);
    const double dZ = model.obs(x) * dt + sqdt * eta;
    x += (model.drift(x) + g * alpha) * dt + model.sigma * sqdt * xi;
    require(std::abs(x) <= kDivergenceBound, ErrorCode::SimulationDiverged, "controlled truth path diverged");
    for (std::size_t i = 0; i < N; ++i) {
      const double h = model.obs(px[i]);
      lw[i] += h * dZ - 0.5 * h * h * dt;
      px[i] += (model.drift(px[i]) + g * alpha) * dt + model.sigma * sqdt * filter_rng.normal(Stream::Signal, i, k);
    }
    const double ess = effective_sample_size(lw);
    rep.min_ess = std::min(rep.min_ess, ess);
    require(ess >= 1.0 - 1e-9 && std::isfinite(ess), ErrorCode::FilterDivergence, "filter weights collapsed");
    if (ess < ess_floor * static_cast<double>(N)) {
      const auto parent = multinomial_ancestors(lw, filter_rng, k);
      for (std::size_t i = 0; i < N; ++i) tmp[i] = px[parent[i]];
      px.swap(tmp);
      std::fill(lw.begin(), lw.end(), 0.0);
    }
  }
  rep.realized_cost = cost + model.terminal(x);
  return rep;
}

// LQG expected cost under certainty equivalence:
//   m0^T P0 m0 / 2 + tr(P0 Sigma0) / 2 + r0 + int tr(P G G^T P Sigma_t) dt / 2.
inline double lqg_expected_cost(const LinearGaussianModelSpec& lg, const ControlRiccati& cr,
                                const RiccatiSolution& ric) {
  const Matrix G = lg.control_matrix();
  const Matrix GGt = G * G.transpose();
  const double dt = ric.time.dt();
  auto integrand = [&](const Matrix& P, const Matrix& S) { return (P * GGt * P * S).trace(); };
  double integral = 0.0;
  for (std::size_t k = 0; k < ric.time.n_steps(); ++k) {
    integral += dt / 6.0 *
                (integrand(cr.P[k], ric.Sigma[k]) + 4.0 * integrand(cr.P_mid[k], ric.Sigma_mid[k]) +
                 integrand(cr.P[k + 1], ric.Sigma[k + 1]));
  }
  return 0.5 * lg.m0.dot(cr.P[0] * lg.m0) + 0.5 * (cr.P[0] * lg.Sigma0).trace() + cr.r[0] + 0.5 * integral;
}

// Full-information LQ cost from the same initial law.
inline double lq_full_information_cost(const LinearGaussianModelSpec& lg, const ControlRiccati& cr) {
  return 0.5 * lg.m0.dot(cr.P[0] * lg.m0) + 0.5 * (cr.P[0] * lg.Sigma0).trace() + cr.r[0];
}

// Separated cost V_T(alpha | I) of a fixed Markov policy. The ensemble runs the controlled
// dynamics directly; the backward process carries the running cost accrued along each path:
//   V = mu[y_0] + sum_k pi_k[(y_k + C_k)(h - pi_k[h])] dI_k,  C_k = sum_{j<k} c(X_j, a_j(X_j)) dt.
inline ControlRunReport separated_cost_estimate(const ScalarModelSpec& model, const Policy& policy,
                                                const RunningCost& cost, const ObservationRecord& obs,
                                                const GridFunction& y_value, std::size_t n_paths,
                                                std::uint64_t seed) {
  model.validate();
  require(y_value.time == obs.grid, ErrorCode::GridMismatch, "value field and observation grids differ");
  ScalarDynamics dyn = ScalarDynamics::from(model);
  const double g = model.control_gain;
  dyn.drift = [b = model.drift, policy, g](std::size_t k, double x) { return b(x) + g * policy(k, x); };
  const PathEnsemble ens = simulate_innovation_ensemble(dyn, obs.grid, obs, n_paths, seed);
  const std::size_t N = n_paths;
  const std::size_t n = obs.grid.n_steps();
  const double dt = obs.grid.dt();

  ControlRunReport rep;
  rep.seed = seed;
  rep.mu_y0 = prior_term(y_value, model.prior);
  if (obs.has_truth()) {
    double c = 0.0;
    const auto& xt = *obs.truth;
    for (std::size_t k = 0; k < n; ++k) c += (cost ? cost(k, xt[k], policy(k, xt[k])) : 0.0) * dt;
    rep.realized_cost = c + model.terminal(xt[n]);
  }
  std::vector<double> accrued(N, 0.0), w, term(N), per_path(N, 0.0);
  double integral = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto xs = ens.states_at(k);
    const double sw = relative_weights(ens.log_weights_at(k), w);
    const double p = ens.pi_h[k];
    const double dI = ens.innovation_increments[k];
    for (std::size_t i = 0; i < N; ++i) term[i] = w[i] * (y_value.at(k, xs[i]) + accrued[i]) * (model.obs(xs[i]) - p);
    const double c = pairwise_sum(0, N, [&](std::size_t i) { return term[i]; }) / sw;
    integral += c * dI;
    const double scale = static_cast<double>(N) / sw;
    for (std::size_t i = 0; i < N; ++i) {
      per_path[i] += scale * term[i] * dI;
      if (cost) accrued[i] += cost(k, xs[i], policy(k, xs[i])) * dt;
    }
    rep.filter_mean.push_back(pairwise_sum(0, N, [&](std::size_t i) { return w[i] * xs[i]; }) / sw);
  }
  detail::mean_and_se(per_path, rep.separated_std_err);
  rep.separated_cost_estimate = rep.mu_y0 + integral;
  return rep;
}

// Truth and observations under a fixed Markov policy.
inline ObservationRecord simulate_controlled_truth(const ScalarModelSpec& model, const Policy& policy,
                                                   const TimeGrid& grid, std::uint64_t seed) {
  ScalarDynamics dyn = ScalarDynamics::from(model);
  const double g = model.control_gain;
  dyn.drift = [b = model.drift, policy, g](std::size_t k, double x) { return b(x) + g * policy(k, x); };
  return simulate_truth_and_obs(dyn, grid, seed);
}

// ---------------------------------------------------------------------------
// LQG alternating iteration
// ---------------------------------------------------------------------------

struct LqgIterationResult {
  std::vector<Matrix> K;      // converged gain path on the grid
  RiccatiSolution filter;
  std::vector<double> gain_change;  // max_k |K_new - K| per sweep
  std::vector<double> sweep_cost;   // expected cost of the law evaluated in each sweep
  std::size_t sweeps = 0;
};

// Alternates (i) the Kalman-Bucy filter under the current linear law alpha = -K m, which yields
// the covariance and the second moment of the filtered mean, and (ii) backward evaluation of
// that law, -dP/dt = F^T P + P F + K^T K with F = A^T - G K, followed by the update K = G^T P.
inline LqgIterationResult lqg_alternating_iteration(const LinearGaussianModelSpec& lg, const Matrix& Qf,
                                                    const TimeGrid& grid, double tol = 1e-6,
                                                    std::size_t max_sweeps = 20) {
  lg.validate();
  const Matrix G = lg.control_matrix();
  const Eigen::Index n = lg.state_dim();
  const Eigen::Index p = G.cols();
  const Matrix At = lg.A.transpose();
  const std::size_t N = grid.n_steps();
  const double dt = grid.dt();
  const Matrix HHt = lg.H * lg.H.transpose();

  LqgIterationResult res;
  res.filter = riccati_filter(lg.A, lg.H, lg.sigma, lg.Sigma0, grid);
  const RiccatiSolution& ric = res.filter;

  std::vector<Matrix> K(N + 1, Matrix::Zero(p, n)), K_mid(N, Matrix::Zero(p, n));
  auto closed = [&](const Matrix& Kt) -> Matrix { return At - G * Kt; };

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    // (i) forward: second moment M of the filtered mean under the current law.
    Matrix M = lg.m0 * lg.m0.transpose();
    double running = 0.0;
    auto mdot = [&](const Matrix& Mt, const Matrix& Kt, const Matrix& S) -> Matrix {
      const Matrix F = closed(Kt);
      return F * Mt + Mt * F.transpose() + S * HHt * S;
    };
    for (std::size_t k = 0; k < N; ++k) {
      const Matrix k1 = mdot(M, K[k], ric.Sigma[k]);
      const Matrix k2 = mdot(M + 0.5 * dt * k1, K_mid[k], ric.Sigma_mid[k]);
      const Matrix k3 = mdot(M + 0.5 * dt * k2, K_mid[k], ric.Sigma_mid[k]);
      const Matrix k4 = mdot(M + dt * k3, K[k + 1], ric.Sigma[k + 1]);
      const Matrix M1 = M + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      const Matrix Mm = 0.5 * (M + M1) + dt / 8.0 * (k1 - k4);  // cubic Hermite midpoint
      running += dt / 6.0 *
                 ((K[k].transpose() * K[k] * M).trace() + 4.0 * (K_mid[k].transpose() * K_mid[k] * Mm).trace() +
                  (K[k + 1].transpose() * K[k + 1] * M1).trace());
      M = M1;
    }
    res.sweep_cost.push_back(0.5 * running + 0.5 * (Qf * (M + ric.Sigma[N])).trace());

    // (ii) backward: evaluate the law and improve the gain.
    auto pdot = [&](const Matrix& P, const Matrix& Kt) -> Matrix {
      const Matrix F = closed(Kt);
      return F.transpose() * P + P * F + Kt.transpose() * Kt;
    };
    std::vector<Matrix> P(N + 1), P_mid(N);
    P[N] = Qf;
    for (std::size_t k = N; k-- > 0;) {
      // reverse time: dP/ds = pdot
      const Matrix k1 = pdot(P[k + 1], K[k + 1]);
      const Matrix k2 = pdot(P[k + 1] + 0.5 * dt * k1, K_mid[k]);
      const Matrix k3 = pdot(P[k + 1] + 0.5 * dt * k2, K_mid[k]);
      const Matrix k4 = pdot(P[k + 1] + dt * k3, K[k]);
      P[k] = detail::symmetrize(P[k + 1] + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
      detail::check_blowup(P[k]);
      // Hermite midpoint with end slopes evaluated at the new endpoint values.
      const Matrix s1 = pdot(P[k + 1], K[k + 1]);
      const Matrix s0 = pdot(P[k], K[k]);
      P_mid[k] = 0.5 * (P[k] + P[k + 1]) + dt / 8.0 * (s1 - s0);
    }
    double change = 0.0;
    for (std::size_t k = 0; k <= N; ++k) {
      const Matrix next = G.transpose() * P[k];
      change = std::max(change, (next - K[k]).cwiseAbs().maxCoeff());
      K[k] = next;
    }
    for (std::size_t k = 0; k < N; ++k) K_mid[k] = G.transpose() * P_mid[k];
    res.gain_change.push_back(change);
    res.sweeps = sweep + 1;
    if (change < tol) {
      res.K = std::move(K);
      return res;
    }
  }
  fail(ErrorCode::IterationNotConverged, "LQG alternating iteration did not converge within the sweep cap");
}

// ---------------------------------------------------------------------------
// Remark identity
// ---------------------------------------------------------------------------

enum class RemarkControl { ClosedLoop, Zero };

// Both sides of pi_T[f] = mu[Y_0] - int pi_t[h]^T alpha_t dt + int pi_t[Y (h - pi[h])]^T dI_t for the
// LG model with the running cost h(x)^T alpha; returns |LHS - RHS|.
inline double remark_consistency_check(const LinearGaussianModelSpec& lg, const ObservationRecord& obs,
                                       RemarkControl control = RemarkControl::ClosedLoop) {
  lg.validate();
  const RiccatiSolution ric = riccati_filter(lg.A, lg.H, lg.sigma, lg.Sigma0, obs.grid);
  const GaussianState st = kalman_bucy_mean(lg.H, ric, lg.m0, obs);
  const std::size_t n = obs.grid.n_steps();
  const double dt = obs.grid.dt();
  std::vector<Vector> alpha(n, Vector::Zero(lg.obs_dim()));
  if (control == RemarkControl::ClosedLoop) alpha = closed_loop_transition(ric, lg.f_bar).u;
  const BackwardVector y = dual_backward(ric, lg.H, lg.f_bar, &alpha);
  const double lhs = lg.f_bar.dot(st.m[n]);
  double rhs = y.y[0].dot(lg.m0);
  for (std::size_t k = 0; k < n; ++k) {
    const Vector pi_h = lg.H.transpose() * st.m[k];
    const Vector integrand = ric.Gamma[k].transpose() * y.y[k + 1];
    rhs += -pi_h.dot(alpha[k]) * dt + integrand.dot(st.dI[k]);
  }
  return std::abs(lhs - rhs);
}

inline void write_csv_header(std::ostream& os, const ControlRunReport&) {
  os << "seed,realized_cost,separated_cost_estimate,mu_y0\n";
}

inline void write_csv_row(std::ostream& os, const ControlRunReport& rep) {
  const auto old = os.precision(17);
  os << rep.seed << ',' << rep.realized_cost << ',' << rep.separated_cost_estimate << ',' << rep.mu_y0 << '\n';
  os.precision(old);
}

}  // namespace fbsde
