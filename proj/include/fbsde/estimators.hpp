#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/kalman.hpp"
#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/particle.hpp"
#include "fbsde/pde_backward.hpp"
#include "fbsde/sde_sim.hpp"

namespace fbsde {

enum class EstimatorId { SigmaObs, PiInnovation, PiObs, SigmaObsError };

inline std::string_view to_string(EstimatorId id) {
  switch (id) {
    case EstimatorId::SigmaObs: return "sigma_obs";
    case EstimatorId::PiInnovation: return "pi_innovation";
    case EstimatorId::PiObs: return "pi_obs";
    case EstimatorId::SigmaObsError: return "sigma_obs_error";
  }
  return "unknown";
}

inline EstimatorId parse_estimator_id(std::string_view s) {
  for (EstimatorId id : {EstimatorId::SigmaObs, EstimatorId::PiInnovation, EstimatorId::PiObs,
                         EstimatorId::SigmaObsError}) {
    if (to_string(id) == s) return id;
  }
  fail(ErrorCode::InvalidArgument, "unknown estimator '" + std::string(s) + "'");
}

struct VarianceDecayReport {
  TimeGrid time;
  std::vector<double> var_Ytilde;
  std::vector<double> dirichlet_rhs;
  std::vector<double> cumulative_rhs;
};

struct EstimatorReport {
  EstimatorId estimator_id = EstimatorId::SigmaObs;
  double point_estimate = 0.0;
  double mc_std_err = 0.0;
  double y0_prior_term = 0.0;
  double stochastic_integral_term = 0.0;
  std::vector<double> control_path;  // averaged control u_k per step
  std::size_t n_paths = 0;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::optional<std::size_t> weight_collapse_step;
  std::optional<VarianceDecayReport> diagnostics;
};

// mu[y_0] by quadrature against the prior.
inline double prior_term(const GridFunction& y, const GaussianMixture& prior) {
  return prior.expectation([&](double x) { return y.at(0, x); });
}

namespace detail {

inline void check_grids(const GridFunction& y, const TimeGrid& grid) {
  require(y.time == grid, ErrorCode::GridMismatch, "backward solution and ensemble use different time grids");
}

inline double mean_and_se(const std::vector<double>& v, double& se) {
  const std::size_t N = v.size();
  const double mean = pairwise_sum(0, N, [&](std::size_t i) { return v[i]; }) / static_cast<double>(N);
  const double ss = pairwise_sum(0, N, [&](std::size_t i) { return (v[i] - mean) * (v[i] - mean); });
  se = N > 1 ? std::sqrt(ss / static_cast<double>(N - 1) / static_cast<double>(N)) : 0.0;
  return mean;
}

}  // namespace detail

// Estimator I: mu[y_0] + sum_k E~[D~_k y_k(X_k) h(X_k)] dZ_k. The initial weight d scales the
// whole representation Y~ = d y(x).
inline EstimatorReport estimate_sigma_obs(const ScalarModelSpec& model, const ObservationRecord& obs,
                                          const GridFunction& y, const PathEnsemble& ens,
                                          double initial_weight = 1.0) {
  require(ens.log_weights_Dtilde.has_value(), ErrorCode::InvalidArgument, "estimator I needs Girsanov weights");
  require(obs.grid == ens.grid, ErrorCode::GridMismatch, "observation record and ensemble grids differ");
  detail::check_grids(y, ens.grid);
  const std::size_t N = ens.n_paths;
  const std::size_t n = ens.grid.n_steps();
  EstimatorReport rep;
  rep.estimator_id = EstimatorId::SigmaObs;
  rep.n_paths = N;
  rep.dt = ens.grid.dt();
  rep.seed = ens.seed;
  rep.y0_prior_term = initial_weight * prior_term(y, model.prior);
  std::vector<double> per_path(N, 0.0), term(N);
  rep.control_path.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto xs = ens.states_at(k);
    const auto lw = ens.log_weights_at(k);
    for (std::size_t i = 0; i < N; ++i) {
      term[i] = initial_weight * std::exp(lw[i]) * y.at(k, xs[i]) * model.obs(xs[i]);
      per_path[i] += term[i] * obs.dZ[k];
    }
    const double c = pairwise_sum(0, N, [&](std::size_t i) { return term[i]; }) / static_cast<double>(N);
    rep.control_path[k] = -c;
    rep.stochastic_integral_term += c * obs.dZ[k];
  }
  detail::mean_and_se(per_path, rep.mc_std_err);
  rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
  return rep;
}

// Estimator II on an innovation ensemble: mu[y_0] + sum_k pi_k[y_k (h - pi_k[h])] dI_k with the
// innovation and pi[h] path recorded in the ensemble.
inline EstimatorReport estimate_pi_innovation(const ScalarModelSpec& model, const GridFunction& y,
                                              const PathEnsemble& ens) {
  require(ens.log_weights_D.has_value(), ErrorCode::InvalidArgument, "estimator II needs innovation weights");
  detail::check_grids(y, ens.grid);
  const std::size_t N = ens.n_paths;
  const std::size_t n = ens.grid.n_steps();
  require(ens.pi_h.size() == n && ens.innovation_increments.size() == n, ErrorCode::GridMismatch,
          "ensemble lacks its innovation record");
  EstimatorReport rep;
  rep.estimator_id = EstimatorId::PiInnovation;
  rep.n_paths = N;
  rep.dt = ens.grid.dt();
  rep.seed = ens.seed;
  rep.weight_collapse_step = ens.weight_collapse_step;
  rep.y0_prior_term = prior_term(y, model.prior);
  std::vector<double> per_path(N, 0.0), w, term(N);
  rep.control_path.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto xs = ens.states_at(k);
    const double sw = relative_weights(ens.log_weights_at(k), w);
    const double p = ens.pi_h[k];
    const double dI = ens.innovation_increments[k];
    for (std::size_t i = 0; i < N; ++i) term[i] = w[i] * y.at(k, xs[i]) * (model.obs(xs[i]) - p);
    const double c = pairwise_sum(0, N, [&](std::size_t i) { return term[i]; }) / sw;
    const double scale = static_cast<double>(N) / sw;
    for (std::size_t i = 0; i < N; ++i) per_path[i] += scale * term[i] * dI;
    rep.control_path[k] = -c;
    rep.stochastic_integral_term += c * dI;
  }
  detail::mean_and_se(per_path, rep.mc_std_err);
  rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
  return rep;
}

// pi_k[g] supplier used by the estimator III fixed point.
using PiSource = std::function<double(std::size_t, const std::function<double(double)>&)>;

// Gaussian N(m_k, Sigma_k) expectations by quadrature (exact Kalman-Bucy source for LG models).
inline PiSource gaussian_pi_source(const GaussianState& state) {
  auto shared = std::make_shared<GaussianState>(state);
  return [shared](std::size_t k, const std::function<double(double)>& g) {
    return GaussianMixture(shared->m[k](0), shared->Sigma[k](0, 0)).expectation(g);
  };
}

// Self-normalized weighted ensemble (innovation ensemble or Girsanov ensemble).
inline PiSource ensemble_pi_source(const PathEnsemble& ens) {
  auto shared = std::make_shared<PathEnsemble>(ens);
  return [shared](std::size_t k, const std::function<double(double)>& g) {
    std::vector<double> w;
    const auto xs = shared->states_at(k);
    const double sw = relative_weights(shared->log_weights_at(k), w);
    return pairwise_sum(0, w.size(), [&](std::size_t i) { return w[i] * g(xs[i]); }) / sw;
  };
}

enum class PiObsMode { LgClosedForm, FixedPoint };

// Estimator III, closed form for LG models: u_k from the closed-loop backward recursion
// consistent with the Kalman-Bucy update; estimate = y_0^T m_0 - sum_k u_k dZ_k.
inline EstimatorReport estimate_pi_obs_lg(const LinearGaussianModelSpec& lg, const ObservationRecord& obs) {
  lg.validate();
  require(lg.obs_dim() == 1, ErrorCode::DimensionMismatch, "scalar observation record needs m = 1");
  const RiccatiSolution ric = riccati_filter(lg.A, lg.H, lg.sigma, lg.Sigma0, obs.grid);
  const ClosedLoopSolution cl = closed_loop_transition(ric, lg.f_bar);
  EstimatorReport rep;
  rep.estimator_id = EstimatorId::PiObs;
  rep.dt = obs.grid.dt();
  rep.seed = obs.seed;
  rep.y0_prior_term = cl.ybar.y[0].dot(lg.m0);
  rep.control_path.resize(obs.grid.n_steps());
  for (std::size_t k = 0; k < obs.grid.n_steps(); ++k) {
    rep.control_path[k] = cl.u[k](0);
    rep.stochastic_integral_term -= cl.u[k](0) * obs.dZ[k];
  }
  rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
  rep.iterations = 1;
  return rep;
}

struct FixedPointOptions {
  double tol = 1e-6;
  std::size_t max_iterations = 50;
};

// Estimator III by frozen-data fixed point: y solves -d_t y = L y + u_k h(x), then
// u_k <- -pi_k[y_k (h - pi_k[h])], until the control path moves less than tol.
inline EstimatorReport estimate_pi_obs_fixed_point(const ScalarModelSpec& model, const ObservationRecord& obs,
                                                   const PiSource& pi, const SpaceGrid& space,
                                                   FixedPointOptions options = {}, GridFunction* y_out = nullptr) {
  const TimeGrid& grid = obs.grid;
  const std::size_t n = grid.n_steps();
  std::vector<double> u(n, 0.0), pi_h(n);
  const std::function<double(double)> h = [hf = model.obs](double x) { return hf(x); };
  for (std::size_t k = 0; k < n; ++k) pi_h[k] = pi(k, h);

  auto solve = [&](const std::vector<double>& control) {
    BackwardProblem p = transport_problem(model);
    p.source = [&control, hf = model.obs](std::size_t k, double x) { return control[k] * hf(x); };
    return solve_backward(p, sample_on_grid(model.terminal, space), space, grid);
  };

  EstimatorReport rep;
  rep.estimator_id = EstimatorId::PiObs;
  rep.dt = grid.dt();
  rep.seed = obs.seed;
  bool converged = false;
  for (std::size_t it = 0; it < options.max_iterations && !converged; ++it) {
    const GridFunction y = solve(u);
    double change = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double next = -pi(k, [&](double x) { return y.at(k, x) * (h(x) - pi_h[k]); });
      change = std::max(change, std::abs(next - u[k]));
      u[k] = next;
    }
    rep.iterations = it + 1;
    converged = change < options.tol;
  }
  require(converged, ErrorCode::FixedPointNotConverged,
          "estimator III control did not settle within " + std::to_string(options.max_iterations) + " iterations");
  GridFunction y = solve(u);
  rep.y0_prior_term = prior_term(y, model.prior);
  for (std::size_t k = 0; k < n; ++k) rep.stochastic_integral_term -= u[k] * obs.dZ[k];
  rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
  rep.control_path = std::move(u);
  if (y_out != nullptr) *y_out = std::move(y);
  return rep;
}

// Where the observation error driving estimator IV comes from.
//  simulated: each path uses its own error dW^i = dZ - h(X^i) dt; y must solve
//             -d_t y = L y + h^2 y (solve_observation_error_pde). Unbiased given Z alone.
//  recorded:  the recorded truth path supplies W; y solves the Feynman-Kac equation.
enum class ObservationErrorSource { Simulated, Recorded };

inline GridFunction solve_observation_error_pde(const ScalarModelSpec& model, const SpaceGrid& space,
                                                const TimeGrid& time) {
  if (model.obs.is_zero()) return solve_backward_kolmogorov(model, space, time);
  return solve_with_potential(
      model, [h = model.obs](double x) { return h(x) * h(x); }, space, time);
}

// Estimator IV: mu[y_0] + sum_k E~[D~_k y_k(X_k) h(X_k) dW_k].
inline EstimatorReport estimate_sigma_obs_error(const ScalarModelSpec& model, const ObservationRecord& obs,
                                                const GridFunction& y, const PathEnsemble& ens,
                                                ObservationErrorSource source = ObservationErrorSource::Simulated) {
  require(ens.log_weights_Dtilde.has_value(), ErrorCode::InvalidArgument, "estimator IV needs Girsanov weights");
  require(obs.grid == ens.grid, ErrorCode::GridMismatch, "observation record and ensemble grids differ");
  detail::check_grids(y, ens.grid);
  std::vector<double> W;
  if (source == ObservationErrorSource::Recorded) {
    W = compute_observation_error(obs, [hf = model.obs](double x) { return hf(x); });
  }
  const std::size_t N = ens.n_paths;
  const std::size_t n = ens.grid.n_steps();
  const double dt = ens.grid.dt();
  EstimatorReport rep;
  rep.estimator_id = EstimatorId::SigmaObsError;
  rep.n_paths = N;
  rep.dt = dt;
  rep.seed = ens.seed;
  rep.y0_prior_term = prior_term(y, model.prior);
  std::vector<double> per_path(N, 0.0), term(N);
  rep.control_path.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto xs = ens.states_at(k);
    const auto lw = ens.log_weights_at(k);
    for (std::size_t i = 0; i < N; ++i) {
      const double hx = model.obs(xs[i]);
      term[i] = std::exp(lw[i]) * y.at(k, xs[i]) * hx;
      const double dW = source == ObservationErrorSource::Recorded ? W[k + 1] - W[k] : obs.dZ[k] - hx * dt;
      per_path[i] += term[i] * dW;
    }
    rep.control_path[k] = -pairwise_sum(0, N, [&](std::size_t i) { return term[i]; }) / static_cast<double>(N);
  }
  rep.stochastic_integral_term = detail::mean_and_se(per_path, rep.mc_std_err);
  rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
  return rep;
}

// ---------------------------------------------------------------------------
// Cost functionals and variance decay
// ---------------------------------------------------------------------------

// Perturbation delta(t, x, d) added to the optimal control U = -V.
using Perturbation = std::function<double(double, double, double)>;

struct CostResult {
  double mean = 0.0;
  double std_err = 0.0;
  std::vector<double> per_path;
};

// Monte Carlo value of int (|Q|^2 + |U + V|^2) dt with Q = weight sigma y', V the estimator's
// optimal-control integrand (D~ y h for I and IV, D y (h - pi[h]) for II) and U = -V + delta.
inline CostResult cost_functional(EstimatorId id, const ScalarModelSpec& model, const PathEnsemble& ens,
                                  const GridFunction& y, const Perturbation& delta = {}) {
  detail::check_grids(y, ens.grid);
  const bool innovation = id == EstimatorId::PiInnovation || id == EstimatorId::PiObs;
  require(!innovation || (ens.log_weights_D.has_value() && ens.pi_h.size() == ens.grid.n_steps()),
          ErrorCode::InvalidArgument, "innovation cost needs an innovation ensemble");
  require(innovation || ens.log_weights_Dtilde.has_value(), ErrorCode::InvalidArgument,
          "observation cost needs a Girsanov ensemble");
  const auto& logw = innovation ? *ens.log_weights_D : *ens.log_weights_Dtilde;
  const std::size_t N = ens.n_paths;
  const std::size_t n = ens.grid.n_steps();
  const double dt = ens.grid.dt();
  CostResult res;
  res.per_path.assign(N, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const auto xs = ens.states_at(k);
    const double t = ens.grid.time(k);
    const double p = innovation ? ens.pi_h[k] : 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double d = std::exp(logw[k * N + i]);
      const double x = xs[i];
      const double q = d * model.sigma * y.grad_at(k, x);
      const double v = d * y.at(k, x) * (model.obs(x) - p);
      const double u = -v + (delta ? delta(t, x, d) : 0.0);
      res.per_path[i] += (q * q + (u + v) * (u + v)) * dt;
    }
  }
  res.mean = detail::mean_and_se(res.per_path, res.std_err);
  return res;
}

enum class DecayFlavor { Sigma, Pi };

// Per-step ensemble variance of weight * y_k(X_k) and the Dirichlet-form rate
//   sigma^2 E[(w y')^2] + E[(w y g - E[w y g])^2],  g = h (sigma) or h - pi[h] (pi),
// with its left-point cumulative integral.
inline VarianceDecayReport variance_decay(const ScalarModelSpec& model, const GridFunction& y,
                                          const PathEnsemble& ens, DecayFlavor flavor) {
  detail::check_grids(y, ens.grid);
  require(flavor == DecayFlavor::Sigma ? ens.log_weights_Dtilde.has_value() : ens.log_weights_D.has_value(),
          ErrorCode::InvalidArgument, "ensemble weights do not match the decay flavor");
  const auto& logw = flavor == DecayFlavor::Sigma ? *ens.log_weights_Dtilde : *ens.log_weights_D;
  const std::size_t N = ens.n_paths;
  const std::size_t n = ens.grid.n_steps();
  const double dt = ens.grid.dt();
  VarianceDecayReport rep;
  rep.time = ens.grid;
  std::vector<double> yt(N), gradterm(N), noise(N);
  double cumulative = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    const auto xs = ens.states_at(k);
    const double p = flavor == DecayFlavor::Pi && k < n ? ens.pi_h[k] : 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double d = std::exp(logw[k * N + i]);
      const double yv = y.at(k, xs[i]);
      yt[i] = d * yv;
      const double gq = d * model.sigma * y.grad_at(k, xs[i]);
      gradterm[i] = gq * gq;
      noise[i] = d * yv * (model.obs(xs[i]) - p);
    }
    double unused = 0.0;
    const double mean = detail::mean_and_se(yt, unused);
    const double var = pairwise_sum(0, N, [&](std::size_t i) { return (yt[i] - mean) * (yt[i] - mean); }) /
                       static_cast<double>(N - 1);
    const double nmean = detail::mean_and_se(noise, unused);
    const double rhs =
        pairwise_sum(0, N, [&](std::size_t i) {
          return gradterm[i] + (noise[i] - nmean) * (noise[i] - nmean);
        }) / static_cast<double>(N);
    rep.var_Ytilde.push_back(var);
    rep.dirichlet_rhs.push_back(rhs);
    rep.cumulative_rhs.push_back(cumulative);
    cumulative += rhs * dt;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline void write_csv_header(std::ostream& os, const EstimatorReport&) {
  os << "estimator_id,estimate,std_err,mu_y0,integral_term,n_paths,dt,seed\n";
}

inline void write_csv_row(std::ostream& os, const EstimatorReport& rep) {
  const auto old = os.precision(17);
  os << to_string(rep.estimator_id) << ',' << rep.point_estimate << ',' << rep.mc_std_err << ','
     << rep.y0_prior_term << ',' << rep.stochastic_integral_term << ',' << rep.n_paths << ',' << rep.dt << ','
     << rep.seed << '\n';
  os.precision(old);
}

inline void write_csv(std::ostream& os, const VarianceDecayReport& rep) {
  os << "t,var,rhs,cum_rhs\n";
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < rep.var_Ytilde.size(); ++k)
    os << rep.time.time(k) << ',' << rep.var_Ytilde[k] << ',' << rep.dirichlet_rhs[k] << ','
       << rep.cumulative_rhs[k] << '\n';
  os.precision(old);
}

}  // namespace fbsde
