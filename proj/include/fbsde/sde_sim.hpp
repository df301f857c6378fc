#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/rng.hpp"

namespace fbsde {

inline constexpr double kDivergenceBound = 1e8;

// Scalar signal/observation dynamics. The drift may depend on the step index so that
// controlled (Markov policy) dynamics share the same simulators.
struct ScalarDynamics {
  std::function<double(std::size_t, double)> drift;
  double sigma = 1.0;
  std::function<double(double)> obs;
  GaussianMixture prior;

  static ScalarDynamics from(const ScalarModelSpec& model) {
    model.validate();
    ScalarDynamics d;
    d.drift = [b = model.drift](std::size_t, double x) { return b(x); };
    d.sigma = model.sigma;
    d.obs = [h = model.obs](double x) { return h(x); };
    d.prior = model.prior;
    return d;
  }
};

struct ObservationRecord {
  TimeGrid grid;
  std::vector<double> Z;   // n_steps + 1 values, Z[0] = 0
  std::vector<double> dZ;  // n_steps increments, Z[k+1] = Z[k] + dZ[k]
  std::optional<std::vector<double>> truth;  // signal path for synthetic data
  std::optional<std::vector<double>> noise;  // cumulative measurement noise sqrt(dt)*eta
  std::uint64_t seed = 0;

  [[nodiscard]] bool has_truth() const noexcept { return truth.has_value(); }

  static ObservationRecord from_increments(const TimeGrid& grid, std::vector<double> increments) {
    require(increments.size() == grid.n_steps(), ErrorCode::GridMismatch, "observation increments do not match grid");
    ObservationRecord rec;
    rec.grid = grid;
    rec.dZ = std::move(increments);
    rec.Z.assign(grid.size(), 0.0);
    for (std::size_t k = 0; k < grid.n_steps(); ++k) rec.Z[k + 1] = rec.Z[k] + rec.dZ[k];
    return rec;
  }
};

struct SimulationOptions {
  bool signal_noise = true;
  bool observation_noise = true;
};

// Euler-Maruyama for the signal/observation pair:
//   X_{k+1} = X_k + b(X_k) dt + sigma sqrt(dt) xi_k,  Z_{k+1} = Z_k + h(X_k) dt + sqrt(dt) eta_k.
inline ObservationRecord simulate_truth_and_obs(const ScalarDynamics& dyn, const TimeGrid& grid, std::uint64_t seed,
                                                SimulationOptions options = {}) {
  const CounterRng rng(seed);
  const std::size_t n = grid.n_steps();
  const double dt = grid.dt();
  const double sqdt = std::sqrt(dt);

  ObservationRecord rec;
  rec.grid = grid;
  rec.seed = seed;
  rec.Z.assign(n + 1, 0.0);
  rec.dZ.assign(n, 0.0);
  std::vector<double> x(n + 1, 0.0);
  std::vector<double> noise(n + 1, 0.0);

  const auto [u0, u1] = rng.uniforms(Stream::Prior, 0, 0);
  const auto [z0, z1] = rng.normals(Stream::Prior, 0, 1);
  (void)u1;
  (void)z1;
  x[0] = dyn.prior.sample(u0, z0);

  for (std::size_t k = 0; k < n; ++k) {
    const auto [xi, eta] = rng.normals(Stream::Truth, 0, k);
    const double dw = options.observation_noise ? sqdt * eta : 0.0;
    const double db = options.signal_noise ? dyn.sigma * sqdt * xi : 0.0;
    rec.dZ[k] = dyn.obs(x[k]) * dt + dw;
    rec.Z[k + 1] = rec.Z[k] + rec.dZ[k];
    noise[k + 1] = noise[k] + dw;
    x[k + 1] = x[k] + dyn.drift(k, x[k]) * dt + db;
    if (!(std::abs(x[k + 1]) <= kDivergenceBound)) {
      fail(ErrorCode::SimulationDiverged, "truth path left |x| <= 1e8 at step " + std::to_string(k + 1));
    }
  }
  rec.truth = std::move(x);
  rec.noise = std::move(noise);
  return rec;
}

inline ObservationRecord simulate_truth_and_obs(const ScalarModelSpec& model, const TimeGrid& grid,
                                                std::uint64_t seed, SimulationOptions options = {}) {
  return simulate_truth_and_obs(ScalarDynamics::from(model), grid, seed, options);
}

// I_k = Z_k - sum_{j<k} pi_j[h] dt, I_0 = 0.
inline std::vector<double> compute_innovation(const ObservationRecord& obs, std::span<const double> pi_h_path) {
  const std::size_t n = obs.grid.n_steps();
  require(pi_h_path.size() == n || pi_h_path.size() == n + 1, ErrorCode::GridMismatch,
          "pi[h] path length does not match the observation grid");
  const double dt = obs.grid.dt();
  std::vector<double> innovation(n + 1, 0.0);
  double drift = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    drift += pi_h_path[k] * dt;
    innovation[k + 1] = obs.Z[k + 1] - drift;
  }
  return innovation;
}

// W_k = Z_k - sum_{j<k} h(X_j) dt along the recorded truth path.
inline std::vector<double> compute_observation_error(const ObservationRecord& obs,
                                                     const std::function<double(double)>& h) {
  require(obs.has_truth(), ErrorCode::MissingTruthPath, "observation error needs the signal path");
  const std::size_t n = obs.grid.n_steps();
  const double dt = obs.grid.dt();
  const auto& x = *obs.truth;
  std::vector<double> w(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) w[k + 1] = w[k] + (obs.dZ[k] - h(x[k]) * dt);
  return w;
}

// ---------------------------------------------------------------------------
// Path ensembles
// ---------------------------------------------------------------------------

enum class EnsembleUse { Estimator, Filter };

struct PathEnsemble {
  TimeGrid grid;
  std::size_t n_paths = 0;
  std::vector<double> states;  // time-major: states[k * n_paths + i]
  std::optional<std::vector<double>> log_weights_D;
  std::optional<std::vector<double>> log_weights_Dtilde;
  std::uint64_t seed = 0;
  EnsembleUse use = EnsembleUse::Estimator;
  std::vector<std::size_t> resample_steps;

  // Innovation ensembles record the pi[h] path and innovation increments that drove them.
  std::vector<double> pi_h;
  std::vector<double> innovation_increments;
  std::vector<double> ess;
  std::optional<std::size_t> weight_collapse_step;

  [[nodiscard]] std::span<const double> states_at(std::size_t k) const {
    return {states.data() + k * n_paths, n_paths};
  }
  [[nodiscard]] double state(std::size_t k, std::size_t i) const { return states[k * n_paths + i]; }

  [[nodiscard]] const std::vector<double>& log_weights() const {
    if (log_weights_Dtilde) return *log_weights_Dtilde;
    require(log_weights_D.has_value(), ErrorCode::InvalidArgument, "ensemble carries no weights");
    return *log_weights_D;
  }
  [[nodiscard]] std::span<const double> log_weights_at(std::size_t k) const {
    return {log_weights().data() + k * n_paths, n_paths};
  }
};

// Simulates N independent signal paths from the prior. X paths depend only on (seed, path, step),
// so Girsanov and innovation ensembles built with the same seed share their signal paths.
inline std::vector<double> simulate_signal_paths(const ScalarDynamics& dyn, const TimeGrid& grid, std::size_t n_paths,
                                                 std::uint64_t seed, std::size_t workers = default_workers()) {
  require(n_paths > 0, ErrorCode::InvalidArgument, "ensemble needs at least one path");
  const CounterRng rng(seed);
  const std::size_t n = grid.n_steps();
  const double dt = grid.dt();
  const double noise_scale = dyn.sigma * std::sqrt(dt);
  std::vector<double> states((n + 1) * n_paths, 0.0);
  std::atomic<bool> diverged{false};

  parallel_chunks(n_paths, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto [u, unused] = rng.uniforms(Stream::Prior, i, 0);
      (void)unused;
      const auto [z, unused2] = rng.normals(Stream::Prior, i, 1);
      (void)unused2;
      double x = dyn.prior.sample(u, z);
      states[i] = x;
      for (std::size_t k = 0; k < n; ++k) {
        x += dyn.drift(k, x) * dt + noise_scale * rng.normal(Stream::Signal, i, k);
        if (!(std::abs(x) <= kDivergenceBound)) {
          diverged.store(true);
          return;
        }
        states[(k + 1) * n_paths + i] = x;
      }
    }
  });
  require(!diverged.load(), ErrorCode::SimulationDiverged, "an ensemble path left |x| <= 1e8");
  return states;
}

// Girsanov-weighted ensemble: d(log D~) = h(X) dZ - h(X)^2 dt / 2, D~_0 = 1.
inline PathEnsemble simulate_girsanov_ensemble(const ScalarDynamics& dyn, const TimeGrid& grid,
                                               const ObservationRecord& obs, std::size_t n_paths, std::uint64_t seed,
                                               std::size_t workers = default_workers()) {
  require(obs.grid == grid, ErrorCode::GridMismatch, "observation record does not cover the simulation grid");
  PathEnsemble ens;
  ens.grid = grid;
  ens.n_paths = n_paths;
  ens.seed = seed;
  ens.states = simulate_signal_paths(dyn, grid, n_paths, seed, workers);
  const std::size_t n = grid.n_steps();
  const double dt = grid.dt();
  std::vector<double> logw((n + 1) * n_paths, 0.0);
  parallel_chunks(n_paths, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      double lw = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double h = dyn.obs(ens.states[k * n_paths + i]);
        lw += h * obs.dZ[k] - 0.5 * h * h * dt;
        logw[(k + 1) * n_paths + i] = lw;
      }
    }
  });
  ens.log_weights_Dtilde = std::move(logw);
  return ens;
}

inline PathEnsemble simulate_girsanov_ensemble(const ScalarModelSpec& model, const TimeGrid& grid,
                                               const ObservationRecord& obs, std::size_t n_paths, std::uint64_t seed,
                                               std::size_t workers = default_workers()) {
  return simulate_girsanov_ensemble(ScalarDynamics::from(model), grid, obs, n_paths, seed, workers);
}

// Girsanov ensemble under the reference measure: every path is driven by its own Brownian
// observation path, so E[D~_t] = 1 exactly in law.
inline PathEnsemble simulate_girsanov_reference(const ScalarDynamics& dyn, const TimeGrid& grid, std::size_t n_paths,
                                                std::uint64_t seed, std::size_t workers = default_workers()) {
  PathEnsemble ens;
  ens.grid = grid;
  ens.n_paths = n_paths;
  ens.seed = seed;
  ens.states = simulate_signal_paths(dyn, grid, n_paths, seed, workers);
  const CounterRng rng(seed);
  const std::size_t n = grid.n_steps();
  const double dt = grid.dt();
  const double sqdt = std::sqrt(dt);
  std::vector<double> logw((n + 1) * n_paths, 0.0);
  parallel_chunks(n_paths, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      double lw = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double h = dyn.obs(ens.states[k * n_paths + i]);
        lw += h * sqdt * rng.normal(Stream::Brownian, i, k) - 0.5 * h * h * dt;
        logw[(k + 1) * n_paths + i] = lw;
      }
    }
  });
  ens.log_weights_Dtilde = std::move(logw);
  return ens;
}

// Where pi_t[h] comes from when driving the innovation weights.
struct PiHSource {
  enum class Kind { SelfNormalized, External };
  Kind kind = Kind::SelfNormalized;
  std::vector<double> values;  // External: pi_k[h] for k = 0..n_steps-1 (or n_steps)

  static PiHSource self_normalized() { return {}; }
  static PiHSource external(std::vector<double> path) { return {Kind::External, std::move(path)}; }
};

struct InnovationOptions {
  // WeightCollapse is signalled (not thrown) when ESS drops below ess_floor * N.
  double ess_floor = 0.0;
};

namespace detail {

inline double effective_sample_size(std::span<const double> log_weights) {
  const double lmax = *std::max_element(log_weights.begin(), log_weights.end());
  double s1 = 0.0, s2 = 0.0;
  for (double lw : log_weights) {
    const double w = std::exp(lw - lmax);
    s1 += w;
    s2 += w * w;
  }
  return s1 * s1 / s2;
}

inline double self_normalized_mean(std::span<const double> log_weights, std::span<const double> values) {
  const double lmax = *std::max_element(log_weights.begin(), log_weights.end());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    const double w = std::exp(log_weights[i] - lmax);
    num += w * values[i];
    den += w;
  }
  return num / den;
}

// Advances innovation log-weights: d(log D) = (h - p) dI - (h - p)^2 dt / 2.
// dI_k is either supplied or computed as dZ_k - p_k dt.
inline void evolve_innovation_weights(PathEnsemble& ens, const ScalarDynamics& dyn, const PiHSource& source,
                                      const std::vector<double>* dZ, const std::vector<double>* dI,
                                      const InnovationOptions& options) {
  const std::size_t n = ens.grid.n_steps();
  const std::size_t N = ens.n_paths;
  const double dt = ens.grid.dt();
  if (source.kind == PiHSource::Kind::External) {
    require(source.values.size() >= n, ErrorCode::GridMismatch, "external pi[h] path shorter than grid");
  }
  std::vector<double> logw((n + 1) * N, 0.0);
  std::vector<double> hv(N);
  ens.pi_h.assign(n, 0.0);
  ens.innovation_increments.assign(n, 0.0);
  ens.ess.assign(n + 1, static_cast<double>(N));
  for (std::size_t k = 0; k < n; ++k) {
    const std::span<const double> xs = ens.states_at(k);
    const std::span<const double> lw_k{logw.data() + k * N, N};
    for (std::size_t i = 0; i < N; ++i) hv[i] = dyn.obs(xs[i]);
    const double p = source.kind == PiHSource::Kind::External ? source.values[k]
                                                              : self_normalized_mean(lw_k, hv);
    const double di = dI != nullptr ? (*dI)[k] : (*dZ)[k] - p * dt;
    ens.pi_h[k] = p;
    ens.innovation_increments[k] = di;
    double* next = logw.data() + (k + 1) * N;
    for (std::size_t i = 0; i < N; ++i) {
      const double c = hv[i] - p;
      next[i] = lw_k[i] + c * di - 0.5 * c * c * dt;
    }
    const double ess = effective_sample_size({next, N});
    ens.ess[k + 1] = ess;
    if (!ens.weight_collapse_step && ess < options.ess_floor * static_cast<double>(N)) {
      ens.weight_collapse_step = k + 1;
    }
  }
  ens.log_weights_D = std::move(logw);
}

}  // namespace detail

// Innovation-weighted ensemble driven by an observation record; the innovation is formed on the
// fly from the declared pi[h] source.
inline PathEnsemble simulate_innovation_ensemble(const ScalarDynamics& dyn, const TimeGrid& grid,
                                                 const ObservationRecord& obs, std::size_t n_paths,
                                                 std::uint64_t seed, const PiHSource& source = {},
                                                 InnovationOptions options = {},
                                                 std::size_t workers = default_workers()) {
  require(obs.grid == grid, ErrorCode::GridMismatch, "observation record does not cover the simulation grid");
  PathEnsemble ens;
  ens.grid = grid;
  ens.n_paths = n_paths;
  ens.seed = seed;
  ens.states = simulate_signal_paths(dyn, grid, n_paths, seed, workers);
  detail::evolve_innovation_weights(ens, dyn, source, &obs.dZ, nullptr, options);
  return ens;
}

inline PathEnsemble simulate_innovation_ensemble(const ScalarModelSpec& model, const TimeGrid& grid,
                                                 const ObservationRecord& obs, std::size_t n_paths,
                                                 std::uint64_t seed, const PiHSource& source = {},
                                                 InnovationOptions options = {},
                                                 std::size_t workers = default_workers()) {
  return simulate_innovation_ensemble(ScalarDynamics::from(model), grid, obs, n_paths, seed, source, options,
                                      workers);
}

// Innovation-weighted ensemble driven by given innovation increments.
inline PathEnsemble simulate_innovation_ensemble(const ScalarDynamics& dyn, const TimeGrid& grid,
                                                 const std::vector<double>& innovation_increments,
                                                 std::size_t n_paths, std::uint64_t seed, const PiHSource& source,
                                                 InnovationOptions options = {},
                                                 std::size_t workers = default_workers()) {
  require(innovation_increments.size() == grid.n_steps(), ErrorCode::GridMismatch,
          "innovation increments do not match grid");
  PathEnsemble ens;
  ens.grid = grid;
  ens.n_paths = n_paths;
  ens.seed = seed;
  ens.states = simulate_signal_paths(dyn, grid, n_paths, seed, workers);
  detail::evolve_innovation_weights(ens, dyn, source, nullptr, &innovation_increments, options);
  return ens;
}

// Fresh Brownian increments, e.g. to drive weights under their own law.
inline std::vector<double> brownian_increments(const TimeGrid& grid, std::uint64_t seed, std::uint64_t index = 0) {
  const CounterRng rng(seed);
  const double sqdt = std::sqrt(grid.dt());
  std::vector<double> inc(grid.n_steps());
  for (std::size_t k = 0; k < inc.size(); ++k) inc[k] = sqdt * rng.normal(Stream::Brownian, index, k);
  return inc;
}

}  // namespace fbsde
