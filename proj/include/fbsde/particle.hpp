#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/sde_sim.hpp"

namespace fbsde {

struct ConditionalEstimate {
  TimeGrid time;
  std::vector<double> values;
  std::vector<double> std_err;
  std::vector<double> ess;
  std::optional<std::size_t> weight_collapse_step;

  [[nodiscard]] double final_value() const { return values.back(); }
  [[nodiscard]] double final_std_err() const { return std_err.back(); }
};

// Normalized weights exp(lw - max) for one time slice; returns their sum.
inline double relative_weights(std::span<const double> log_w, std::vector<double>& w) {
  w.resize(log_w.size());
  const double lmax = *std::max_element(log_w.begin(), log_w.end());
  for (std::size_t i = 0; i < log_w.size(); ++i) w[i] = std::exp(log_w[i] - lmax);
  return pairwise_sum(0, w.size(), [&](std::size_t i) { return w[i]; });
}

inline double effective_sample_size(std::span<const double> log_w) {
  std::vector<double> w;
  const double s1 = relative_weights(log_w, w);
  const double s2 = pairwise_sum(0, w.size(), [&](std::size_t i) { return w[i] * w[i]; });
  return s1 * s1 / s2;
}

// sigma_t[g] = (1/N) sum_i D~_i g(X_i) with its sample standard error.
inline ConditionalEstimate sigma_estimate(const PathEnsemble& ens, const std::function<double(double)>& g) {
  require(ens.log_weights_Dtilde.has_value(), ErrorCode::InvalidArgument, "sigma estimate needs Girsanov weights");
  const std::size_t N = ens.n_paths;
  ConditionalEstimate est;
  est.time = ens.grid;
  std::vector<double> term(N);
  for (std::size_t k = 0; k < ens.grid.size(); ++k) {
    const auto xs = ens.states_at(k);
    const auto lw = ens.log_weights_at(k);
    for (std::size_t i = 0; i < N; ++i) term[i] = std::exp(lw[i]) * g(xs[i]);
    const double mean = pairwise_sum(0, N, [&](std::size_t i) { return term[i]; }) / static_cast<double>(N);
    const double ss = pairwise_sum(0, N, [&](std::size_t i) { return (term[i] - mean) * (term[i] - mean); });
    est.values.push_back(mean);
    est.std_err.push_back(N > 1 ? std::sqrt(ss / static_cast<double>(N - 1) / static_cast<double>(N)) : 0.0);
    est.ess.push_back(effective_sample_size(lw));
  }
  return est;
}

enum class Normalization { Self, External };

// Self: ratio estimator sum w g / sum w (delta-method standard error).
// External: (1/N) sum w g / c_k with a supplied normalizer path c (default 1, the innovation case).
inline ConditionalEstimate pi_estimate(const PathEnsemble& ens, const std::function<double(double)>& g,
                                       Normalization normalization = Normalization::Self,
                                       std::span<const double> normalizer = {}, double ess_floor = 0.0) {
  const std::size_t N = ens.n_paths;
  require(normalizer.empty() || normalizer.size() == ens.grid.size(), ErrorCode::GridMismatch,
          "normalizer path does not match grid");
  ConditionalEstimate est;
  est.time = ens.grid;
  std::vector<double> w, gv(N);
  for (std::size_t k = 0; k < ens.grid.size(); ++k) {
    const auto xs = ens.states_at(k);
    const auto lw = ens.log_weights_at(k);
    for (std::size_t i = 0; i < N; ++i) gv[i] = g(xs[i]);
    double value = 0.0, se = 0.0;
    if (normalization == Normalization::Self) {
      const double sw = relative_weights(lw, w);
      value = pairwise_sum(0, N, [&](std::size_t i) { return w[i] * gv[i]; }) / sw;
      const double v = pairwise_sum(0, N, [&](std::size_t i) {
        const double d = w[i] * (gv[i] - value);
        return d * d;
      });
      se = std::sqrt(v) / sw;
    } else {
      const double c = normalizer.empty() ? 1.0 : normalizer[k];
      for (std::size_t i = 0; i < N; ++i) gv[i] *= std::exp(lw[i]) / c;
      value = pairwise_sum(0, N, [&](std::size_t i) { return gv[i]; }) / static_cast<double>(N);
      const double ss = pairwise_sum(0, N, [&](std::size_t i) { return (gv[i] - value) * (gv[i] - value); });
      se = N > 1 ? std::sqrt(ss / static_cast<double>(N - 1) / static_cast<double>(N)) : 0.0;
    }
    const double ess = effective_sample_size(lw);
    est.values.push_back(value);
    est.std_err.push_back(se);
    est.ess.push_back(ess);
    if (!est.weight_collapse_step && ess < ess_floor * static_cast<double>(N)) est.weight_collapse_step = k;
  }
  return est;
}

// Multinomial draw of N ancestors from relative weights (inverse CDF on sorted-free uniforms).
inline std::vector<std::size_t> multinomial_ancestors(std::span<const double> log_w, const CounterRng& rng,
                                                      std::uint64_t step) {
  const std::size_t N = log_w.size();
  std::vector<double> w;
  relative_weights(log_w, w);
  std::vector<double> cdf(N);
  double acc = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    acc += w[i];
    cdf[i] = acc;
  }
  std::vector<std::size_t> parent(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double u = rng.uniforms(Stream::Resample, i, step).first * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    parent[i] = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), N - 1);
  }
  return parent;
}

// Resamples whole trajectories according to the final-time weights when the ESS is below
// ess_floor * N; weights are reset to 1. Estimator-mode ensembles must stay unresampled.
inline PathEnsemble resample_multinomial(const PathEnsemble& ens, double ess_floor, std::uint64_t seed) {
  require(ens.use == EnsembleUse::Filter, ErrorCode::ResamplingForbiddenInEstimatorMode,
          "estimator ensembles carry the raw weights and may not be resampled");
  const std::size_t n = ens.grid.n_steps();
  const std::size_t N = ens.n_paths;
  const auto lw = ens.log_weights_at(n);
  if (effective_sample_size(lw) >= ess_floor * static_cast<double>(N)) return ens;
  const auto parent = multinomial_ancestors(lw, CounterRng(seed), n);
  PathEnsemble out = ens;
  for (std::size_t k = 0; k <= n; ++k)
    for (std::size_t i = 0; i < N; ++i) out.states[k * N + i] = ens.states[k * N + parent[i]];
  if (out.log_weights_D) std::fill(out.log_weights_D->begin(), out.log_weights_D->end(), 0.0);
  if (out.log_weights_Dtilde) std::fill(out.log_weights_Dtilde->begin(), out.log_weights_Dtilde->end(), 0.0);
  out.resample_steps.push_back(n);
  return out;
}

struct FilterResult {
  ConditionalEstimate estimate;  // pi_t[g]
  std::vector<double> pi_h;      // pi_t[h] used along the way
  std::vector<std::size_t> resample_steps;
};

// Bootstrap particle filter: Girsanov reweighting per step, multinomial resampling whenever
// the ESS falls below ess_floor * N.
inline FilterResult particle_filter(const ScalarDynamics& dyn, const ObservationRecord& obs, std::size_t N,
                                    std::uint64_t seed, const std::function<double(double)>& g,
                                    double ess_floor = 0.5) {
  require(N > 0, ErrorCode::InvalidArgument, "filter needs particles");
  const TimeGrid& grid = obs.grid;
  const CounterRng rng(seed);
  const std::size_t n = grid.n_steps();
  const double dt = grid.dt();
  const double noise = dyn.sigma * std::sqrt(dt);
  std::vector<double> x(N), lw(N, 0.0), w, hv(N), tmp(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double u = rng.uniforms(Stream::Prior, i, 0).first;
    const double z = rng.normals(Stream::Prior, i, 1).first;
    x[i] = dyn.prior.sample(u, z);
  }
  FilterResult res;
  res.estimate.time = grid;
  auto record = [&](std::size_t k) {
    const double sw = relative_weights(lw, w);
    const double value = pairwise_sum(0, N, [&](std::size_t i) { return w[i] * g(x[i]); }) / sw;
    const double v = pairwise_sum(0, N, [&](std::size_t i) {
      const double d = w[i] * (g(x[i]) - value);
      return d * d;
    });
    res.estimate.values.push_back(value);
    res.estimate.std_err.push_back(std::sqrt(v) / sw);
    const double s2 = pairwise_sum(0, N, [&](std::size_t i) { return w[i] * w[i]; });
    res.estimate.ess.push_back(sw * sw / s2);
    (void)k;
  };
  record(0);
  for (std::size_t k = 0; k < n; ++k) {
    const double sw = relative_weights(lw, w);
    for (std::size_t i = 0; i < N; ++i) hv[i] = dyn.obs(x[i]);
    res.pi_h.push_back(pairwise_sum(0, N, [&](std::size_t i) { return w[i] * hv[i]; }) / sw);
    for (std::size_t i = 0; i < N; ++i) {
      lw[i] += hv[i] * obs.dZ[k] - 0.5 * hv[i] * hv[i] * dt;
      x[i] += dyn.drift(k, x[i]) * dt + noise * rng.normal(Stream::Signal, i, k);
    }
    require(std::all_of(x.begin(), x.end(), [](double v) { return std::abs(v) <= kDivergenceBound; }),
            ErrorCode::SimulationDiverged, "filter particle left |x| <= 1e8");
    if (effective_sample_size(lw) < ess_floor * static_cast<double>(N)) {
      const auto parent = multinomial_ancestors(lw, rng, k);
      for (std::size_t i = 0; i < N; ++i) tmp[i] = x[parent[i]];
      x.swap(tmp);
      std::fill(lw.begin(), lw.end(), 0.0);
      res.resample_steps.push_back(k + 1);
    }
    record(k + 1);
  }
  return res;
}

inline void write_csv(std::ostream& os, const ConditionalEstimate& est) {
  os << "t,value,std_err,ess\n";
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < est.values.size(); ++k)
    os << est.time.time(k) << ',' << est.values[k] << ',' << est.std_err[k] << ',' << est.ess[k] << '\n';
  os.precision(old);
}

}  // namespace fbsde
