#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"

using namespace fbsde;
using namespace fbsde::testing;

namespace {

ScalarModelSpec lg_scalar() { return to_scalar(lg_benchmark()); }

double quadratic_variation(const std::vector<double>& path) {
  double qv = 0.0;
  for (std::size_t k = 0; k + 1 < path.size(); ++k) qv += (path[k + 1] - path[k]) * (path[k + 1] - path[k]);
  return qv;
}

}  // namespace

TEST(Truth, ZeroObservationGivesBrownianZ) {
  const ScalarModelSpec m = scalar_model(linear(0.0), 1.0, linear(0.0), linear(1.0));
  const TimeGrid grid(1.0, 50);
  std::vector<double> zT;
  for (std::uint64_t s = 0; s < 10000; ++s) zT.push_back(simulate_truth_and_obs(m, grid, s).Z.back());
  const Stats st = stats(zT);
  EXPECT_LT(std::abs(st.var - 1.0), 3.0 * variance_se(1.0, zT.size()));
  EXPECT_LT(std::abs(st.mean), 3.0 * st.se);
}

TEST(Truth, OuVarianceMatchesMomentOde) {
  const double v0 = 2.0, T = 1.0;
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, linear(1.0), linear(1.0), GaussianMixture(0.0, v0));
  const TimeGrid grid(T, 1000);
  std::vector<double> xT;
  for (std::uint64_t s = 0; s < 10000; ++s) xT.push_back(simulate_truth_and_obs(m, grid, s).truth->back());
  const double expected = 0.5 * (1.0 - std::exp(-2.0 * T)) + std::exp(-2.0 * T) * v0;
  EXPECT_LT(std::abs(stats(xT).var - expected), 3.0 * variance_se(expected, xT.size()));
}

TEST(Truth, SameSeedIsBitIdentical) {
  const TimeGrid grid(1.0, 200);
  const ObservationRecord a = simulate_truth_and_obs(lg_scalar(), grid, 99);
  const ObservationRecord b = simulate_truth_and_obs(lg_scalar(), grid, 99);
  EXPECT_EQ(a.Z, b.Z);
  EXPECT_EQ(a.dZ, b.dZ);
  EXPECT_EQ(*a.truth, *b.truth);
  EXPECT_EQ(*a.noise, *b.noise);
  const ObservationRecord c = simulate_truth_and_obs(lg_scalar(), grid, 100);
  EXPECT_NE(a.Z, c.Z);
}

TEST(Truth, DivergenceIsReported) {
  const ScalarModelSpec m = scalar_model(NamedFunction("cubic", {{"a", 50.0}}), 1.0, linear(1.0), linear(1.0),
                                         GaussianMixture(3.0, 0.0));
  try {
    (void)simulate_truth_and_obs(m, TimeGrid(1.0, 100), 1);
    FAIL() << "expected SimulationDiverged";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SimulationDiverged);
  }
}

TEST(Truth, IncrementsAreConsistent) {
  const ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), TimeGrid(1.0, 100), 3);
  ASSERT_EQ(obs.Z.size(), 101u);
  EXPECT_EQ(obs.Z[0], 0.0);
  for (std::size_t k = 0; k < 100; ++k) EXPECT_EQ(obs.Z[k + 1], obs.Z[k] + obs.dZ[k]);
  const ObservationRecord r = ObservationRecord::from_increments(obs.grid, obs.dZ);
  EXPECT_EQ(r.Z, obs.Z);
}

TEST(Girsanov, ZeroObservationGivesUnitWeights) {
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, linear(0.0), linear(1.0));
  const TimeGrid grid(1.0, 100);
  const ObservationRecord obs = simulate_truth_and_obs(m, grid, 1);
  const PathEnsemble ens = simulate_girsanov_ensemble(m, grid, obs, 200, 2);
  for (double lw : *ens.log_weights_Dtilde) ASSERT_EQ(lw, 0.0);
}

TEST(Girsanov, ConstantObservationGivesClosedForm) {
  const double c = 0.7;
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, constant(c), linear(1.0));
  const TimeGrid grid(1.0, 500);
  const ObservationRecord obs = simulate_truth_and_obs(m, grid, 4);
  const PathEnsemble ens = simulate_girsanov_ensemble(m, grid, obs, 300, 5);
  const double expected = c * obs.Z.back() - 0.5 * c * c * 1.0;
  for (double lw : ens.log_weights_at(grid.n_steps())) ASSERT_NEAR(lw, expected, 1e-12);
}

TEST(Girsanov, MartingaleUnderReferenceMeasure) {
  const TimeGrid grid(1.0, 50);
  const PathEnsemble ens = simulate_girsanov_reference(ScalarDynamics::from(lg_scalar()), grid, 100000, 11);
  std::vector<double> d;
  for (double lw : ens.log_weights_at(grid.n_steps())) d.push_back(std::exp(lw));
  const Stats st = stats(d);
  EXPECT_LT(std::abs(st.mean - 1.0), 3.0 * st.se);
}

TEST(Girsanov, DeterministicAcrossWorkerCounts) {
  const TimeGrid grid(1.0, 40);
  const ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), grid, 6);
  const PathEnsemble a = simulate_girsanov_ensemble(lg_scalar(), grid, obs, 5000, 7, 1);
  const PathEnsemble b = simulate_girsanov_ensemble(lg_scalar(), grid, obs, 5000, 7, 4);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(*a.log_weights_Dtilde, *b.log_weights_Dtilde);
}

TEST(Innovation, ZeroObservationGivesUnitWeights) {
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, linear(0.0), linear(1.0));
  const TimeGrid grid(1.0, 100);
  const ObservationRecord obs = simulate_truth_and_obs(m, grid, 1);
  const PathEnsemble ens = simulate_innovation_ensemble(m, grid, obs, 200, 2);
  for (double lw : *ens.log_weights_D) ASSERT_EQ(lw, 0.0);
}

TEST(Innovation, SharesSignalPathsWithGirsanov) {
  const TimeGrid grid(1.0, 40);
  const ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), grid, 6);
  const PathEnsemble a = simulate_girsanov_ensemble(lg_scalar(), grid, obs, 300, 7);
  const PathEnsemble b = simulate_innovation_ensemble(lg_scalar(), grid, obs, 300, 7);
  EXPECT_EQ(a.states, b.states);
}

TEST(Innovation, WeightedMeanTracksKalman) {
  const LinearGaussianModelSpec lg = lg_benchmark();
  const TimeGrid grid(1.0, 1000);
  const ObservationRecord obs = simulate_truth_and_obs(to_scalar(lg), grid, 21);
  const PathEnsemble ens = simulate_innovation_ensemble(to_scalar(lg), grid, obs, 5000, 22);
  const ConditionalEstimate est = pi_estimate(ens, [](double x) { return x; });
  const double mT = kalman_bucy(lg, obs).m.back()(0);
  EXPECT_LT(std::abs(est.final_value() - mT), 3.0 * est.final_std_err());
}

TEST(Innovation, UnitFunctionHasUnitMean) {
  const TimeGrid grid(1.0, 500);
  const ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), grid, 31);
  const PathEnsemble ens = simulate_innovation_ensemble(lg_scalar(), grid, obs, 5000, 32);
  const ConditionalEstimate est = pi_estimate(ens, [](double) { return 1.0; }, Normalization::External);
  EXPECT_LT(std::abs(est.final_value() - 1.0), 3.0 * est.final_std_err());
}

TEST(Innovation, CollapseIsSignalledNotThrown) {
  const ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, linear(5.0), linear(1.0));
  const TimeGrid grid(1.0, 200);
  const ObservationRecord obs = simulate_truth_and_obs(m, grid, 8);
  InnovationOptions opts;
  opts.ess_floor = 0.5;
  const PathEnsemble ens = simulate_innovation_ensemble(m, grid, obs, 500, 9, {}, opts);
  ASSERT_TRUE(ens.weight_collapse_step.has_value());
  EXPECT_LT(ens.ess[*ens.weight_collapse_step], 250.0);
}

TEST(InnovationProcess, ZeroPredictionReturnsZ) {
  const ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), TimeGrid(1.0, 100), 3);
  const std::vector<double> zero(100, 0.0);
  EXPECT_EQ(compute_innovation(obs, zero), obs.Z);
  EXPECT_THROW((void)compute_innovation(obs, std::vector<double>(50, 0.0)), Error);
}

TEST(InnovationProcess, PerfectFilterOnConstantState) {
  const ScalarModelSpec m = scalar_model(linear(0.0), 1.0, linear(1.0), linear(1.0), GaussianMixture(1.0, 0.0));
  const TimeGrid grid(1.0, 100);
  const ObservationRecord obs = simulate_truth_and_obs(m, grid, 1, SimulationOptions{false, false});
  const std::vector<double> I = compute_innovation(obs, std::vector<double>(100, 1.0));
  for (std::size_t k = 0; k <= 100; ++k) EXPECT_NEAR(I[k], obs.Z[k] - grid.time(k), 1e-12);
}

TEST(InnovationProcess, QuadraticVariationIsT) {
  const LinearGaussianModelSpec lg = lg_benchmark();
  const ObservationRecord obs = simulate_truth_and_obs(to_scalar(lg), TimeGrid(1.0, 1000), 5);
  const GaussianState st = kalman_bucy(lg, obs);
  const std::vector<double> I = compute_innovation(obs, [&] {
    std::vector<double> p;
    for (std::size_t k = 0; k < 1000; ++k) p.push_back(st.m[k](0));
    return p;
  }());
  EXPECT_NEAR(quadratic_variation(I), 1.0, 0.05);
}

TEST(ObservationError, NoiselessIsZero) {
  const ObservationRecord obs =
      simulate_truth_and_obs(lg_scalar(), TimeGrid(1.0, 100), 1, SimulationOptions{true, false});
  for (double w : compute_observation_error(obs, [](double x) { return x; })) EXPECT_EQ(w, 0.0);
}

TEST(ObservationError, RecoversStoredNoise) {
  const ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), TimeGrid(1.0, 1000), 2);
  const std::vector<double> W = compute_observation_error(obs, [](double x) { return x; });
  // (h dt + dw) - h dt rounds to dw up to a few ulps of h dt.
  for (std::size_t k = 0; k < W.size(); ++k) EXPECT_NEAR(W[k], (*obs.noise)[k], 1e-14 * (1.0 + k));
  EXPECT_NEAR(quadratic_variation(W), 1.0, 0.05);
}

TEST(ObservationError, NeedsTruth) {
  ObservationRecord obs = simulate_truth_and_obs(lg_scalar(), TimeGrid(1.0, 10), 2);
  obs.truth.reset();
  try {
    (void)compute_observation_error(obs, [](double x) { return x; });
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingTruthPath);
  }
}
