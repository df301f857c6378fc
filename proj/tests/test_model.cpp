#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"

using namespace fbsde;
using namespace fbsde::testing;

TEST(Registry, DocumentedValues) {
  EXPECT_DOUBLE_EQ(registry_eval("double_well", {}, 2.0), -6.0);
  EXPECT_DOUBLE_EQ(registry_eval("constant", {{"c", 0.5}}, -3.1), 0.5);
  EXPECT_DOUBLE_EQ(registry_eval("indicator_positive", {}, -0.2), 0.0);
  EXPECT_DOUBLE_EQ(registry_eval("indicator_positive", {}, 0.2), 1.0);
  EXPECT_DOUBLE_EQ(registry_eval("linear", {{"a", -1.0}}, 3.0), -3.0);
  EXPECT_DOUBLE_EQ(registry_eval("cubic", {{"a", 2.0}}, 2.0), 16.0);
  EXPECT_NEAR(registry_eval("sine", {{"k", 2.0}}, 0.25), std::sin(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(registry_eval("gaussian_bump", {{"a", 2.0}, {"center", 1.0}, {"width", 0.5}}, 1.5),
                   2.0 * std::exp(-0.5));
  EXPECT_DOUBLE_EQ(registry_eval("quadratic", {{"q", 4.0}, {"center", 1.0}}, 3.0), 8.0);
}

TEST(Registry, Errors) {
  try {
    (void)NamedFunction("tanh");
    FAIL() << "expected UnknownFunctionName";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownFunctionName);
  }
  EXPECT_THROW((void)NamedFunction("constant"), Error);  // c has no default
  EXPECT_THROW((void)NamedFunction("linear", {{"b", 1.0}}), Error);
}

TEST(Registry, ZeroAndLinearFlags) {
  EXPECT_TRUE(NamedFunction().is_zero());
  EXPECT_TRUE(linear(0.0).is_zero());
  EXPECT_FALSE(constant(1.0).is_zero());
  EXPECT_TRUE(linear(2.0).is_pure_linear());
  EXPECT_FALSE(linear(2.0, 1.0).is_pure_linear());
}

TEST(Grids, EndpointsAreExact) {
  const TimeGrid t(0.7, 7);
  EXPECT_EQ(t.size(), 8u);
  EXPECT_EQ(t.time(7), 0.7);
  EXPECT_DOUBLE_EQ(t.dt(), 0.1);
  const SpaceGrid s(-1.3, 2.9, 43);
  EXPECT_EQ(s.x(0), -1.3);
  EXPECT_EQ(s.x(42), 2.9);
  EXPECT_THROW(TimeGrid(0.0, 10), Error);
  EXPECT_THROW(TimeGrid(1.0, 0), Error);
  EXPECT_THROW(SpaceGrid(1.0, 1.0, 10), Error);
}

TEST(Quadrature, GaussianMoments) {
  const GaussianMixture g(0.5, 2.0);
  EXPECT_NEAR(g.expectation([](double x) { return x; }), 0.5, 1e-13);
  EXPECT_NEAR(g.expectation([](double x) { return x * x; }), 2.25, 1e-12);
  // E[X^4] = m^4 + 6 m^2 v + 3 v^2
  EXPECT_NEAR(g.expectation([](double x) { return x * x * x * x; }), 0.0625 + 3.0 + 12.0, 1e-11);
  EXPECT_NEAR(g.expectation([](double x) { return std::exp(x); }), std::exp(0.5 + 1.0), 1e-12);
}

TEST(Quadrature, MixtureMoments) {
  const GaussianMixture mix({{0.25, -1.0, 0.5}, {0.75, 2.0, 1.5}});
  EXPECT_NEAR(mix.mean(), -0.25 + 1.5, 1e-15);
  const double second = 0.25 * (0.5 + 1.0) + 0.75 * (1.5 + 4.0);
  EXPECT_NEAR(mix.variance(), second - 1.25 * 1.25, 1e-14);
  EXPECT_NEAR(mix.expectation([](double x) { return x * x; }), second, 1e-12);
}

TEST(Quadrature, MixtureWeightsNormalized) {
  const GaussianMixture mix({{2.0, 0.0, 1.0}, {6.0, 1.0, 1.0}});
  EXPECT_DOUBLE_EQ(mix.components()[0].weight, 0.25);
  EXPECT_THROW(GaussianMixture({{-1.0, 0.0, 1.0}}), Error);
  EXPECT_THROW(GaussianMixture(0.0, -1.0), Error);
}

TEST(Prior, MassOutside) {
  const GaussianMixture g(0.0, 1.0);
  EXPECT_NEAR(g.mass_outside(-1.0, 1.0), std::erfc(1.0 / std::numbers::sqrt2), 1e-15);
  EXPECT_NO_THROW(validate_space_grid(SpaceGrid(-6.0, 6.0, 11), g));
  EXPECT_THROW(validate_space_grid(SpaceGrid(-2.0, 2.0, 11), g), Error);
}

TEST(Prior, SamplePicksComponentByUniform) {
  const GaussianMixture mix({{0.5, -3.0, 4.0}, {0.5, 3.0, 1.0}});
  EXPECT_DOUBLE_EQ(mix.sample(0.2, 1.0), -1.0);
  EXPECT_DOUBLE_EQ(mix.sample(0.7, 1.0), 4.0);
}

TEST(ModelSpec, ValidationErrors) {
  ScalarModelSpec m = scalar_model(linear(-1.0), 1.0, linear(1.0), linear(1.0));
  EXPECT_NO_THROW(m.validate());
  m.sigma = 0.0;
  try {
    m.validate();
    FAIL() << "expected NonPositiveSigma";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonPositiveSigma);
  }

  LinearGaussianModelSpec lg = lg_benchmark();
  EXPECT_NO_THROW(lg.validate());
  lg.H = Matrix::Constant(2, 1, 1.0);
  try {
    lg.validate();
    FAIL() << "expected DimensionMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}

TEST(ModelSpec, ScalarViewOfLg) {
  const ScalarModelSpec s = to_scalar(lg_benchmark());
  EXPECT_DOUBLE_EQ(s.drift(2.0), -2.0);
  EXPECT_DOUBLE_EQ(s.obs(2.0), 2.0);
  EXPECT_DOUBLE_EQ(s.terminal(3.0), 3.0);
  EXPECT_DOUBLE_EQ(s.control_gain, 1.0);
  EXPECT_EQ(s.prior, GaussianMixture(0.0, 1.0));
}
