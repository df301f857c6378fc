#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "fbsde/fbsde.hpp"

namespace fbsde::testing {

// dX = -X dt + dB, dZ = X dt + dW, X_0 ~ N(0, 1), f(x) = x.
inline LinearGaussianModelSpec lg_benchmark() {
  LinearGaussianModelSpec lg;
  lg.A = Matrix::Constant(1, 1, -1.0);
  lg.H = Matrix::Constant(1, 1, 1.0);
  lg.G = Matrix::Constant(1, 1, 1.0);
  lg.sigma = 1.0;
  lg.m0 = Vector::Zero(1);
  lg.Sigma0 = Matrix::Constant(1, 1, 1.0);
  lg.f_bar = Vector::Constant(1, 1.0);
  return lg;
}

inline ScalarModelSpec scalar_model(NamedFunction drift, double sigma, NamedFunction h, NamedFunction f,
                                    GaussianMixture prior = GaussianMixture(0.0, 1.0)) {
  ScalarModelSpec m;
  m.drift = std::move(drift);
  m.sigma = sigma;
  m.obs = std::move(h);
  m.terminal = std::move(f);
  m.prior = std::move(prior);
  return m;
}

inline NamedFunction linear(double a, double c = 0.0) { return NamedFunction("linear", {{"a", a}, {"c", c}}); }
inline NamedFunction constant(double c) { return NamedFunction("constant", {{"c", c}}); }

struct Stats {
  double mean = 0.0;
  double var = 0.0;  // unbiased sample variance
  double se = 0.0;   // standard error of the mean
};

inline Stats stats(const std::vector<double>& v) {
  Stats s;
  const double n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.var = ss / (n - 1.0);
  s.se = std::sqrt(s.var / n);
  return s;
}

// Sampling standard error of an unbiased sample variance for a normal population.
inline double variance_se(double var, std::size_t n) { return var * std::sqrt(2.0 / static_cast<double>(n - 1)); }

}  // namespace fbsde::testing
