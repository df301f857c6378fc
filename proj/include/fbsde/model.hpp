#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fbsde/errors.hpp"

namespace fbsde {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Uniform grid on [0, T] with n_steps + 1 nodes.
class TimeGrid {
 public:
  TimeGrid() = default;
  TimeGrid(double t_end, std::size_t n_steps) : t_end_(t_end), n_steps_(n_steps) {
    require(t_end > 0.0 && std::isfinite(t_end), ErrorCode::InvalidArgument, "time horizon must be positive");
    require(n_steps > 0, ErrorCode::InvalidArgument, "n_steps must be positive");
  }

  [[nodiscard]] double t_end() const noexcept { return t_end_; }
  [[nodiscard]] std::size_t n_steps() const noexcept { return n_steps_; }
  [[nodiscard]] std::size_t size() const noexcept { return n_steps_ + 1; }
  [[nodiscard]] double dt() const noexcept { return t_end_ / static_cast<double>(n_steps_); }
  [[nodiscard]] double time(std::size_t k) const noexcept {
    return k == n_steps_ ? t_end_ : static_cast<double>(k) * dt();
  }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

 private:
  double t_end_ = 1.0;
  std::size_t n_steps_ = 1;
};

class SpaceGrid {
 public:
  SpaceGrid() = default;
  SpaceGrid(double x_min, double x_max, std::size_t n_points)
      : x_min_(x_min), x_max_(x_max), n_points_(n_points) {
    require(x_min < x_max, ErrorCode::InvalidArgument, "space grid needs x_min < x_max");
    require(n_points >= 3, ErrorCode::InvalidArgument, "space grid needs at least 3 points");
  }

  [[nodiscard]] double x_min() const noexcept { return x_min_; }
  [[nodiscard]] double x_max() const noexcept { return x_max_; }
  [[nodiscard]] std::size_t size() const noexcept { return n_points_; }
  [[nodiscard]] double dx() const noexcept { return (x_max_ - x_min_) / static_cast<double>(n_points_ - 1); }
  [[nodiscard]] double x(std::size_t j) const noexcept {
    return j + 1 == n_points_ ? x_max_ : x_min_ + static_cast<double>(j) * dx();
  }

  friend bool operator==(const SpaceGrid&, const SpaceGrid&) = default;

 private:
  double x_min_ = -1.0;
  double x_max_ = 1.0;
  std::size_t n_points_ = 3;
};

// ---------------------------------------------------------------------------
// Named-function registry
// ---------------------------------------------------------------------------

enum class FunctionKind { Linear, Cubic, DoubleWell, Sine, Constant, IndicatorPositive, GaussianBump, Quadratic };

struct FunctionInfo {
  FunctionKind kind;
  std::string_view name;
  // Parameter names with their defaults; NaN marks a parameter without default.
  std::vector<std::pair<std::string_view, double>> params;
};

inline const std::vector<FunctionInfo>& function_registry() {
  static const std::vector<FunctionInfo> registry = {
      {FunctionKind::Linear, "linear", {{"a", 1.0}, {"c", 0.0}}},
      {FunctionKind::Cubic, "cubic", {{"a", 1.0}}},
      {FunctionKind::DoubleWell, "double_well", {{"a", 1.0}}},
      {FunctionKind::Sine, "sine", {{"a", 1.0}, {"k", 1.0}, {"phase", 0.0}}},
      {FunctionKind::Constant, "constant", {{"c", std::numeric_limits<double>::quiet_NaN()}}},
      {FunctionKind::IndicatorPositive, "indicator_positive", {}},
      {FunctionKind::GaussianBump, "gaussian_bump", {{"a", 1.0}, {"center", 0.0}, {"width", 1.0}}},
      {FunctionKind::Quadratic, "quadratic", {{"q", 1.0}, {"center", 0.0}}},
  };
  return registry;
}

inline const FunctionInfo& lookup_function(std::string_view name) {
  for (const auto& info : function_registry()) {
    if (info.name == name) return info;
  }
  fail(ErrorCode::UnknownFunctionName, "unknown function '" + std::string(name) + "'");
}

// A registry function bound to its parameters. Parameters are resolved once at construction.
class NamedFunction {
 public:
  NamedFunction() : NamedFunction("constant", {{"c", 0.0}}) {}

  NamedFunction(std::string name, std::map<std::string, double> params = {})
      : name_(std::move(name)), params_(std::move(params)) {
    const FunctionInfo& info = lookup_function(name_);
    kind_ = info.kind;
    for (const auto& [key, value] : params_) {
      const bool known = std::any_of(info.params.begin(), info.params.end(),
                                     [&](const auto& p) { return p.first == key; });
      require(known, ErrorCode::InvalidArgument, "function '" + name_ + "' has no parameter '" + key + "'");
      require(std::isfinite(value), ErrorCode::InvalidArgument, "parameter '" + key + "' must be finite");
    }
    for (std::size_t i = 0; i < info.params.size() && i < coeff_.size(); ++i) {
      const auto& [key, fallback] = info.params[i];
      auto it = params_.find(std::string(key));
      const double value = it != params_.end() ? it->second : fallback;
      require(!std::isnan(value), ErrorCode::InvalidArgument,
              "function '" + name_ + "' requires parameter '" + std::string(key) + "'");
      coeff_[i] = value;
    }
  }

  [[nodiscard]] double operator()(double x) const noexcept {
    const double p0 = coeff_[0], p1 = coeff_[1], p2 = coeff_[2];
    switch (kind_) {
      case FunctionKind::Linear: return p0 * x + p1;
      case FunctionKind::Cubic: return p0 * x * x * x;
      case FunctionKind::DoubleWell: return p0 * (x - x * x * x);
      case FunctionKind::Sine: return p0 * std::sin(p1 * x + p2);
      case FunctionKind::Constant: return p0;
      case FunctionKind::IndicatorPositive: return x > 0.0 ? 1.0 : 0.0;
      case FunctionKind::GaussianBump: {
        const double z = (x - p1) / p2;
        return p0 * std::exp(-0.5 * z * z);
      }
      case FunctionKind::Quadratic: {
        const double d = x - p1;
        return 0.5 * p0 * d * d;
      }
    }
    return 0.0;
  }

  [[nodiscard]] const std::string& name() const noexcept { return name_; }
  [[nodiscard]] const std::map<std::string, double>& params() const noexcept { return params_; }
  [[nodiscard]] FunctionKind kind() const noexcept { return kind_; }
  [[nodiscard]] double param(std::size_t i) const noexcept { return coeff_[i]; }

  [[nodiscard]] bool is_zero() const noexcept {
    return (kind_ == FunctionKind::Constant && coeff_[0] == 0.0) ||
           (kind_ == FunctionKind::Linear && coeff_[0] == 0.0 && coeff_[1] == 0.0);
  }
  [[nodiscard]] bool is_pure_linear() const noexcept { return kind_ == FunctionKind::Linear && coeff_[1] == 0.0; }

  friend bool operator==(const NamedFunction& a, const NamedFunction& b) {
    return a.name_ == b.name_ && a.params_ == b.params_;
  }

 private:
  std::string name_;
  std::map<std::string, double> params_;
  FunctionKind kind_ = FunctionKind::Constant;
  std::array<double, 3> coeff_{0.0, 0.0, 0.0};
};

inline double registry_eval(const std::string& name, const std::map<std::string, double>& params, double x) {
  return NamedFunction(name, params)(x);
}

// ---------------------------------------------------------------------------
// Priors and quadrature
// ---------------------------------------------------------------------------

// Nodes and weights for E[g(Z)], Z ~ N(0, 1) (probabilists' Gauss-Hermite via Golub-Welsch).
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussHermiteRule make_gauss_hermite(std::size_t n) {
  Matrix jacobi = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t k = 1; k < n; ++k) {
    const double off = std::sqrt(static_cast<double>(k));
    jacobi(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(k)) = off;
    jacobi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = off;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> solver(jacobi);
  GaussHermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    rule.nodes[i] = solver.eigenvalues()(col);
    const double v0 = solver.eigenvectors()(0, col);
    rule.weights[i] = v0 * v0;
  }
  return rule;
}

inline const GaussHermiteRule& gauss_hermite_64() {
  static const GaussHermiteRule rule = make_gauss_hermite(64);
  return rule;
}

struct GaussianComponent {
  double weight = 1.0;
  double mean = 0.0;
  double variance = 1.0;
  friend bool operator==(const GaussianComponent&, const GaussianComponent&) = default;
};

// Finite Gaussian mixture; a single component is the plain Gaussian prior.
class GaussianMixture {
 public:
  GaussianMixture() : GaussianMixture(0.0, 1.0) {}
  GaussianMixture(double mean, double variance) : GaussianMixture(std::vector<GaussianComponent>{{1.0, mean, variance}}) {}
  explicit GaussianMixture(std::vector<GaussianComponent> components) : components_(std::move(components)) {
    require(!components_.empty(), ErrorCode::InvalidArgument, "prior needs at least one component");
    double total = 0.0;
    for (const auto& c : components_) {
      require(c.weight > 0.0 && std::isfinite(c.weight), ErrorCode::InvalidArgument, "mixture weights must be positive");
      require(c.variance >= 0.0 && std::isfinite(c.variance) && std::isfinite(c.mean), ErrorCode::InvalidArgument,
              "prior variance must be non-negative");
      total += c.weight;
    }
    // Already-normalized weights are kept bit-for-bit so that serialized priors round-trip.
    if (std::abs(total - 1.0) > 1e-12) {
      for (auto& c : components_) c.weight /= total;
    }
  }

  [[nodiscard]] const std::vector<GaussianComponent>& components() const noexcept { return components_; }
  [[nodiscard]] bool is_single_gaussian() const noexcept { return components_.size() == 1; }

  [[nodiscard]] double mean() const noexcept {
    double m = 0.0;
    for (const auto& c : components_) m += c.weight * c.mean;
    return m;
  }
  [[nodiscard]] double variance() const noexcept {
    const double m = mean();
    double v = 0.0;
    for (const auto& c : components_) v += c.weight * (c.variance + (c.mean - m) * (c.mean - m));
    return v;
  }

  // mu[g] by 64-point Gauss-Hermite quadrature per component.
  template <typename F>
  [[nodiscard]] double expectation(F&& g) const {
    const auto& rule = gauss_hermite_64();
    double total = 0.0;
    for (const auto& c : components_) {
      const double sd = std::sqrt(c.variance);
      double acc = 0.0;
      for (std::size_t i = 0; i < rule.nodes.size(); ++i) acc += rule.weights[i] * g(c.mean + sd * rule.nodes[i]);
      total += c.weight * acc;
    }
    return total;
  }

  // Probability mass outside [lo, hi].
  [[nodiscard]] double mass_outside(double lo, double hi) const {
    double mass = 0.0;
    for (const auto& c : components_) {
      if (c.variance == 0.0) {
        mass += (c.mean < lo || c.mean > hi) ? c.weight : 0.0;
        continue;
      }
      const double sd = std::sqrt(c.variance);
      const double below = 0.5 * std::erfc((c.mean - lo) / (sd * std::numbers::sqrt2));
      const double above = 0.5 * std::erfc((hi - c.mean) / (sd * std::numbers::sqrt2));
      mass += c.weight * (below + above);
    }
    return mass;
  }

  // Draw from the mixture given a uniform for component selection and a standard normal.
  [[nodiscard]] double sample(double uniform, double normal) const noexcept {
    double acc = 0.0;
    const GaussianComponent* chosen = &components_.back();
    for (const auto& c : components_) {
      acc += c.weight;
      if (uniform < acc) {
        chosen = &c;
        break;
      }
    }
    return chosen->mean + std::sqrt(chosen->variance) * normal;
  }

  friend bool operator==(const GaussianMixture&, const GaussianMixture&) = default;

 private:
  std::vector<GaussianComponent> components_;
};

// ---------------------------------------------------------------------------
// Model specifications
// ---------------------------------------------------------------------------

struct ScalarModelSpec {
  NamedFunction drift;
  double sigma = 1.0;
  NamedFunction obs;
  NamedFunction terminal;
  GaussianMixture prior;
  // Additive control gain in b(x, alpha) = drift(x) + control_gain * alpha.
  double control_gain = 0.0;

  void validate() const {
    require(sigma > 0.0 && std::isfinite(sigma), ErrorCode::NonPositiveSigma, "sigma must be positive");
    require(std::isfinite(control_gain), ErrorCode::InvalidArgument, "control gain must be finite");
  }

  friend bool operator==(const ScalarModelSpec&, const ScalarModelSpec&) = default;
};

// b(x) = A^T x, h(x) = H^T x, f(x) = f_bar^T x, control drift G alpha.
struct LinearGaussianModelSpec {
  Matrix A;
  Matrix H;
  Matrix G;
  double sigma = 1.0;
  Vector m0;
  Matrix Sigma0;
  Vector f_bar;

  [[nodiscard]] Eigen::Index state_dim() const noexcept { return A.rows(); }
  [[nodiscard]] Eigen::Index obs_dim() const noexcept { return H.cols(); }
  [[nodiscard]] Eigen::Index control_dim() const noexcept { return G.cols(); }

  [[nodiscard]] Vector drift(const Vector& x) const { return A.transpose() * x; }
  [[nodiscard]] Vector obs(const Vector& x) const { return H.transpose() * x; }
  [[nodiscard]] double terminal(const Vector& x) const { return f_bar.dot(x); }

  void validate() const {
    const Eigen::Index n = A.rows();
    require(n > 0 && A.cols() == n, ErrorCode::DimensionMismatch, "A must be square and non-empty");
    require(H.rows() == n && H.cols() > 0, ErrorCode::DimensionMismatch, "H must be n x m");
    require(G.rows() == n || G.size() == 0, ErrorCode::DimensionMismatch, "G must be n x p");
    require(m0.size() == n, ErrorCode::DimensionMismatch, "m0 must have n entries");
    require(f_bar.size() == n, ErrorCode::DimensionMismatch, "f_bar must have n entries");
    require(Sigma0.rows() == n && Sigma0.cols() == n, ErrorCode::DimensionMismatch, "Sigma0 must be n x n");
    require(sigma > 0.0 && std::isfinite(sigma), ErrorCode::NonPositiveSigma, "sigma must be positive");
    require((Sigma0 - Sigma0.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + Sigma0.cwiseAbs().maxCoeff()),
            ErrorCode::InvalidArgument, "Sigma0 must be symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(Sigma0);
    require(eig.eigenvalues().minCoeff() >= -1e-12, ErrorCode::InvalidArgument, "Sigma0 must be positive semidefinite");
  }

  [[nodiscard]] Matrix control_matrix() const { return G.size() == 0 ? Matrix::Zero(A.rows(), 1) : G; }

  friend bool operator==(const LinearGaussianModelSpec& a, const LinearGaussianModelSpec& b) {
    auto same = [](const auto& x, const auto& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && (x.size() == 0 || x == y);
    };
    return same(a.A, b.A) && same(a.H, b.H) && same(a.G, b.G) && a.sigma == b.sigma && same(a.m0, b.m0) &&
           same(a.Sigma0, b.Sigma0) && same(a.f_bar, b.f_bar);
  }
};

using ModelSpec = std::variant<ScalarModelSpec, LinearGaussianModelSpec>;

inline ScalarModelSpec to_scalar(const LinearGaussianModelSpec& lg) {
  require(lg.state_dim() == 1 && lg.obs_dim() == 1, ErrorCode::DimensionMismatch,
          "scalar view needs a one-dimensional linear-Gaussian model");
  ScalarModelSpec s;
  s.drift = NamedFunction("linear", {{"a", lg.A(0, 0)}});
  s.sigma = lg.sigma;
  s.obs = NamedFunction("linear", {{"a", lg.H(0, 0)}});
  s.terminal = NamedFunction("linear", {{"a", lg.f_bar(0)}});
  s.prior = GaussianMixture(lg.m0(0), lg.Sigma0(0, 0));
  s.control_gain = lg.G.size() == 0 ? 0.0 : lg.G(0, 0);
  return s;
}

inline ScalarModelSpec as_scalar(const ModelSpec& spec) {
  if (const auto* s = std::get_if<ScalarModelSpec>(&spec)) return *s;
  return to_scalar(std::get<LinearGaussianModelSpec>(spec));
}

// Running cost c_t(x, alpha) = 1/2 |alpha|^2 plus a terminal cost.
struct CostSpec {
  double control_weight = 1.0;
  NamedFunction terminal;

  [[nodiscard]] double running(double alpha) const noexcept { return 0.5 * control_weight * alpha * alpha; }
};

// Rejects grids whose boundaries cut off non-negligible prior mass.
inline void validate_space_grid(const SpaceGrid& grid, const GaussianMixture& prior, double tolerance = 1e-6) {
  require(prior.mass_outside(grid.x_min(), grid.x_max()) < tolerance, ErrorCode::InvalidArgument,
          "space grid truncates more than 1e-6 of the prior mass");
}

}  // namespace fbsde
