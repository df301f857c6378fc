#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"
#include "fbsde/pde_backward.hpp"
#include "fbsde/sde_sim.hpp"

namespace fbsde {

inline constexpr double kRiccatiBlowup = 1e8;

// Filter covariance plus the per-step transition data of the mean equation
//   dm = F m dt + Sigma H dZ,  F = A^T - Sigma H H^T.
// Phi[k] maps m_k to m_{k+1}; Gamma[k] dZ_k is the data contribution over the step when dZ is
// spread uniformly across it; Lambda[k] integrates a constant input over the step.
struct RiccatiSolution {
  TimeGrid time;
  std::vector<Matrix> Sigma;      // n_steps + 1
  std::vector<Matrix> Sigma_mid;  // n_steps, covariance at t_k + dt/2
  std::vector<Matrix> Phi;        // n_steps
  std::vector<Matrix> Gamma;      // n_steps, n x m
  std::vector<Matrix> Lambda;     // n_steps
};

namespace detail {

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline Matrix clip_psd(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  if (eig.eigenvalues().minCoeff() >= 0.0) return m;
  require(eig.eigenvalues().minCoeff() >= -1e-10, ErrorCode::RiccatiBlowup, "covariance lost positive semidefiniteness");
  const Vector clipped = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
}

inline void check_blowup(const Matrix& m) {
  require(m.allFinite() && m.cwiseAbs().maxCoeff() <= kRiccatiBlowup, ErrorCode::RiccatiBlowup,
          "Riccati solution exceeded 1e8");
}

// Number of RK4 substeps keeping h * (stiffness rate) <= 0.25.
inline std::size_t stiff_substeps(double dt, double rate) {
  return std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(4.0 * dt * rate)));
}

}  // namespace detail

// dSigma/dt = A^T Sigma + Sigma A + sigma^2 I - Sigma H H^T Sigma, integrated jointly with the
// mean transition data by RK4 with stiffness-aware substeps.
inline RiccatiSolution riccati_filter(const Matrix& A, const Matrix& H, double sigma, const Matrix& Sigma0,
                                      const TimeGrid& time) {
  const Eigen::Index n = A.rows();
  require(A.cols() == n && H.rows() == n && Sigma0.rows() == n && Sigma0.cols() == n, ErrorCode::DimensionMismatch,
          "A, H, Sigma0 dimensions disagree");
  require(sigma > 0.0, ErrorCode::NonPositiveSigma, "sigma must be positive");
  const Eigen::Index m = H.cols();
  const Matrix At = A.transpose();
  const Matrix HHt = H * H.transpose();
  const Matrix I = Matrix::Identity(n, n);
  const double q = sigma * sigma;
  const double dt = time.dt();

  struct State {
    Matrix S, Phi, Psi, Lam;
  };
  auto deriv = [&](const State& s) {
    const Matrix F = At - s.S * HHt;
    return State{At * s.S + s.S * A + q * I - s.S * HHt * s.S, F * s.Phi, F * s.Psi + s.S * H, F * s.Lam + I};
  };
  auto axpy = [](const State& s, double h, const State& d) {
    return State{s.S + h * d.S, s.Phi + h * d.Phi, s.Psi + h * d.Psi, s.Lam + h * d.Lam};
  };

  RiccatiSolution out;
  out.time = time;
  out.Sigma.reserve(time.size());
  out.Sigma.push_back(detail::clip_psd(detail::symmetrize(Sigma0)));
  Matrix S = out.Sigma.front();
  const double a_norm = A.cwiseAbs().rowwise().sum().maxCoeff();
  for (std::size_t k = 0; k < time.n_steps(); ++k) {
    const double rate = 2.0 * a_norm + 2.0 * (S * HHt).cwiseAbs().rowwise().sum().maxCoeff() + 1.0;
    std::size_t sub = detail::stiff_substeps(dt, rate);
    if (sub % 2 == 1) ++sub;  // even count so the midpoint lands on a substep boundary
    const double h = dt / static_cast<double>(sub);
    State st{S, I, Matrix::Zero(n, m), Matrix::Zero(n, n)};
    for (std::size_t s = 0; s < sub; ++s) {
      const State k1 = deriv(st);
      const State k2 = deriv(axpy(st, 0.5 * h, k1));
      const State k3 = deriv(axpy(st, 0.5 * h, k2));
      const State k4 = deriv(axpy(st, h, k3));
      st.S += h / 6.0 * (k1.S + 2.0 * k2.S + 2.0 * k3.S + k4.S);
      st.Phi += h / 6.0 * (k1.Phi + 2.0 * k2.Phi + 2.0 * k3.Phi + k4.Phi);
      st.Psi += h / 6.0 * (k1.Psi + 2.0 * k2.Psi + 2.0 * k3.Psi + k4.Psi);
      st.Lam += h / 6.0 * (k1.Lam + 2.0 * k2.Lam + 2.0 * k3.Lam + k4.Lam);
      st.S = detail::symmetrize(st.S);
      detail::check_blowup(st.S);
      if (2 * (s + 1) == sub) out.Sigma_mid.push_back(st.S);
    }
    S = detail::clip_psd(st.S);
    out.Sigma.push_back(S);
    out.Phi.push_back(st.Phi);
    out.Gamma.push_back(st.Psi / dt);
    out.Lambda.push_back(st.Lam);
  }
  return out;
}

struct GaussianState {
  TimeGrid time;
  std::vector<Vector> m;
  std::vector<Matrix> Sigma;
  std::vector<Vector> dI;          // innovation increments dZ_k - H^T m_k dt
  std::vector<Vector> innovation;  // cumulative innovation, I_0 = 0
};

// Kalman-Bucy mean m_{k+1} = Phi_k m_k + Gamma_k dZ_k (+ Lambda_k G alpha_k for a control input).
inline GaussianState kalman_bucy_mean(const Matrix& H, const RiccatiSolution& ric, const Vector& m0,
                                      const std::vector<Vector>& dZ, const std::vector<Vector>& control_drift = {}) {
  const std::size_t n = ric.time.n_steps();
  require(dZ.size() == n, ErrorCode::GridMismatch, "observation increments do not match the Riccati grid");
  require(control_drift.empty() || control_drift.size() == n, ErrorCode::GridMismatch,
          "control path does not match the Riccati grid");
  require(m0.size() == H.rows(), ErrorCode::DimensionMismatch, "m0 does not match H");
  const double dt = ric.time.dt();
  GaussianState st;
  st.time = ric.time;
  st.Sigma = ric.Sigma;
  st.m.reserve(n + 1);
  st.m.push_back(m0);
  st.innovation.push_back(Vector::Zero(H.cols()));
  for (std::size_t k = 0; k < n; ++k) {
    const Vector& mk = st.m.back();
    st.dI.push_back(dZ[k] - H.transpose() * mk * dt);
    st.innovation.push_back(st.innovation.back() + st.dI.back());
    Vector next = ric.Phi[k] * mk + ric.Gamma[k] * dZ[k];
    if (!control_drift.empty()) next += ric.Lambda[k] * control_drift[k];
    st.m.push_back(std::move(next));
  }
  return st;
}

inline std::vector<Vector> as_vectors(const std::vector<double>& v) {
  std::vector<Vector> out(v.size(), Vector(1));
  for (std::size_t k = 0; k < v.size(); ++k) out[k](0) = v[k];
  return out;
}

inline GaussianState kalman_bucy_mean(const Matrix& H, const RiccatiSolution& ric, const Vector& m0,
                                      const ObservationRecord& obs) {
  require(obs.grid == ric.time, ErrorCode::GridMismatch, "observation record does not match the Riccati grid");
  require(H.cols() == 1, ErrorCode::DimensionMismatch, "scalar observation record needs a single observation channel");
  return kalman_bucy_mean(H, ric, m0, as_vectors(obs.dZ));
}

inline GaussianState kalman_bucy(const LinearGaussianModelSpec& lg, const ObservationRecord& obs) {
  lg.validate();
  const RiccatiSolution ric = riccati_filter(lg.A, lg.H, lg.sigma, lg.Sigma0, obs.grid);
  return kalman_bucy_mean(lg.H, ric, lg.m0, obs);
}

inline std::vector<double> scalar_path(const std::vector<Vector>& v, Eigen::Index i = 0) {
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k](i);
  return out;
}

// Backward recursion dual to the discrete mean update:
//   y_k = Phi_k^T y_{k+1} + H (alpha_k + Gamma_k^T y_{k+1}) dt.
// With alpha_k = -Gamma_k^T y_{k+1} it is the closed loop y_k = Phi_k^T y_{k+1}; with alpha = 0 it
// discretizes -dy/dt = A y. Either way f^T m_T telescopes exactly against the mean update.
inline BackwardVector dual_backward(const RiccatiSolution& ric, const Matrix& H, const Vector& f_bar,
                                    const std::vector<Vector>* alpha = nullptr) {
  const std::size_t n = ric.time.n_steps();
  const double dt = ric.time.dt();
  BackwardVector out{ric.time, std::vector<Vector>(n + 1)};
  out.y[n] = f_bar;
  for (std::size_t k = n; k-- > 0;) {
    const Vector& y1 = out.y[k + 1];
    const Vector gain = ric.Gamma[k].transpose() * y1;
    const Vector a = alpha != nullptr ? Vector((*alpha)[k]) : Vector::Zero(H.cols());
    out.y[k] = ric.Phi[k].transpose() * y1 + H * (a + gain) * dt;
  }
  return out;
}

// Closed-loop control on the discrete grid: u_k = -Gamma_k^T y_{k+1}, y_k = Phi_k^T y_{k+1}.
inline ClosedLoopSolution closed_loop_transition(const RiccatiSolution& ric, const Vector& f_bar) {
  const std::size_t n = ric.time.n_steps();
  ClosedLoopSolution out;
  out.ybar = BackwardVector{ric.time, std::vector<Vector>(n + 1)};
  out.u.resize(n);
  out.ybar.y[n] = f_bar;
  for (std::size_t k = n; k-- > 0;) {
    out.u[k] = -ric.Gamma[k].transpose() * out.ybar.y[k + 1];
    out.ybar.y[k] = ric.Phi[k].transpose() * out.ybar.y[k + 1];
  }
  return out;
}

// ---------------------------------------------------------------------------
// LQ control Riccati
// ---------------------------------------------------------------------------

// Drift A^T x + G a, cost |a|^2/2 and terminal x^T Qf x / 2:
//   -dP/dt = A P + P A^T - P G G^T P,  -dr/dt = sigma^2 tr(P) / 2,  value x^T P x / 2 + r.
struct ControlRiccati {
  TimeGrid time;
  std::vector<Matrix> P;
  std::vector<Matrix> K;  // G^T P
  std::vector<double> r;
  std::vector<Matrix> P_mid;

  [[nodiscard]] double value(std::size_t k, const Vector& x) const { return 0.5 * x.dot(P[k] * x) + r[k]; }
};

inline ControlRiccati lq_control_riccati(const Matrix& A, const Matrix& G, const Matrix& Qf, const TimeGrid& time,
                                         double sigma = 1.0) {
  const Eigen::Index n = A.rows();
  require(A.cols() == n && G.rows() == n && Qf.rows() == n && Qf.cols() == n, ErrorCode::DimensionMismatch,
          "A, G, Qf dimensions disagree");
  {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(detail::symmetrize(Qf));
    require(eig.eigenvalues().minCoeff() >= -1e-12, ErrorCode::InvalidArgument, "terminal Hessian must be PSD");
  }
  const Matrix GGt = G * G.transpose();
  const double q = 0.5 * sigma * sigma;
  const std::size_t N = time.n_steps();
  const double dt = time.dt();
  ControlRiccati out;
  out.time = time;
  out.P.assign(N + 1, Matrix());
  out.r.assign(N + 1, 0.0);
  out.P_mid.assign(N, Matrix());
  out.P[N] = detail::symmetrize(Qf);
  auto rhs = [&](const Matrix& P) -> Matrix { return A * P + P * A.transpose() - P * GGt * P; };
  const double a_norm = A.cwiseAbs().rowwise().sum().maxCoeff();
  Matrix P = out.P[N];
  double r = 0.0;
  for (std::size_t k = N; k-- > 0;) {
    std::size_t sub = detail::stiff_substeps(dt, 2.0 * a_norm + 2.0 * (P * GGt).cwiseAbs().rowwise().sum().maxCoeff() + 1.0);
    if (sub % 2 == 1) ++sub;
    const double h = dt / static_cast<double>(sub);
    for (std::size_t s = 0; s < sub; ++s) {
      // Reverse time: dP/ds = rhs(P), dr/ds = q tr P.
      const Matrix k1 = rhs(P);
      const Matrix P2 = P + 0.5 * h * k1;
      const Matrix k2 = rhs(P2);
      const Matrix P3 = P + 0.5 * h * k2;
      const Matrix k3 = rhs(P3);
      const Matrix P4 = P + h * k3;
      const Matrix k4 = rhs(P4);
      r += h / 6.0 * q * (P.trace() + 2.0 * P2.trace() + 2.0 * P3.trace() + P4.trace());
      P = detail::symmetrize(P + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
      detail::check_blowup(P);
      if (2 * (s + 1) == sub) out.P_mid[k] = P;
    }
    out.P[k] = P;
    out.r[k] = r;
  }
  out.K.reserve(N + 1);
  for (const auto& Pk : out.P) out.K.push_back(G.transpose() * Pk);
  return out;
}

inline void write_csv(std::ostream& os, const GaussianState& st) {
  const Eigen::Index n = st.m.front().size();
  os << "t";
  for (Eigen::Index i = 0; i < n; ++i) os << ",m_" << i + 1;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) os << ",Sigma_" << i + 1 << j + 1;
  os << '\n';
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < st.m.size(); ++k) {
    os << st.time.time(k);
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << st.m[k](i);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) os << ',' << st.Sigma[k](i, j);
    os << '\n';
  }
  os.precision(old);
}

}  // namespace fbsde
