#pragma once

// Online robust tube: local linearization of the learned dynamics, a
// conservative constant linear model, the DARE-based incremental Lyapunov
// function V(e) = e'Pe with auxiliary feedback K, its contraction rate ρ, the
// resulting constraint-tightening schedule and the disturbance admissibility
// bounds.

#include "checkpoint.hpp"
#include "closedloop.hpp"

#include <Eigen/Dense>

#include <limits>
#include <optional>
#include <random>

namespace tubedpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DareError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a batch cannot produce a valid certificate (DARE failure or
/// contraction rate outside (0, 1)).
struct CertificateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------- linearization --

struct JacobianSet {
  std::vector<MatrixXd> A;  // d x_{k+1} / d x_k, n_state x n_state
  std::vector<MatrixXd> B;  // d x_{k+1} / d u_k, n_state x n_action
};

/// Jacobians of the state part of f_x at every (x̂_k, d_k, u_k) of every
/// trajectory in the batch, ordered step-major (k = 0 for all elements, then
/// k = 1, ...).
inline JacobianSet batch_jacobians(const DynamicsParams& dyn, const Trajectory& tr, std::size_t chunk = 256) {
  const auto& cfg = dyn.config;
  std::size_t N = tr.horizon(), Bsz = tr.batch(), F = cfg.n_features();
  if (N == 0 || Bsz == 0) throw std::invalid_argument("batch_jacobians: empty trajectories");
  std::vector<double> pts;
  pts.reserve(N * Bsz * F);
  for (std::size_t k = 0; k < N; ++k) {
    const Tensor& x = tr.states[k];
    const Tensor& d = k == 0 ? tr.aux0 : tr.aux[k - 1];
    const Tensor& u = tr.actions[k];
    for (std::size_t b = 0; b < Bsz; ++b) {
      for (std::size_t i = 0; i < cfg.n_state; ++i) pts.push_back(x.at(b, i));
      for (std::size_t i = 0; i < cfg.n_aux; ++i) pts.push_back(d.at(b, i));
      for (std::size_t i = 0; i < cfg.n_action; ++i) pts.push_back(u.at(b, i));
    }
  }
  auto f = [&](const Tensor& p) {
    Tensor x = ad::slice(p, 0, cfg.n_state);
    Tensor d = ad::slice(p, cfg.n_state, cfg.n_state + cfg.n_aux);
    Tensor u = ad::slice(p, cfg.n_state + cfg.n_aux, F);
    return ad::slice(dynamics_forward(x, u, d, dyn), 0, cfg.n_state);
  };
  JacobianSet out;
  std::size_t total = N * Bsz;
  for (std::size_t start = 0; start < total; start += chunk) {
    std::size_t n = std::min(chunk, total - start);
    std::vector<double> block(pts.begin() + static_cast<std::ptrdiff_t>(start * F),
                              pts.begin() + static_cast<std::ptrdiff_t>((start + n) * F));
    auto J = ad::row_jacobians(f, Tensor({n, F}, std::move(block)));
    for (auto& j : J) {
      out.A.push_back(j.leftCols(static_cast<Eigen::Index>(cfg.n_state)));
      out.B.push_back(j.rightCols(static_cast<Eigen::Index>(cfg.n_action)));
    }
  }
  return out;
}

/// Entrywise worst-case gain: the batch entry of largest magnitude, sign kept.
inline MatrixXd conservative_bound(std::span<const MatrixXd> mats) {
  if (mats.empty()) throw std::invalid_argument("conservative_bound: empty batch");
  MatrixXd out = mats[0];
  for (const auto& m : mats.subspan(1)) {
    if (m.rows() != out.rows() || m.cols() != out.cols())
      throw std::invalid_argument("conservative_bound: matrices differ in shape");
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        if (std::abs(m(i, j)) > std::abs(out(i, j))) out(i, j) = m(i, j);
  }
  return out;
}

// --------------------------------------------------------------------- DARE --

/// Converged when the max-norm change between iterates is at most
/// max(tolerance, relative_tolerance * max|P|). The relative floor matters
/// once P is large: the iterates then stall at a rounding level far above
/// any fixed absolute threshold.
struct DareOptions {
  int max_iterations = 10000;
  double tolerance = 1e-10;
  double relative_tolerance = 1e-11;
};

inline MatrixXd riccati_map(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R,
                            const MatrixXd& P) {
  MatrixXd BtPA = B.transpose() * P * A;
  MatrixXd S = B.transpose() * P * B + R;
  MatrixXd next = A.transpose() * P * A - BtPA.transpose() * S.ldlt().solve(BtPA) + Q;
  return 0.5 * (next + next.transpose());
}

/// Max-norm residual of the DARE fixed-point equation at P.
inline double dare_residual(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R,
                            const MatrixXd& P) {
  MatrixXd BtPA = B.transpose() * P * A;
  MatrixXd S = B.transpose() * P * B + R;
  MatrixXd r = A.transpose() * P * A - BtPA.transpose() * S.ldlt().solve(BtPA) + Q - P;
  return r.cwiseAbs().maxCoeff();
}

/// Riccati value iteration from P_0 = Q.
inline MatrixXd solve_dare(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R,
                           const DareOptions& opt = {}) {
  auto n = A.rows();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n || R.rows() != B.cols() ||
      R.cols() != B.cols())
    throw std::invalid_argument("solve_dare: inconsistent dimensions");
  MatrixXd P = Q;
  for (int it = 0; it < opt.max_iterations; ++it) {
    MatrixXd next = riccati_map(A, B, Q, R, P);
    if (!next.allFinite()) throw DareError("DARE iteration diverged (non-finite iterate)");
    double change = (next - P).cwiseAbs().maxCoeff();
    P = std::move(next);
    if (change <= std::max(opt.tolerance, opt.relative_tolerance * P.cwiseAbs().maxCoeff())) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(P);
      if (es.eigenvalues().minCoeff() <= 0.0) throw DareError("DARE solution is not positive definite");
      return P;
    }
  }
  throw DareError("DARE iteration did not converge within " + std::to_string(opt.max_iterations) +
                  " iterations; local dynamics are likely not stabilizable");
}

inline MatrixXd feedback_gain(const MatrixXd& A, const MatrixXd& B, const MatrixXd& P, const MatrixXd& R) {
  MatrixXd S = B.transpose() * P * B + R;
  Eigen::FullPivLU<MatrixXd> lu(S);
  if (!lu.isInvertible()) throw std::runtime_error("feedback_gain: B'PB + R is singular");
  return -lu.solve(B.transpose() * P * A);
}

/// P^{-1/2} of a symmetric positive definite matrix.
inline MatrixXd inverse_sqrt(const MatrixXd& P) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(P);
  if (es.eigenvalues().minCoeff() <= 0.0) throw std::invalid_argument("inverse_sqrt: matrix is not positive definite");
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

/// 1 - λ_min(P^{-1/2} (Q + K'RK) P^{-1/2}), without range check.
inline double raw_contraction_rate(const MatrixXd& P, const MatrixXd& K, const MatrixXd& Q, const MatrixXd& R) {
  MatrixXd Pm = inverse_sqrt(P);
  MatrixXd M = Pm * (Q + K.transpose() * R * K) * Pm;
  M = 0.5 * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(M);
  return 1.0 - es.eigenvalues().minCoeff();
}

/// Rates within this distance of 0 or 1 are treated as on the boundary.
inline constexpr double kRateTolerance = 1e-12;

/// One-step error contraction rate; throws CertificateError outside (0, 1).
inline double contraction_rate(const MatrixXd& P, const MatrixXd& K, const MatrixXd& Q, const MatrixXd& R) {
  double rho = raw_contraction_rate(P, K, Q, R);
  if (!(rho > kRateTolerance && rho < 1.0 - kRateTolerance))
    throw CertificateError("contraction rate " + std::to_string(rho) + " outside (0, 1)");
  return rho;
}

/// Induced infinity norm (max absolute row sum).
inline double induced_inf_norm(const MatrixXd& K) { return K.cwiseAbs().rowwise().sum().maxCoeff(); }

// ------------------------------------------------------------- tightening --

struct TighteningSchedule {
  double base = 0.0;  // ε
  double rho = 0.0;
  std::vector<double> values;  // ε_0..ε_{N-1}

  /// ε_k = ε (1 - √ρ^k) / (1 - √ρ), defined for any k >= 0.
  double at(std::size_t k) const {
    double s = std::sqrt(rho);
    return base * (1.0 - std::pow(s, static_cast<double>(k))) / (1.0 - s);
  }
  double supremum() const { return base / (1.0 - std::sqrt(rho)); }
  /// ε_0..ε_{n-1}; used for the policy's look-ahead input beyond the horizon.
  std::vector<double> extended(std::size_t n) const {
    std::vector<double> v(n);
    for (std::size_t k = 0; k < n; ++k) v[k] = at(k);
    return v;
  }
};

inline TighteningSchedule tightening_schedule(double eps, double rho, std::size_t N) {
  if (!(eps > 0.0)) throw std::invalid_argument("tightening base width must be > 0");
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("contraction rate must lie in (0, 1)");
  if (N == 0) throw std::invalid_argument("horizon must be >= 1");
  TighteningSchedule s{eps, rho, {}};
  s.values = s.extended(N);
  return s;
}

struct TightenedBounds {
  std::vector<ConstraintBox> boxes;  // X_k x U_k for k = 0..N-1
  std::vector<double> r_x, r_u;      // half-widths of the original box
};

inline std::vector<double> half_widths(const std::vector<double>& lo, const std::vector<double>& hi) {
  std::vector<double> r(lo.size());
  for (std::size_t i = 0; i < lo.size(); ++i) r[i] = (hi[i] - lo[i]) / 2.0;
  return r;
}

/// Shrinks the original box symmetrically by ε_k times the half-widths.
inline TightenedBounds tightened_sets(const ConstraintBox& box, const TighteningSchedule& sched) {
  box.validate();
  TightenedBounds tb;
  tb.r_x = half_widths(box.x_low, box.x_high);
  tb.r_u = half_widths(box.u_low, box.u_high);
  for (double e : sched.values) {
    if (!(e < 1.0))
      throw std::domain_error("tightening ε_k = " + std::to_string(e) + " empties the constraint box");
    ConstraintBox b = box;
    for (std::size_t i = 0; i < b.x_low.size(); ++i) {
      b.x_low[i] += e * tb.r_x[i];
      b.x_high[i] -= e * tb.r_x[i];
    }
    for (std::size_t i = 0; i < b.u_low.size(); ++i) {
      b.u_low[i] += e * tb.r_u[i];
      b.u_high[i] -= e * tb.r_u[i];
    }
    tb.boxes.push_back(std::move(b));
  }
  return tb;
}

/// Largest 2-norm one-step state residual of f_x on held-out transitions,
/// inflated by `inflation`.
inline double estimate_w_bound(const TransitionBatch& val, const DynamicsParams& dyn, double inflation = 1.25) {
  if (val.size() == 0) throw std::invalid_argument("estimate_w_bound: empty validation set");
  ad::NoTapeScope no_tape;
  Tensor pred = dynamics_forward(val.state, val.action, val.aux, dyn);
  std::size_t ns = dyn.config.n_state;
  double worst = 0.0;
  for (std::size_t b = 0; b < val.size(); ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < ns; ++i) {
      double e = pred.at(b, i) - val.target.at(b, i);
      s += e * e;
    }
    worst = std::max(worst, std::sqrt(s));
  }
  return inflation * worst;
}

// ------------------------------------------------------------ certificate --

struct DisturbanceBounds {
  double delta_loc = 0.0;
  double w1 = 0.0, w2 = 0.0, w3 = 0.0;
  bool admissible = false;
};

struct TubeCertificate {
  MatrixXd A, B;  // conservative linearization
  MatrixXd Q, R;
  MatrixXd P, K;
  double rho = 0.0;
  double c_lower = 0.0;  // λ_min(P)
  double c_upper = 0.0;  // λ_max(P)
  double k_max = 0.0;    // ||K||_inf
  DisturbanceBounds disturbance;
};

inline DisturbanceBounds disturbance_bounds(double c_lower, double c_upper, double k_max, double eps,
                                            const ConstraintBox& box, double w_bound) {
  if (!(c_lower > 0.0 && c_lower <= c_upper)) throw std::invalid_argument("invalid Lyapunov bounds");
  DisturbanceBounds d;
  d.delta_loc = c_upper * w_bound * w_bound;
  d.w1 = std::sqrt(d.delta_loc / c_upper);
  double ratio = std::sqrt(c_lower / c_upper);
  auto rx = half_widths(box.x_low, box.x_high);
  auto ru = half_widths(box.u_low, box.u_high);
  d.w2 = ratio * eps * *std::min_element(rx.begin(), rx.end());
  d.w3 = k_max == 0.0 ? std::numeric_limits<double>::infinity()
                      : ratio * eps * *std::min_element(ru.begin(), ru.end()) / k_max;
  d.admissible = w_bound <= std::min({d.w1, d.w2, d.w3});
  return d;
}

inline DisturbanceBounds disturbance_bounds(const TubeCertificate& c, double eps, const ConstraintBox& box,
                                            double w_bound) {
  return disturbance_bounds(c.c_lower, c.c_upper, c.k_max, eps, box, w_bound);
}

/// Largest eigenvalue of (A+BK)'P(A+BK) - P + Q + K'RK; the Riccati
/// inequality holds when this is <= 0 (up to tolerance).
inline double riccati_inequality_margin(const MatrixXd& A, const MatrixXd& B, const MatrixXd& K, const MatrixXd& P,
                                        const MatrixXd& Q, const MatrixXd& R) {
  MatrixXd Acl = A + B * K;
  MatrixXd M = Acl.transpose() * P * Acl - P + Q + K.transpose() * R * K;
  M = 0.5 * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(M);
  return es.eigenvalues().maxCoeff();
}

/// Max of V(e+)/V(e) over the samples with e+ = (A+BK)e; zero errors are
/// skipped (both sides vanish). Throws CertificateError when a sample breaks
/// V(e+) <= ρ V(e) + 1e-9.
inline double verify_contraction(const MatrixXd& A, const MatrixXd& B, const MatrixXd& K, const MatrixXd& P,
                                 double rho, std::span<const VectorXd> samples) {
  MatrixXd Acl = A + B * K;
  double worst = 0.0;
  for (const auto& e : samples) {
    double v = e.dot(P * e);
    VectorXd ep = Acl * e;
    double vp = ep.dot(P * ep);
    if (vp > rho * v + 1e-9) throw CertificateError("contraction violated: V(e+) > rho V(e)");
    if (v > 0.0) worst = std::max(worst, vp / v);
  }
  return worst;
}

/// DARE -> K -> ρ -> Lyapunov bounds for a conservative linear model.
inline TubeCertificate build_certificate(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                                         const MatrixXd& R, const DareOptions& opt = {}) {
  TubeCertificate c;
  c.A = A;
  c.B = B;
  c.Q = Q;
  c.R = R;
  try {
    c.P = solve_dare(A, B, Q, R, opt);
  } catch (const DareError& e) {
    throw CertificateError(e.what());
  }
  c.K = feedback_gain(A, B, c.P, R);
  c.rho = contraction_rate(c.P, c.K, Q, R);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(c.P);
  c.c_lower = es.eigenvalues().minCoeff();
  c.c_upper = es.eigenvalues().maxCoeff();
  c.k_max = induced_inf_norm(c.K);
  return c;
}

inline json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

inline MatrixXd matrix_from_json(const json& j) {
  auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return {};
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  return m;
}

inline json to_json(const TubeCertificate& c) {
  return {{"A_max", matrix_to_json(c.A)},
          {"B_max", matrix_to_json(c.B)},
          {"Q", matrix_to_json(c.Q)},
          {"R", matrix_to_json(c.R)},
          {"P", matrix_to_json(c.P)},
          {"K", matrix_to_json(c.K)},
          {"rho", c.rho},
          {"c_lower", c.c_lower},
          {"c_upper", c.c_upper},
          {"k_max", c.k_max},
          {"delta_loc", c.disturbance.delta_loc},
          {"w_hat", {c.disturbance.w1, c.disturbance.w2, c.disturbance.w3}},
          {"disturbance_admissible", c.disturbance.admissible}};
}

inline TubeCertificate certificate_from_json(const json& j) {
  TubeCertificate c;
  c.A = matrix_from_json(j.at("A_max"));
  c.B = matrix_from_json(j.at("B_max"));
  c.Q = matrix_from_json(j.at("Q"));
  c.R = matrix_from_json(j.at("R"));
  c.P = matrix_from_json(j.at("P"));
  c.K = matrix_from_json(j.at("K"));
  c.rho = j.at("rho").get<double>();
  c.c_lower = j.at("c_lower").get<double>();
  c.c_upper = j.at("c_upper").get<double>();
  c.k_max = j.at("k_max").get<double>();
  c.disturbance.delta_loc = j.value("delta_loc", 0.0);
  if (j.contains("w_hat")) {
    auto w = j.at("w_hat").get<std::vector<double>>();
    c.disturbance.w1 = w.at(0);
    c.disturbance.w2 = w.at(1);
    // +inf is stored as null by the JSON writer.
    c.disturbance.w3 = j.at("w_hat").at(2).is_null() ? std::numeric_limits<double>::infinity() : w.at(2);
  }
  c.disturbance.admissible = j.value("disturbance_admissible", false);
  return c;
}

inline json to_json(const TighteningSchedule& s) {
  return {{"epsilon", s.base}, {"rho", s.rho}, {"values", s.values}};
}

inline TighteningSchedule schedule_from_json(const json& j) {
  TighteningSchedule s;
  s.base = j.at("epsilon").get<double>();
  s.rho = j.at("rho").get<double>();
  s.values = j.at("values").get<std::vector<double>>();
  return s;
}

}  // namespace tubedpc
