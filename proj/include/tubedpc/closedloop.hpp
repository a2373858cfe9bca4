#pragma once

// Differentiable closed-loop rollout of policy + dynamics model over the
// prediction horizon, and the identification / constraint / objective losses.

#include "models.hpp"

#include <span>

namespace tubedpc {

/// Box constraints on states and actions (closed intervals).
struct ConstraintBox {
  std::vector<double> x_low, x_high;
  std::vector<double> u_low, u_high;

  void validate() const {
    if (x_low.size() != x_high.size() || u_low.size() != u_high.size())
      throw std::invalid_argument("constraint box bound sizes differ");
    for (std::size_t i = 0; i < x_low.size(); ++i)
      if (!(x_low[i] < x_high[i])) throw std::invalid_argument("state box requires x_low < x_high");
    for (std::size_t i = 0; i < u_low.size(); ++i)
      if (!(u_low[i] < u_high[i])) throw std::invalid_argument("input box requires u_low < u_high");
  }

  static ConstraintBox uniform(std::size_t n_x, double xl, double xh, std::size_t n_u, double ul, double uh) {
    ConstraintBox b{std::vector<double>(n_x, xl), std::vector<double>(n_x, xh), std::vector<double>(n_u, ul),
                    std::vector<double>(n_u, uh)};
    b.validate();
    return b;
  }

  /// Comfort band [19, 24] degC on 8 zones, setpoints in [16, 26] degC.
  static ConstraintBox building() { return uniform(8, 19.0, 24.0, 4, 16.0, 26.0); }

  bool contains_state(std::span<const double> x) const {
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!(x[i] >= x_low[i] && x[i] <= x_high[i])) return false;
    return true;
  }
  bool contains_action(std::span<const double> u) const {
    for (std::size_t i = 0; i < u.size(); ++i)
      if (!(u[i] >= u_low[i] && u[i] <= u_high[i])) return false;
    return true;
  }
};

/// Rollout scenarios. `prices` holds 2N-1 columns so that the policy at step k
/// can see prices k..k+N-1; `aux0` is the measured auxiliary vector d_0.
struct ScenarioBatch {
  Tensor x0;      // [B, n_state]
  Tensor aux0;    // [B, n_aux]
  Tensor prices;  // [B, 2N-1]

  std::size_t size() const { return x0.rows(); }
};

/// states[k] = x̂_k for k = 0..N (x̂_N is produced but excluded from losses);
/// aux[k] is the auxiliary prediction made at step k, i.e. the energy used
/// during [k, k+1) and the d input of step k+1.
struct Trajectory {
  std::vector<Tensor> states;
  std::vector<Tensor> actions;
  std::vector<Tensor> aux;
  Tensor aux0;
  Tensor prices;

  std::size_t horizon() const { return actions.size(); }
  std::size_t batch() const { return states.empty() ? 0 : states[0].rows(); }
};

/// Broadcasts columns [k, k+N) of a shared length >= 2N-1 sequence to [B, N].
inline Tensor window(std::span<const double> seq, std::size_t k, std::size_t N, std::size_t B) {
  if (k + N > seq.size()) throw ShapeError("sequence too short for horizon window");
  std::vector<double> v(B * N);
  for (std::size_t b = 0; b < B; ++b) std::copy_n(seq.begin() + static_cast<std::ptrdiff_t>(k), N, v.begin() + static_cast<std::ptrdiff_t>(b * N));
  return Tensor({B, N}, std::move(v));
}

/// `tightening`, when given, is ε_0..ε_{2N-2}; step k sees ε_k..ε_{k+N-1}.
inline Trajectory rollout(const ScenarioBatch& sc, const DynamicsParams& dyn, const PolicyParams& pol,
                          std::size_t N, const std::vector<double>* tightening = nullptr) {
  if (N == 0) throw std::invalid_argument("rollout horizon must be >= 1");
  const auto& cfg = dyn.config;
  std::size_t B = sc.size();
  if (sc.x0.cols() != cfg.n_state || sc.aux0.cols() != cfg.n_aux || sc.aux0.rows() != B ||
      sc.prices.rows() != B || sc.prices.cols() < 2 * N - 1)
    throw ShapeError("scenario batch dims inconsistent with the model/horizon");

  Trajectory tr;
  tr.aux0 = sc.aux0;
  tr.prices = sc.prices;
  tr.states.push_back(sc.x0);
  Tensor d = sc.aux0;
  for (std::size_t k = 0; k < N; ++k) {
    PolicyInput in{ad::concat({tr.states.back(), d}), ad::slice(sc.prices, k, k + N), std::nullopt};
    if (tightening) in.tightening = window(*tightening, k, N, B);
    Tensor u = policy_forward(in, pol);
    Tensor next = dynamics_forward(tr.states.back(), u, d, dyn);
    tr.actions.push_back(u);
    d = ad::slice(next, cfg.n_state, cfg.n_out());
    tr.aux.push_back(d);
    tr.states.push_back(ad::slice(next, 0, cfg.n_state));
  }
  return tr;
}

/// One-step transitions (x_j, u_j, d_j) -> target [x_{j+1}, d_{j+1}].
struct TransitionBatch {
  Tensor state;   // [B, n_state]
  Tensor action;  // [B, n_action]
  Tensor aux;     // [B, n_aux]
  Tensor target;  // [B, n_out]

  std::size_t size() const { return state.rows(); }
};

/// Mean over the batch of the squared 2-norm one-step prediction error.
inline Tensor identification_loss(const TransitionBatch& b, const DynamicsParams& dyn) {
  if (b.size() == 0) throw std::invalid_argument("identification batch is empty");
  Tensor err = ad::sub(dynamics_forward(b.state, b.action, b.aux, dyn), b.target);
  return ad::scale(ad::sum(ad::square(err)), 1.0 / static_cast<double>(b.size()));
}

inline Tensor squared_violation(const Tensor& v, const std::vector<double>& low, const std::vector<double>& high) {
  Tensor over = ad::relu(ad::sub(v, Tensor::vector(high)));
  Tensor under = ad::relu(ad::sub(Tensor::vector(low), v));
  return ad::add(ad::sum(ad::square(over)), ad::sum(ad::square(under)));
}

/// Squared-ReLU penalty of x̂_0..x̂_{N-1} and u_0..u_{N-1} against per-step
/// boxes, normalized by B*N.
inline Tensor constraint_loss(const Trajectory& tr, std::span<const ConstraintBox> boxes) {
  std::size_t N = tr.horizon();
  if (boxes.size() != N) throw std::invalid_argument("constraint_loss needs one box per step");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < N; ++k) {
    total = ad::add(total, squared_violation(tr.states[k], boxes[k].x_low, boxes[k].x_high));
    total = ad::add(total, squared_violation(tr.actions[k], boxes[k].u_low, boxes[k].u_high));
  }
  return ad::scale(total, 1.0 / static_cast<double>(tr.batch() * N));
}

inline Tensor constraint_loss(const Trajectory& tr, const ConstraintBox& box) {
  std::vector<ConstraintBox> boxes(tr.horizon(), box);
  return constraint_loss(tr, boxes);
}

/// (1/B) Σ_i Σ_k τ_k Ê_k with Ê_k the predicted total energy (aux column 0).
inline Tensor objective_loss(const Trajectory& tr) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < tr.horizon(); ++k) {
    Tensor price = ad::slice(tr.prices, k, k + 1);
    Tensor energy = ad::slice(tr.aux[k], 0, 1);
    total = ad::add(total, ad::sum(ad::mul(price, energy)));
  }
  return ad::scale(total, 1.0 / static_cast<double>(tr.batch()));
}

struct LossWeights {
  double id = 0.1;
  double cons = 10.0;
  double obj = 0.075;
};

inline Tensor composite_loss(const Tensor& l_id, const Tensor& l_cons, const Tensor& l_obj, const LossWeights& w) {
  if (w.id < 0 || w.cons < 0 || w.obj < 0) throw std::invalid_argument("loss weights must be non-negative");
  return ad::add(ad::add(ad::scale(l_id, w.id), ad::scale(l_cons, w.cons)), ad::scale(l_obj, w.obj));
}

inline double composite_loss(double l_id, double l_cons, double l_obj, const LossWeights& w) {
  if (w.id < 0 || w.cons < 0 || w.obj < 0) throw std::invalid_argument("loss weights must be non-negative");
  return w.id * l_id + w.cons * l_cons + w.obj * l_obj;
}

}  // namespace tubedpc
