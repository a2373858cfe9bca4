#pragma once

// Warm start, PCGrad, β curriculum, joint model/policy epochs with optional
// online tube tightening, and the three training variants.

#include "checkpoint.hpp"
#include "closedloop.hpp"
#include "plant.hpp"
#include "tube.hpp"

#include <limits>
#include <optional>
#include <ostream>

namespace tubedpc {

enum class Variant { dpc_c, e2e, e2e_g };

inline Variant parse_variant(const std::string& s) {
  if (s == "dpc-c") return Variant::dpc_c;
  if (s == "e2e") return Variant::e2e;
  if (s == "e2e-g") return Variant::e2e_g;
  throw std::invalid_argument("unknown variant '" + s + "' (expected dpc-c, e2e or e2e-g)");
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::dpc_c: return "dpc-c";
    case Variant::e2e: return "e2e";
    case Variant::e2e_g: return "e2e-g";
  }
  return "?";
}

struct TrainConfig {
  LossWeights weights;
  double lr_model = 1e-4;
  double lr_policy = 5e-3;
  double lr_warm_start = 1e-3;
  std::size_t batch = 256;
  std::size_t patience = 10;
  double tolerance = 0.01;
  std::size_t max_warm_start_epochs = 200;
  std::vector<double> beta_levels{0.1, 0.5, 1.0};
  std::size_t horizon = 8;
  double q_weight = 10.0;
  double r_weight = 1.0;
  double epsilon = 0.08;
  std::size_t epochs = 50;
  std::size_t batches_per_epoch = 8;
  std::size_t val_scenarios = 256;
  std::size_t val_transitions = 1024;
  double val_fraction = 0.2;
  double dt_hours = 0.25;
  double initial_setpoint = 21.0;
  double w_bound_inflation = 1.25;
  std::vector<std::size_t> policy_hidden{64, 64};
  DynamicsConfig model;
  ConstraintBox box = ConstraintBox::building();
  TOUTariff tariff = TOUTariff::winter();
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_model > 0 && lr_policy > 0 && lr_warm_start > 0)) throw std::invalid_argument("learning rates must be positive");
    if (!(weights.id > 0 && weights.cons > 0 && weights.obj > 0)) throw std::invalid_argument("loss weights must be positive");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (!(tolerance >= 0)) throw std::invalid_argument("tolerance must be >= 0");
    if (batch == 0 || horizon == 0 || batches_per_epoch == 0 || val_scenarios == 0 || val_transitions == 0)
      throw std::invalid_argument("batch, horizon and epoch sizes must be positive");
    if (beta_levels.empty()) throw std::invalid_argument("beta levels must be non-empty");
    for (std::size_t i = 0; i < beta_levels.size(); ++i) {
      if (!(beta_levels[i] > 0)) throw std::invalid_argument("beta levels must be positive");
      if (i > 0 && !(beta_levels[i] > beta_levels[i - 1])) throw std::invalid_argument("beta levels must be ascending");
    }
    if (!(q_weight > 0 && r_weight > 0)) throw std::invalid_argument("Q and R weights must be positive");
    if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be > 0");
    if (!(val_fraction > 0 && val_fraction < 1)) throw std::invalid_argument("val_fraction must be in (0,1)");
    if (!(dt_hours > 0)) throw std::invalid_argument("dt_hours must be positive");
    box.validate();
    tariff.validate();
    if (box.x_low.size() != model.n_state || box.u_low.size() != model.n_action)
      throw std::invalid_argument("constraint box dims differ from the model dims");
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"lambda_id", c.weights.id},
          {"lambda_cons", c.weights.cons},
          {"lambda_obj", c.weights.obj},
          {"lr_model", c.lr_model},
          {"lr_policy", c.lr_policy},
          {"lr_warm_start", c.lr_warm_start},
          {"batch", c.batch},
          {"patience", c.patience},
          {"tolerance", c.tolerance},
          {"max_warm_start_epochs", c.max_warm_start_epochs},
          {"beta_levels", c.beta_levels},
          {"horizon", c.horizon},
          {"q_weight", c.q_weight},
          {"r_weight", c.r_weight},
          {"epsilon", c.epsilon},
          {"epochs", c.epochs},
          {"batches_per_epoch", c.batches_per_epoch},
          {"val_scenarios", c.val_scenarios},
          {"val_transitions", c.val_transitions},
          {"val_fraction", c.val_fraction},
          {"dt_hours", c.dt_hours},
          {"initial_setpoint", c.initial_setpoint},
          {"w_bound_inflation", c.w_bound_inflation},
          {"policy_hidden", c.policy_hidden},
          {"model", to_json(c.model)},
          {"box", {{"x_low", c.box.x_low}, {"x_high", c.box.x_high}, {"u_low", c.box.u_low}, {"u_high", c.box.u_high}}},
          {"tariff", c.tariff.periods},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.weights.id = j.value("lambda_id", c.weights.id);
  c.weights.cons = j.value("lambda_cons", c.weights.cons);
  c.weights.obj = j.value("lambda_obj", c.weights.obj);
  c.lr_model = j.value("lr_model", c.lr_model);
  c.lr_policy = j.value("lr_policy", c.lr_policy);
  c.lr_warm_start = j.value("lr_warm_start", c.lr_warm_start);
  c.batch = j.value("batch", c.batch);
  c.patience = j.value("patience", c.patience);
  c.tolerance = j.value("tolerance", c.tolerance);
  c.max_warm_start_epochs = j.value("max_warm_start_epochs", c.max_warm_start_epochs);
  c.beta_levels = j.value("beta_levels", c.beta_levels);
  c.horizon = j.value("horizon", c.horizon);
  c.q_weight = j.value("q_weight", c.q_weight);
  c.r_weight = j.value("r_weight", c.r_weight);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.epochs = j.value("epochs", c.epochs);
  c.batches_per_epoch = j.value("batches_per_epoch", c.batches_per_epoch);
  c.val_scenarios = j.value("val_scenarios", c.val_scenarios);
  c.val_transitions = j.value("val_transitions", c.val_transitions);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.dt_hours = j.value("dt_hours", c.dt_hours);
  c.initial_setpoint = j.value("initial_setpoint", c.initial_setpoint);
  c.w_bound_inflation = j.value("w_bound_inflation", c.w_bound_inflation);
  c.policy_hidden = j.value("policy_hidden", c.policy_hidden);
  if (j.contains("model")) c.model = dynamics_config_from_json(j.at("model"));
  if (j.contains("box")) {
    const auto& b = j.at("box");
    c.box = {b.at("x_low").get<std::vector<double>>(), b.at("x_high").get<std::vector<double>>(),
             b.at("u_low").get<std::vector<double>>(), b.at("u_high").get<std::vector<double>>()};
  }
  if (j.contains("tariff")) c.tariff.periods = j.at("tariff").get<std::vector<TouPeriod>>();
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ------------------------------------------------------------------ data --

/// Transitions as flat row-major arrays so batches can be gathered cheaply.
struct TransitionPool {
  std::size_t n_state = 0, n_action = 0, n_aux = 0;
  std::vector<double> state, action, aux, target;

  std::size_t size() const { return n_state ? state.size() / n_state : 0; }
  std::size_t n_out() const { return n_state + n_aux; }

  TransitionBatch gather(std::span<const std::size_t> idx) const {
    auto pick = [&](const std::vector<double>& src, std::size_t w) {
      std::vector<double> v(idx.size() * w);
      for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[r] * w), w, v.begin() + static_cast<std::ptrdiff_t>(r * w));
      return Tensor({idx.size(), w}, std::move(v));
    };
    return {pick(state, n_state), pick(action, n_action), pick(aux, n_aux), pick(target, n_out())};
  }

  TransitionBatch all() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    return gather(idx);
  }

  TransitionBatch sample(std::size_t B, std::mt19937_64& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, size() - 1);
    std::vector<std::size_t> idx(B);
    for (auto& i : idx) i = pick(rng);
    return gather(idx);
  }
};

/// Chronological train/validation split of a dataset's transitions.
struct TrainingData {
  TransitionPool train, val;
};

inline TransitionPool pool_from_rows(const Dataset& d, std::size_t begin, std::size_t end) {
  TransitionPool p;
  const auto& r0 = d.rows.front();
  p.n_state = r0.temps.size();
  p.n_action = r0.setpoints.size();
  p.n_aux = 3;
  for (std::size_t j = begin; j < end; ++j) {
    const auto& a = d.rows[j];
    const auto& b = d.rows[j + 1];
    p.state.insert(p.state.end(), a.temps.begin(), a.temps.end());
    p.action.insert(p.action.end(), a.setpoints.begin(), a.setpoints.end());
    p.aux.insert(p.aux.end(), {a.e_all, a.e_appl, a.hp_return});
    p.target.insert(p.target.end(), b.temps.begin(), b.temps.end());
    p.target.insert(p.target.end(), {b.e_all, b.e_appl, b.hp_return});
  }
  return p;
}

inline TrainingData prepare_data(const Dataset& d, double val_fraction) {
  std::size_t n = d.transitions();
  if (n < 2) throw std::invalid_argument("dataset needs at least two transitions");
  auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n))));
  if (n_val >= n) throw std::invalid_argument("validation split leaves no training transitions");
  return {pool_from_rows(d, 0, n - n_val), pool_from_rows(d, n - n_val, n)};
}

namespace detail {

inline void column_stats(const std::vector<double>& v, std::size_t w, std::vector<double>& mean, std::vector<double>& sd) {
  std::size_t n = v.size() / w;
  mean.assign(w, 0.0);
  sd.assign(w, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) mean[c] += v[r * w + c];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) sd[c] += (v[r * w + c] - mean[c]) * (v[r * w + c] - mean[c]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n));
}

inline void floor_scale(std::vector<double>& s, double floor) {
  for (auto& x : s)
    if (!(x > floor)) x = floor;
}

}  // namespace detail

/// Input offset/scale from feature means and deviations; output scale from
/// the deviation of the one-step increments.
inline void fit_normalization(DynamicsParams& p, const TransitionPool& pool) {
  std::vector<double> ms, ss, ma, sa, mu, su;
  detail::column_stats(pool.state, pool.n_state, ms, ss);
  detail::column_stats(pool.aux, pool.n_aux, ma, sa);
  detail::column_stats(pool.action, pool.n_action, mu, su);
  std::vector<double> off, sc;
  for (auto* part : {&ms, &ma, &mu}) off.insert(off.end(), part->begin(), part->end());
  for (auto* part : {&ss, &sa, &su}) sc.insert(sc.end(), part->begin(), part->end());
  detail::floor_scale(sc, 1e-3);
  std::size_t n = pool.size(), w = pool.n_out();
  std::vector<double> inc(n * w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double cur = c < pool.n_state ? pool.state[r * pool.n_state + c] : pool.aux[r * pool.n_aux + c - pool.n_state];
      inc[r * w + c] = pool.target[r * w + c] - (p.config.residual ? cur : 0.0);
    }
  std::vector<double> mi, si;
  detail::column_stats(inc, w, mi, si);
  detail::floor_scale(si, 1e-3);
  p.input_offset = Tensor::vector(off);
  p.input_scale = Tensor::vector(sc);
  p.output_scale = Tensor::vector(si);
}

inline std::vector<double> price_sequence(const TOUTariff& t, double start_hour, std::size_t count, double dt_hours) {
  std::vector<double> v(count);
  for (std::size_t k = 0; k < count; ++k) v[k] = t.price(start_hour + static_cast<double>(k) * dt_hours);
  return v;
}

/// Policy input normalization: state and aux statistics from the data, price
/// statistics over one day of the tariff, ε scaled by the base ε.
inline void fit_policy_normalization(PolicyParams& p, const TransitionPool& pool, const TOUTariff& t, double dt_hours,
                                     std::size_t N, bool tightening, double eps) {
  std::vector<double> ms, ss, ma, sa;
  detail::column_stats(pool.state, pool.n_state, ms, ss);
  detail::column_stats(pool.aux, pool.n_aux, ma, sa);
  auto day = price_sequence(t, 0.0, static_cast<std::size_t>(std::llround(24.0 / dt_hours)), dt_hours);
  std::vector<double> mp, sp;
  detail::column_stats(day, 1, mp, sp);
  std::vector<double> off = ms, sc = ss;
  off.insert(off.end(), ma.begin(), ma.end());
  sc.insert(sc.end(), sa.begin(), sa.end());
  off.insert(off.end(), N, mp[0]);
  sc.insert(sc.end(), N, sp[0]);
  if (tightening) {
    off.insert(off.end(), N, 0.0);
    sc.insert(sc.end(), N, eps > 0 ? eps : 1.0);
  }
  detail::floor_scale(sc, 1e-3);
  if (off.size() != p.input_dim) throw ShapeError("policy normalization width differs from the policy input width");
  p.input_offset = Tensor::vector(off);
  p.input_scale = Tensor::vector(sc);
}

/// x0 uniform on the state box, d0 drawn from recorded aux rows, prices from a
/// uniformly drawn start step of the day.
inline ScenarioBatch sample_scenarios(std::size_t B, std::size_t N, const ConstraintBox& box, const TransitionPool& pool,
                                      const TOUTariff& t, double dt_hours, std::mt19937_64& rng) {
  std::size_t nx = box.x_low.size(), na = pool.n_aux, W = 2 * N - 1;
  auto steps_per_day = static_cast<std::size_t>(std::llround(24.0 / dt_hours));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> row(0, pool.size() - 1), start(0, steps_per_day - 1);
  std::vector<double> x(B * nx), d(B * na), pr(B * W);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < nx; ++i) x[b * nx + i] = box.x_low[i] + (box.x_high[i] - box.x_low[i]) * unit(rng);
    std::size_t r = row(rng);
    std::copy_n(pool.aux.begin() + static_cast<std::ptrdiff_t>(r * na), na, d.begin() + static_cast<std::ptrdiff_t>(b * na));
    auto seq = price_sequence(t, static_cast<double>(start(rng)) * dt_hours, W, dt_hours);
    std::copy(seq.begin(), seq.end(), pr.begin() + static_cast<std::ptrdiff_t>(b * W));
  }
  return {Tensor({B, nx}, std::move(x)), Tensor({B, na}, std::move(d)), Tensor({B, W}, std::move(pr))};
}

// ------------------------------------------------------ gradient surgery --

inline std::vector<double> pcgrad_project(std::span<const double> g_dpc, std::span<const double> g_id) {
  if (g_dpc.size() != g_id.size()) throw std::invalid_argument("pcgrad_project: gradient lengths differ");
  double dot = 0, nn = 0;
  for (std::size_t i = 0; i < g_id.size(); ++i) {
    dot += g_dpc[i] * g_id[i];
    nn += g_id[i] * g_id[i];
  }
  double c = std::min(0.0, dot) / (nn + 1e-12);
  std::vector<double> out(g_dpc.begin(), g_dpc.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * g_id[i];
  return out;
}

inline std::vector<double> combine_model_gradient(std::span<const double> g_id, std::span<const double> g_tilde, double beta) {
  if (g_id.size() != g_tilde.size()) throw std::invalid_argument("combine_model_gradient: gradient lengths differ");
  std::vector<double> out(g_id.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g_id[i] + beta * g_tilde[i];
  return out;
}

/// Advances one level when the latest validation loss is below the one
/// `patience` epochs earlier and the current level has run for at least
/// `patience` epochs.
inline std::size_t beta_step(std::size_t level, std::size_t n_levels, std::span<const double> val_history,
                             std::size_t epochs_at_level, std::size_t patience) {
  if (level + 1 >= n_levels) return level;
  if (epochs_at_level < patience || val_history.size() <= patience) return level;
  double now = val_history.back(), then = val_history[val_history.size() - 1 - patience];
  return now < then ? level + 1 : level;
}

// -------------------------------------------------------------- optimizer --

struct Adam {
  Adam() = default;
  explicit Adam(double rate) : lr(rate) {}

  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  std::uint64_t t = 0;

  void step(std::vector<double>& theta, std::span<const double> grad) {
    if (grad.size() != theta.size()) throw std::invalid_argument("Adam: gradient length differs from parameters");
    if (m.empty()) {
      m.assign(theta.size(), 0.0);
      v.assign(theta.size(), 0.0);
    }
    ++t;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1 - beta2) * grad[i] * grad[i];
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

template <class Params>
void adam_update(Params& p, Adam& opt, std::span<const double> grad) {
  auto theta = flat_values(p);
  opt.step(theta, grad);
  set_flat_values(p, theta);
}

// ------------------------------------------------------------------- log --

/// Line-delimited JSON event records, kept in memory and optionally streamed.
class EventLog {
 public:
  explicit EventLog(std::ostream* out = nullptr) : out_(out) {}

  void write(json record) {
    if (out_) *out_ << record.dump() << '\n';
    records_.push_back(std::move(record));
  }
  const std::vector<json>& records() const { return records_; }
  std::size_t count(const std::string& event) const {
    return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(),
                                                  [&](const json& r) { return r.value("event", "") == event; }));
  }

 private:
  std::ostream* out_;
  std::vector<json> records_;
};

// ------------------------------------------------------------- warm start --

/// Mean squared-ReLU penalty of one-step predicted states against the box.
inline Tensor prediction_penalty(const TransitionBatch& b, const DynamicsParams& dyn, const ConstraintBox& box) {
  Tensor pred = ad::slice(dynamics_forward(b.state, b.action, b.aux, dyn), 0, dyn.config.n_state);
  return ad::scale(squared_violation(pred, box.x_low, box.x_high), 1.0 / static_cast<double>(b.size()));
}

struct WarmStartOptions {
  double lr = 1e-4;
  std::size_t batch = 256;
  std::size_t patience = 10;
  double tolerance = 0.01;
  std::size_t max_epochs = 200;
  /// Adds λ_cons·penalty to λ_ID·L_ID when set (constrained model fit).
  std::optional<ConstraintBox> penalty_box;
  LossWeights weights;
};

struct WarmStartResult {
  DynamicsParams params;
  std::size_t epochs = 0;
  double initial_val = 0;
  double best_val = 0;
  std::vector<double> val_history;
};

inline double warm_start_objective(const TransitionBatch& b, const DynamicsParams& dyn, const WarmStartOptions& o) {
  ad::NoTapeScope off;
  double l = identification_loss(b, dyn).item();
  if (!o.penalty_box) return l;
  return o.weights.id * l + o.weights.cons * prediction_penalty(b, dyn, *o.penalty_box).item();
}

/// Model-only training. An epoch is one shuffled pass over the training pool;
/// training stops once the validation objective has not dropped below
/// best·(1 − tolerance) for `patience` consecutive epochs.
inline WarmStartResult warm_start(const DynamicsParams& init, const TrainingData& data, const WarmStartOptions& o,
                                  std::mt19937_64& rng, EventLog* log = nullptr, const std::string& stage = "warm_start") {
  if (data.train.size() == 0 || data.val.size() == 0) throw std::invalid_argument("warm_start: empty dataset");
  if (o.patience < 1) throw std::invalid_argument("warm_start: patience must be >= 1");
  WarmStartResult res;
  res.params = init;
  auto val = data.val.all();
  Adam opt{o.lr};
  DynamicsParams cur = init;
  double best = warm_start_objective(val, cur, o);
  res.initial_val = best;
  std::size_t stale = 0;
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  while (res.epochs < o.max_epochs && stale < o.patience) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += o.batch) {
      std::span<const std::size_t> idx(order.data() + s, std::min(o.batch, order.size() - s));
      auto b = data.train.gather(idx);
      ad::Tape tape;
      std::vector<double> g;
      {
        ad::TapeScope scope(tape);
        auto bound = bind(tape, cur);
        Tensor loss = identification_loss(b, bound);
        if (o.penalty_box)
          loss = ad::add(ad::scale(loss, o.weights.id), ad::scale(prediction_penalty(b, bound, *o.penalty_box), o.weights.cons));
        g = flat_gradient(ad::backward(loss), bound);
      }
      adam_update(cur, opt, g);
    }
    ++res.epochs;
    double v = warm_start_objective(val, cur, o);
    res.val_history.push_back(v);
    if (v < best * (1.0 - o.tolerance)) {
      best = v;
      res.params = cur;
      stale = 0;
    } else {
      if (v < best) {
        best = v;
        res.params = cur;
      }
      ++stale;
    }
    if (log) log->write({{"event", "epoch"}, {"stage", stage}, {"epoch", res.epochs}, {"val_loss", v}, {"best_val", best}});
  }
  res.best_val = best;
  return res;
}

// ---------------------------------------------------------- joint training --

enum class Tightening { none, online };

struct TrainState {
  DynamicsParams dyn;
  PolicyParams pol;
  Adam opt_model, opt_policy;
  std::size_t beta_index = 0;
  std::size_t epochs_at_level = 0;
  std::size_t epoch = 0;
  std::size_t batches = 0;
  std::vector<double> val_history;
  double best_val = std::numeric_limits<double>::infinity();
  DynamicsParams best_dyn;
  PolicyParams best_pol;
  std::optional<TubeCertificate> certificate;
  std::optional<TighteningSchedule> schedule;
  std::optional<TighteningSchedule> best_schedule;
  std::optional<TubeCertificate> best_certificate;
  std::size_t certificate_reuses = 0;
  std::size_t diverged_rows = 0;
  std::size_t skipped_batches = 0;
  std::mt19937_64 rng;
  EventLog* log = nullptr;

  void record(json r) {
    if (log) log->write(std::move(r));
  }
};

/// Fixed validation set for model selection and the β rule.
struct Validation {
  ScenarioBatch scenarios;
  TransitionBatch transitions;
};

inline Validation make_validation(const TrainingData& data, const TrainConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Validation v;
  v.scenarios = sample_scenarios(cfg.val_scenarios, cfg.horizon, cfg.box, data.train, cfg.tariff, cfg.dt_hours, rng);
  std::vector<std::size_t> idx(std::min(cfg.val_transitions, data.val.size()));
  std::uniform_int_distribution<std::size_t> pick(0, data.val.size() - 1);
  if (idx.size() == data.val.size())
    std::iota(idx.begin(), idx.end(), 0);
  else
    for (auto& i : idx) i = pick(rng);
  v.transitions = data.val.gather(idx);
  return v;
}

inline std::vector<ConstraintBox> step_boxes(const TrainConfig& cfg, const std::optional<TighteningSchedule>& sched) {
  if (sched) return tightened_sets(cfg.box, *sched).boxes;
  return std::vector<ConstraintBox>(cfg.horizon, cfg.box);
}

inline std::optional<std::vector<double>> policy_eps(const TrainConfig& cfg, Tightening mode,
                                                     const std::optional<TighteningSchedule>& sched) {
  if (mode == Tightening::none) return std::nullopt;
  if (sched) return sched->extended(2 * cfg.horizon - 1);
  return std::vector<double>(2 * cfg.horizon - 1, 0.0);
}

struct LossValues {
  double id = 0, cons = 0, obj = 0, composite = 0;
};

inline LossValues evaluate(const TrainState& s, const Validation& v, const TrainConfig& cfg, Tightening mode) {
  ad::NoTapeScope off;
  auto eps = policy_eps(cfg, mode, s.schedule);
  LossValues l;
  l.id = identification_loss(v.transitions, s.dyn).item();
  try {
    auto tr = rollout(v.scenarios, s.dyn, s.pol, cfg.horizon, eps ? &*eps : nullptr);
    l.cons = constraint_loss(tr, step_boxes(cfg, mode == Tightening::online ? s.schedule : std::nullopt)).item();
    l.obj = objective_loss(tr).item();
  } catch (const NonFiniteError&) {
    l.cons = l.obj = std::numeric_limits<double>::infinity();
  }
  l.composite = composite_loss(l.id, l.cons, l.obj, cfg.weights);
  return l;
}

/// Rows of `sc` whose nominal rollout stays finite.
inline std::vector<std::size_t> finite_rows(const ScenarioBatch& sc, const DynamicsParams& dyn, const PolicyParams& pol,
                                            std::size_t N, const std::vector<double>* eps) {
  ad::NoTapeScope off;
  std::vector<std::size_t> keep;
  for (std::size_t b = 0; b < sc.size(); ++b) {
    auto row = [&](const Tensor& t) {
      std::vector<double> v(t.data().begin() + static_cast<std::ptrdiff_t>(b * t.cols()),
                            t.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * t.cols()));
      return Tensor({1, t.cols()}, std::move(v));
    };
    ScenarioBatch one{row(sc.x0), row(sc.aux0), row(sc.prices)};
    try {
      rollout(one, dyn, pol, N, eps);
      keep.push_back(b);
    } catch (const NonFiniteError&) {
    }
  }
  return keep;
}

inline ScenarioBatch subset(const ScenarioBatch& sc, std::span<const std::size_t> rows) {
  auto pick = [&](const Tensor& t) {
    std::size_t w = t.cols();
    std::vector<double> v(rows.size() * w);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * w), w, v.begin() + static_cast<std::ptrdiff_t>(r * w));
    return Tensor({rows.size(), w}, std::move(v));
  };
  return {pick(sc.x0), pick(sc.aux0), pick(sc.prices)};
}

/// Linearizes the model along a nominal rollout and builds a new certificate
/// and ε schedule. On failure the previous certificate stays in place.
inline void update_certificate(TrainState& s, const ScenarioBatch& sc, const TrainConfig& cfg) {
  std::size_t N = cfg.horizon, nx = cfg.model.n_state, nu = cfg.model.n_action;
  try {
    auto eps = policy_eps(cfg, Tightening::online, s.schedule);
    Trajectory nominal;
    {
      ad::NoTapeScope off;
      nominal = rollout(sc, s.dyn, s.pol, N, &*eps);
    }
    auto J = batch_jacobians(s.dyn, nominal);
    Eigen::MatrixXd A = conservative_bound(J.A), B = conservative_bound(J.B);
    auto cert = build_certificate(A, B, cfg.q_weight * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(nx), static_cast<Eigen::Index>(nx)),
                                  cfg.r_weight * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(nu), static_cast<Eigen::Index>(nu)));
    auto sched = tightening_schedule(cfg.epsilon, cert.rho, N);
    tightened_sets(cfg.box, sched);
    s.certificate = std::move(cert);
    s.schedule = std::move(sched);
  } catch (const std::exception& e) {
    ++s.certificate_reuses;
    s.record({{"event", "certificate_reused"}, {"epoch", s.epoch}, {"batch", s.batches}, {"reason", e.what()},
              {"have_previous", s.certificate.has_value()}});
  }
}

struct JointMode {
  bool update_model = true;
  Tightening tightening = Tightening::none;
};

/// One optimizer step on a fresh scenario batch and an independent
/// identification batch of the same size.
inline void joint_batch(TrainState& s, const TrainingData& data, const TrainConfig& cfg, JointMode mode) {
  std::size_t N = cfg.horizon;
  auto sc = sample_scenarios(cfg.batch, N, cfg.box, data.train, cfg.tariff, cfg.dt_hours, s.rng);
  auto idb = data.train.sample(cfg.batch, s.rng);
  if (mode.tightening == Tightening::online) update_certificate(s, sc, cfg);
  auto eps = policy_eps(cfg, mode.tightening, s.schedule);
  auto boxes = step_boxes(cfg, mode.tightening == Tightening::online ? s.schedule : std::nullopt);

  std::vector<double> g_id, g_dpc_f, g_pol;
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      ad::Tape tape;
      ad::TapeScope scope(tape);
      auto bf = bind(tape, s.dyn);
      auto bp = bind(tape, s.pol);
      auto tr = rollout(sc, bf, bp, N, eps ? &*eps : nullptr);
      Tensor dpc = ad::add(ad::scale(constraint_loss(tr, boxes), cfg.weights.cons), ad::scale(objective_loss(tr), cfg.weights.obj));
      auto gd = ad::backward(dpc);
      g_pol = flat_gradient(gd, bp);
      if (mode.update_model) {
        g_dpc_f = flat_gradient(gd, bf);
        Tensor l_id = ad::scale(identification_loss(idb, bf), cfg.weights.id);
        g_id = flat_gradient(ad::backward(l_id), bf);
      }
      break;
    } catch (const NonFiniteError& e) {
      if (attempt == 1) {
        ++s.skipped_batches;
        s.record({{"event", "batch_skipped"}, {"epoch", s.epoch}, {"batch", s.batches}, {"reason", e.what()}});
        ++s.batches;
        return;
      }
      auto keep = finite_rows(sc, s.dyn, s.pol, N, eps ? &*eps : nullptr);
      std::size_t dropped = sc.size() - keep.size();
      s.diverged_rows += dropped;
      s.record({{"event", "diverged_rows_dropped"}, {"epoch", s.epoch}, {"batch", s.batches}, {"dropped", dropped}});
      if (keep.empty()) {
        ++s.skipped_batches;
        ++s.batches;
        return;
      }
      sc = subset(sc, keep);
    }
  }
  adam_update(s.pol, s.opt_policy, g_pol);
  if (mode.update_model) {
    auto g_tilde = pcgrad_project(g_dpc_f, g_id);
    adam_update(s.dyn, s.opt_model, combine_model_gradient(g_id, g_tilde, cfg.beta_levels[s.beta_index]));
  }
  ++s.batches;
}

inline LossValues joint_epoch(TrainState& s, const TrainingData& data, const Validation& val, const TrainConfig& cfg,
                              JointMode mode) {
  for (std::size_t b = 0; b < cfg.batches_per_epoch; ++b) joint_batch(s, data, cfg, mode);
  ++s.epoch;
  auto l = evaluate(s, val, cfg, mode.tightening);
  s.val_history.push_back(l.composite);
  if (l.composite < s.best_val) {
    s.best_val = l.composite;
    s.best_dyn = s.dyn;
    s.best_pol = s.pol;
    s.best_schedule = s.schedule;
    s.best_certificate = s.certificate;
  }
  double beta = cfg.beta_levels[s.beta_index];
  json rec{{"event", "epoch"},
           {"stage", mode.update_model ? "joint" : "policy"},
           {"epoch", s.epoch},
           {"l_id", l.id},
           {"l_cons", l.cons},
           {"l_obj", l.obj},
           {"val_composite", l.composite},
           {"beta", mode.update_model ? json(beta) : json(nullptr)},
           {"rho", s.certificate ? json(s.certificate->rho) : json(nullptr)},
           {"certificate_reuses", s.certificate_reuses}};
  s.record(std::move(rec));
  if (mode.update_model) {
    ++s.epochs_at_level;
    auto next = beta_step(s.beta_index, cfg.beta_levels.size(), s.val_history, s.epochs_at_level, cfg.patience);
    if (next != s.beta_index) {
      s.beta_index = next;
      s.epochs_at_level = 0;
      s.record({{"event", "beta_advanced"}, {"epoch", s.epoch}, {"beta", cfg.beta_levels[next]}});
    }
  }
  return l;
}

// -------------------------------------------------------------- variants --

inline PolicyDims policy_dims_for(const TrainConfig& cfg, Variant v) {
  std::size_t w = cfg.model.n_state + cfg.model.n_aux + cfg.horizon;
  if (v == Variant::e2e_g) w += cfg.horizon;
  return {w, cfg.policy_hidden, cfg.model.n_action};
}

inline PolicyParams initial_policy(const TrainConfig& cfg, Variant v, const TrainingData& data) {
  auto pol = init_policy(cfg.seed * 1000003 + 17, policy_dims_for(cfg, v));
  pol.layers.back().bias = Tensor::full({cfg.model.n_action}, cfg.initial_setpoint);
  fit_policy_normalization(pol, data.train, cfg.tariff, cfg.dt_hours, cfg.horizon, v == Variant::e2e_g, cfg.epsilon);
  return pol;
}

inline DynamicsParams initial_dynamics(const TrainConfig& cfg, const TrainingData& data) {
  auto dyn = init_dynamics(cfg.seed * 1000003 + 5, cfg.model);
  fit_normalization(dyn, data.train);
  return dyn;
}

inline WarmStartOptions warm_start_options(const TrainConfig& cfg, bool penalty) {
  WarmStartOptions o;
  o.lr = cfg.lr_warm_start;
  o.batch = cfg.batch;
  o.patience = cfg.patience;
  o.tolerance = cfg.tolerance;
  o.max_epochs = cfg.max_warm_start_epochs;
  o.weights = cfg.weights;
  if (penalty) o.penalty_box = cfg.box;
  return o;
}

/// Up to `count` evenly spaced aux rows of a pool.
inline std::vector<std::vector<double>> aux_pool(const TransitionPool& pool, std::size_t count) {
  std::vector<std::vector<double>> out;
  std::size_t n = pool.size(), take = std::min(count, n);
  for (std::size_t i = 0; i < take; ++i) {
    std::size_t r = i * n / take;
    out.emplace_back(pool.aux.begin() + static_cast<std::ptrdiff_t>(r * pool.n_aux),
                     pool.aux.begin() + static_cast<std::ptrdiff_t>((r + 1) * pool.n_aux));
  }
  return out;
}

struct TrainResult {
  Checkpoint checkpoint;
  WarmStartResult warm;
  std::size_t joint_epochs = 0;
  double best_val = 0;
  std::size_t final_beta_index = 0;
  std::size_t certificate_reuses = 0;
};

/// Warm-started model for a seed, reusable across the E2E variants.
inline WarmStartResult warm_start_model(const TrainConfig& cfg, const TrainingData& data, Variant v, EventLog* log) {
  std::mt19937_64 rng(cfg.seed * 7919 + 1);
  return warm_start(initial_dynamics(cfg, data), data, warm_start_options(cfg, v == Variant::dpc_c), rng, log,
                    v == Variant::dpc_c ? "model_fit" : "warm_start");
}

inline TrainResult train_variant(Variant v, const TrainingData& data, const TrainConfig& cfg, EventLog* log = nullptr,
                                 const WarmStartResult* warm = nullptr) {
  cfg.validate();
  if (data.train.n_state != cfg.model.n_state || data.train.n_action != cfg.model.n_action ||
      data.train.n_aux != cfg.model.n_aux)
    throw std::invalid_argument("dataset dims differ from the model config");
  TrainResult res;
  res.warm = warm ? *warm : warm_start_model(cfg, data, v, log);

  TrainState s;
  s.dyn = res.warm.params;
  s.pol = initial_policy(cfg, v, data);
  s.opt_model = Adam{cfg.lr_model};
  s.opt_policy = Adam{cfg.lr_policy};
  s.rng.seed(cfg.seed * 104729 + 3);
  s.log = log;
  s.best_dyn = s.dyn;
  s.best_pol = s.pol;
  auto val = make_validation(data, cfg, cfg.seed * 31 + 7);

  JointMode mode;
  mode.update_model = v != Variant::dpc_c;
  mode.tightening = v == Variant::e2e_g ? Tightening::online : Tightening::none;
  if (mode.tightening == Tightening::online) {
    update_certificate(s, val.scenarios, cfg);
    s.best_schedule = s.schedule;
    s.best_certificate = s.certificate;
  }
  auto l0 = evaluate(s, val, cfg, mode.tightening);
  s.record({{"event", "start"}, {"variant", variant_name(v)}, {"val_composite", l0.composite}, {"l_id", l0.id},
            {"l_cons", l0.cons}, {"l_obj", l0.obj}});
  s.best_val = l0.composite;
  for (std::size_t e = 0; e < cfg.epochs; ++e) joint_epoch(s, data, val, cfg, mode);

  res.joint_epochs = s.epoch;
  res.best_val = s.best_val;
  res.final_beta_index = s.beta_index;
  res.certificate_reuses = s.certificate_reuses;
  Checkpoint& c = res.checkpoint;
  c.variant = variant_name(v);
  c.policy = s.best_pol;
  c.dynamics = s.best_dyn;
  c.meta["horizon"] = cfg.horizon;
  c.meta["train_config"] = to_json(cfg);
  c.meta["best_val_composite"] = s.best_val;
  c.meta["aux_pool"] = aux_pool(data.train, 256);
  c.meta["day_prices"] = price_sequence(cfg.tariff, 0.0, static_cast<std::size_t>(std::llround(24.0 / cfg.dt_hours)), cfg.dt_hours);
  c.meta["warm_start_epochs"] = res.warm.epochs;
  if (mode.tightening == Tightening::online) {
    if (!s.best_schedule || !s.best_certificate) throw CertificateError("training produced no valid certificate");
    c.meta["schedule"] = to_json(*s.best_schedule);
    c.meta["certificate"] = to_json(*s.best_certificate);
    double wb = estimate_w_bound(data.val.all(), c.dynamics, cfg.w_bound_inflation);
    auto db = disturbance_bounds(*s.best_certificate, cfg.epsilon, cfg.box, wb);
    c.meta["w_bound"] = wb;
    c.meta["disturbance"] = {{"delta_loc", db.delta_loc}, {"w_hat", {db.w1, db.w2, db.w3}}, {"admissible", db.admissible}};
  }
  s.record({{"event", "done"}, {"variant", variant_name(v)}, {"best_val_composite", s.best_val}, {"epochs", s.epoch}});
  return res;
}

}  // namespace tubedpc
