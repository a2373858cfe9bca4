#pragma once

// Command implementations behind the tube-dpc CLI, usable without it.

#include "harness.hpp"

namespace tubedpc {

struct DataConfig {
  double days = 30;
  std::uint64_t seed = 11;
  double start_hour = 0;
  ExcitationConfig excitation;
};

/// Top-level config file: shared plant and weather, plus one section per
/// command family.
struct AppConfig {
  RCPlantConfig plant = RCPlantConfig::building();
  WeatherConfig weather;
  DataConfig data;
  TrainConfig training;
  CertConfig certification;
  std::uint64_t certification_seed = 2024;
  RunConfig run;
  std::size_t inspect_scenarios = 256;
  std::size_t inspect_samples = 1000;
};

inline AppConfig app_config_from_json(const json& j) {
  AppConfig a;
  if (j.contains("plant")) a.plant = plant_config_from_json(j.at("plant"));
  if (j.contains("weather")) a.weather = weather_config_from_json(j.at("weather"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    a.data.days = d.value("days", a.data.days);
    a.data.seed = d.value("seed", a.data.seed);
    a.data.start_hour = d.value("start_hour", a.data.start_hour);
    if (d.contains("excitation")) a.data.excitation = excitation_config_from_json(d.at("excitation"));
  }
  if (j.contains("training")) a.training = train_config_from_json(j.at("training"));
  if (j.contains("certification")) {
    const auto& c = j.at("certification");
    a.certification.m_val = c.value("m_val", a.certification.m_val);
    a.certification.delta = c.value("delta", a.certification.delta);
    a.certification.mu_bound = c.value("mu_bound", a.certification.mu_bound);
    a.certification_seed = c.value("seed", a.certification_seed);
    a.certification.validate();
  }
  json run = j.value("run", json::object());
  if (!run.contains("plant")) run["plant"] = to_json(a.plant);
  if (!run.contains("weather")) run["weather"] = to_json(a.weather);
  a.run = run_config_from_json(run);
  if (j.contains("inspect")) {
    a.inspect_scenarios = j.at("inspect").value("scenarios", a.inspect_scenarios);
    a.inspect_samples = j.at("inspect").value("samples", a.inspect_samples);
  }
  return a;
}

inline AppConfig load_app_config(const std::string& path) {
  if (path.empty()) return app_config_from_json(json::object());
  return app_config_from_json(read_json(path));
}

inline Dataset generate_data(const AppConfig& a, std::uint64_t seed) {
  auto steps = static_cast<std::size_t>(std::llround(a.data.days * 24.0 * 3600.0 / a.plant.dt));
  return generate_dataset(a.plant, a.weather, a.data.excitation, steps, seed, a.data.start_hour);
}

inline TrainResult train(Variant v, const AppConfig& a, const Dataset& d, std::uint64_t seed, EventLog* log) {
  auto cfg = a.training;
  cfg.seed = seed;
  return train_variant(v, prepare_data(d, cfg.val_fraction), cfg, log);
}

struct CheckpointContext {
  TrainConfig config;
  std::size_t horizon = 0;
  std::vector<std::vector<double>> aux_pool;
  std::vector<double> day_prices;
  std::optional<TighteningSchedule> schedule;
};

inline CheckpointContext checkpoint_context(const Checkpoint& c) {
  CheckpointContext x;
  x.config = train_config_from_json(c.meta.at("train_config"));
  x.horizon = c.meta.at("horizon");
  x.aux_pool = c.meta.at("aux_pool").get<std::vector<std::vector<double>>>();
  x.day_prices = c.meta.at("day_prices").get<std::vector<double>>();
  if (c.meta.contains("schedule")) x.schedule = schedule_from_json(c.meta.at("schedule"));
  return x;
}

/// Virtual-rollout certification of a checkpoint against the original box.
inline CertReport certify_checkpoint(const Checkpoint& c, const CertConfig& cfg, std::uint64_t seed) {
  auto ctx = checkpoint_context(c);
  auto sc = certification_scenarios(cfg.m_val, ctx.horizon, ctx.config.box, ctx.aux_pool, ctx.day_prices, seed);
  std::optional<std::vector<double>> eps;
  if (ctx.schedule) eps = ctx.schedule->extended(2 * ctx.horizon - 1);
  auto r = certify(c.dynamics, c.policy, sc, ctx.horizon, ctx.config.box, eps, cfg);
  r.extra = {{"variant", c.variant},
             {"seed", seed},
             {"initial_state_distribution", "uniform on the state box"},
             {"x_low", ctx.config.box.x_low},
             {"x_high", ctx.config.box.x_high},
             {"u_low", ctx.config.box.u_low},
             {"u_high", ctx.config.box.u_high},
             {"rollouts", "learned model"}};
  return r;
}

/// Certificate of the checkpoint's model linearized along closed-loop virtual
/// rollouts, with its schedule, tightened boxes and numerical checks.
inline json tube_inspect(const Checkpoint& c, const AppConfig& a, std::uint64_t seed) {
  auto ctx = checkpoint_context(c);
  std::size_t N = ctx.horizon;
  const auto& cfg = ctx.config;
  auto sc = certification_scenarios(a.inspect_scenarios, N, cfg.box, ctx.aux_pool, ctx.day_prices, seed);
  std::optional<std::vector<double>> eps;
  if (ctx.schedule) eps = ctx.schedule->extended(2 * N - 1);
  Trajectory nominal;
  {
    ad::NoTapeScope off;
    nominal = rollout(sc, c.dynamics, c.policy, N, eps ? &*eps : nullptr);
  }
  auto J = batch_jacobians(c.dynamics, nominal);
  auto nx = static_cast<Eigen::Index>(cfg.model.n_state), nu = static_cast<Eigen::Index>(cfg.model.n_action);
  auto cert = build_certificate(conservative_bound(J.A), conservative_bound(J.B), cfg.q_weight * Eigen::MatrixXd::Identity(nx, nx),
                                cfg.r_weight * Eigen::MatrixXd::Identity(nu, nu));
  auto sched = tightening_schedule(cfg.epsilon, cert.rho, N);
  auto sets = tightened_sets(cfg.box, sched);

  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Eigen::VectorXd> errs(a.inspect_samples, Eigen::VectorXd(nx));
  for (auto& e : errs)
    for (Eigen::Index i = 0; i < nx; ++i) e(i) = g(rng);
  double ratio = verify_contraction(cert.A, cert.B, cert.K, cert.P, cert.rho, errs);

  json boxes = json::array();
  for (const auto& b : sets.boxes)
    boxes.push_back({{"x_low", b.x_low}, {"x_high", b.x_high}, {"u_low", b.u_low}, {"u_high", b.u_high}});
  json out{{"variant", c.variant},
           {"seed", seed},
           {"linearization_points", J.A.size()},
           {"certificate", to_json(cert)},
           {"schedule", to_json(sched)},
           {"tightened_boxes", boxes},
           {"checks",
            {{"contraction_samples", a.inspect_samples},
             {"max_lyapunov_ratio", ratio},
             {"riccati_inequality_margin", riccati_inequality_margin(cert.A, cert.B, cert.K, cert.P, cert.Q, cert.R)}}}};
  if (c.meta.contains("w_bound")) {
    auto db = disturbance_bounds(cert, cfg.epsilon, cfg.box, c.meta.at("w_bound").get<double>());
    out["disturbance"] = {{"w_bound", c.meta.at("w_bound")}, {"delta_loc", db.delta_loc}, {"w_hat", {db.w1, db.w2, db.w3}},
                          {"admissible", db.admissible}};
  }
  if (c.meta.contains("certificate")) out["training_certificate"] = c.meta.at("certificate");
  return out;
}

}  // namespace tubedpc
