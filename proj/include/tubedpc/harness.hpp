#pragma once

// Closed-loop deployment on the RC plant, bill / violation metrics, variant
// comparison and plot-ready CSV output.

#include "certification.hpp"
#include "plant.hpp"
#include "training.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace tubedpc {

struct RunConfig {
  double days = 3;
  double start_hour = 0;
  double initial_temp = 21.0;
  std::uint64_t weather_seed = 1;
  std::uint64_t noise_seed = 2;
  RCPlantConfig plant = RCPlantConfig::building();
  WeatherConfig weather;
  TOUTariff tariff = TOUTariff::winter();
  double comfort_low = 19.0, comfort_high = 24.0;
  bool online_tightening = false;

  std::size_t steps() const { return static_cast<std::size_t>(std::llround(days * 24.0 * 3600.0 / plant.dt)); }
  double dt_hours() const { return plant.dt / 3600.0; }

  void validate() const {
    if (!(days >= 1)) throw std::invalid_argument("run needs at least one simulated day");
    if (!(comfort_low < comfort_high)) throw std::invalid_argument("comfort band must satisfy low < high");
    plant.validate();
    tariff.validate();
  }
};

inline json to_json(const RunConfig& r) {
  return {{"days", r.days},
          {"start_hour", r.start_hour},
          {"initial_temp", r.initial_temp},
          {"weather_seed", r.weather_seed},
          {"noise_seed", r.noise_seed},
          {"plant", to_json(r.plant)},
          {"weather", to_json(r.weather)},
          {"tariff", r.tariff.periods},
          {"comfort_low", r.comfort_low},
          {"comfort_high", r.comfort_high},
          {"online_tightening", r.online_tightening}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig r;
  r.days = j.value("days", r.days);
  r.start_hour = j.value("start_hour", r.start_hour);
  r.initial_temp = j.value("initial_temp", r.initial_temp);
  r.weather_seed = j.value("weather_seed", r.weather_seed);
  r.noise_seed = j.value("noise_seed", r.noise_seed);
  if (j.contains("plant")) r.plant = plant_config_from_json(j.at("plant"));
  if (j.contains("weather")) r.weather = weather_config_from_json(j.at("weather"));
  if (j.contains("tariff")) r.tariff.periods = j.at("tariff").get<std::vector<TouPeriod>>();
  r.comfort_low = j.value("comfort_low", r.comfort_low);
  r.comfort_high = j.value("comfort_high", r.comfort_high);
  r.online_tightening = j.value("online_tightening", r.online_tightening);
  r.validate();
  return r;
}

/// Row k covers the interval [k, k+1): setpoints applied, energy used, its
/// price, and the zone temperatures measured at the end of the interval.
struct Trace {
  std::vector<double> time_h;  // end of the interval, hours since start
  std::vector<std::vector<double>> temps;
  std::vector<std::vector<double>> setpoints;
  std::vector<double> energy_kwh;
  std::vector<double> price;
  std::vector<double> ambient;
  std::size_t clamped_steps = 0;
  double dt_hours = 0.25;

  std::size_t steps() const { return energy_kwh.size(); }
};

struct Metrics {
  double electricity_bill = 0;       // EUR
  double temperature_violation = 0;  // degC·step
  std::vector<double> bill_trace;
  std::vector<double> violation_trace;
};

inline double step_violation(std::span<const double> temps, double low, double high) {
  double v = 0;
  for (double t : temps) v += std::max(0.0, t - high) + std::max(0.0, low - t);
  return v;
}

inline Metrics compute_metrics(const Trace& tr, double low = 19.0, double high = 24.0) {
  Metrics m;
  for (std::size_t k = 0; k < tr.steps(); ++k) {
    double b = tr.energy_kwh[k] * tr.price[k];
    double v = step_violation(tr.temps[k], low, high);
    m.bill_trace.push_back(b);
    m.violation_trace.push_back(v);
    m.electricity_bill += b;
    m.temperature_violation += v;
  }
  return m;
}

/// Bill subtotal per tariff period, keyed by period name.
inline std::map<std::string, double> bill_by_period(const Trace& tr, const TOUTariff& t, double start_hour = 0) {
  std::map<std::string, double> out;
  for (const auto& p : t.periods) out[p.name] = 0.0;
  for (std::size_t k = 0; k < tr.steps(); ++k) {
    double hour = start_hour + static_cast<double>(k) * tr.dt_hours;
    out[t.periods[t.period_index(hour)].name] += tr.energy_kwh[k] * tr.price[k];
  }
  return out;
}

struct Observation {
  std::size_t step = 0;
  std::vector<double> state;   // measured zone temperatures
  std::vector<double> aux;     // Fa_E_All, Fa_E_Appl, Bd_T_HP_return
  std::vector<double> prices;  // τ_k .. τ_{k+N-1}
};

using Controller = std::function<std::vector<double>(const Observation&)>;

inline Trace deploy(const Controller& ctl, const RunConfig& run, std::size_t price_horizon) {
  run.validate();
  std::size_t K = run.steps();
  auto amb = ambient_trace(K + 1, run.start_hour, run.plant.dt, run.weather, run.weather_seed);
  Plant plant(run.plant, initial_state(run.plant, run.initial_temp, amb[0], run.start_hour), amb, run.noise_seed);
  Trace tr;
  tr.dt_hours = run.dt_hours();
  for (std::size_t k = 0; k < K; ++k) {
    const auto& s = plant.state();
    Observation ob{k, s.temps, {s.energy_total, s.energy_appliance, s.hp_return},
                   price_sequence(run.tariff, run.start_hour + static_cast<double>(k) * tr.dt_hours, price_horizon, tr.dt_hours)};
    auto u = ctl(ob);
    double t_out = plant.ambient();
    auto r = plant.step(u);
    if (r.clamped) ++tr.clamped_steps;
    std::vector<double> applied(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) applied[i] = std::clamp(u[i], run.plant.setpoint_low, run.plant.setpoint_high);
    tr.time_h.push_back(static_cast<double>(k + 1) * tr.dt_hours);
    tr.temps.push_back(r.state.temps);
    tr.setpoints.push_back(std::move(applied));
    tr.energy_kwh.push_back(r.energy_kwh);
    tr.price.push_back(ob.prices[0]);
    tr.ambient.push_back(t_out);
  }
  return tr;
}

/// Reference controller: every thermostat at a fixed setpoint.
inline Controller thermostat_controller(double setpoint, std::size_t n_thermostats) {
  return [=](const Observation&) { return std::vector<double>(n_thermostats, setpoint); };
}

/// ε_0..ε_{N-1} from a tube certificate built along a virtual rollout started
/// at the current measurement; nullopt when the certificate fails.
inline std::optional<std::vector<double>> online_schedule(const Checkpoint& c, const Observation& ob,
                                                          const std::vector<double>& fallback) {
  auto cfg = train_config_from_json(c.meta.at("train_config"));
  std::size_t N = cfg.horizon;
  auto prices = ob.prices;
  prices.resize(2 * N - 1, prices.back());
  ScenarioBatch sc{Tensor({1, ob.state.size()}, ob.state), Tensor({1, ob.aux.size()}, ob.aux),
                   Tensor({1, prices.size()}, prices)};
  try {
    auto eps = fallback;
    eps.resize(2 * N - 1, fallback.back());
    Trajectory nominal;
    {
      ad::NoTapeScope off;
      nominal = rollout(sc, c.dynamics, c.policy, N, &eps);
    }
    auto J = batch_jacobians(c.dynamics, nominal);
    auto nx = static_cast<Eigen::Index>(cfg.model.n_state), nu = static_cast<Eigen::Index>(cfg.model.n_action);
    auto cert = build_certificate(conservative_bound(J.A), conservative_bound(J.B), cfg.q_weight * Eigen::MatrixXd::Identity(nx, nx),
                                  cfg.r_weight * Eigen::MatrixXd::Identity(nu, nu));
    return tightening_schedule(cfg.epsilon, cert.rho, N).extended(N);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

/// Receding-horizon use of a trained policy: measured outputs, the next N
/// prices and, for the guaranteed variant, ε_0..ε_{N-1}.
inline Controller policy_controller(const Checkpoint& c, bool online_tightening = false) {
  std::size_t N = c.meta.at("horizon");
  std::optional<std::vector<double>> eps;
  if (c.meta.contains("schedule")) eps = schedule_from_json(c.meta.at("schedule")).extended(N);
  std::size_t expected = c.dynamics.config.n_state + c.dynamics.config.n_aux + N + (eps ? N : 0);
  if (c.policy.input_dim != expected)
    throw ShapeError("checkpoint policy input width " + std::to_string(c.policy.input_dim) + " does not match variant '" +
                     c.variant + "' (expected " + std::to_string(expected) + ")");
  return [c, eps, N, online_tightening](const Observation& ob) {
    ad::NoTapeScope off;
    std::vector<double> sd = ob.state;
    sd.insert(sd.end(), ob.aux.begin(), ob.aux.end());
    PolicyInput in{Tensor({1, sd.size()}, sd), Tensor({1, N}, std::vector<double>(ob.prices.begin(), ob.prices.begin() + static_cast<std::ptrdiff_t>(N))),
                   std::nullopt};
    if (eps) {
      auto e = *eps;
      if (online_tightening)
        if (auto fresh = online_schedule(c, ob, *eps)) e = *fresh;
      in.tightening = Tensor({1, N}, e);
    }
    return policy_forward(in, c.policy).to_vector();
  };
}

inline json summary_json(const std::string& variant, const Trace& tr, const RunConfig& run) {
  auto m = compute_metrics(tr, run.comfort_low, run.comfort_high);
  return {{"variant", variant},
          {"electricity_bill_eur", m.electricity_bill},
          {"temperature_violation_degC_step", m.temperature_violation},
          {"steps", tr.steps()},
          {"days", run.days},
          {"weather_seed", run.weather_seed},
          {"noise_seed", run.noise_seed},
          {"clamped_steps", tr.clamped_steps},
          {"bill_by_period_eur", bill_by_period(tr, run.tariff, run.start_hour)}};
}

// ----------------------------------------------------------------- files --

inline void write_temperature_csv(const std::string& path, const Trace& tr, double low, double high) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  std::size_t nz = tr.temps.empty() ? 0 : tr.temps[0].size();
  os << "time_h";
  auto cols = dataset_columns(nz, 0);
  for (std::size_t i = 0; i < nz; ++i) os << ',' << cols[i];
  os << ",comfort_low,comfort_high\n";
  for (std::size_t k = 0; k < tr.steps(); ++k) {
    os << format_double(tr.time_h[k]);
    for (double t : tr.temps[k]) os << ',' << format_double(t);
    os << ',' << format_double(low) << ',' << format_double(high) << '\n';
  }
}

inline void write_power_csv(const std::string& path, const Trace& tr) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  std::size_t nu = tr.setpoints.empty() ? 0 : tr.setpoints[0].size();
  os << "time_h,energy_kwh,power_kw,price_eur_per_kwh,ambient_degC";
  for (std::size_t i = 0; i < nu; ++i) os << ",P" << i + 1;
  os << '\n';
  for (std::size_t k = 0; k < tr.steps(); ++k) {
    os << format_double(static_cast<double>(k) * tr.dt_hours) << ',' << format_double(tr.energy_kwh[k]) << ','
       << format_double(tr.energy_kwh[k] / tr.dt_hours) << ',' << format_double(tr.price[k]) << ','
       << format_double(tr.ambient[k]);
    for (double u : tr.setpoints[k]) os << ',' << format_double(u);
    os << '\n';
  }
}

namespace detail {

inline std::vector<std::vector<double>> read_numeric_csv(const std::string& path, std::vector<std::string>& header) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(is, line);
  header.clear();
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    if (r.size() != header.size()) throw std::runtime_error(path + ": row width differs from header");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace detail

/// Rebuilds the metric-relevant part of a trace from the two CSV files.
inline Trace read_trace_csv(const std::string& temperature_csv, const std::string& power_csv, double dt_hours) {
  std::vector<std::string> ht, hp;
  auto t = detail::read_numeric_csv(temperature_csv, ht);
  auto p = detail::read_numeric_csv(power_csv, hp);
  if (t.size() != p.size()) throw std::runtime_error("temperature and power CSVs differ in length");
  Trace tr;
  tr.dt_hours = dt_hours;
  std::size_t nz = ht.size() - 3, nu = hp.size() - 5;
  for (std::size_t k = 0; k < t.size(); ++k) {
    tr.time_h.push_back(t[k][0]);
    tr.temps.emplace_back(t[k].begin() + 1, t[k].begin() + 1 + static_cast<std::ptrdiff_t>(nz));
    tr.energy_kwh.push_back(p[k][1]);
    tr.price.push_back(p[k][3]);
    tr.ambient.push_back(p[k][4]);
    tr.setpoints.emplace_back(p[k].begin() + 5, p[k].begin() + 5 + static_cast<std::ptrdiff_t>(nu));
  }
  return tr;
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(2) << '\n';
}

inline json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return json::parse(is);
}

/// temperature.csv, power.csv and summary.json under `dir`.
inline json report(const std::string& dir, const std::string& variant, const Trace& tr, const RunConfig& run) {
  std::filesystem::create_directories(dir);
  write_temperature_csv((std::filesystem::path(dir) / "temperature.csv").string(), tr, run.comfort_low, run.comfort_high);
  write_power_csv((std::filesystem::path(dir) / "power.csv").string(), tr);
  auto s = summary_json(variant, tr, run);
  write_json((std::filesystem::path(dir) / "summary.json").string(), s);
  return s;
}

struct ComparisonRow {
  std::string variant;
  double bill = 0;
  double violation = 0;
};

/// Deploys every checkpoint on identical plant and weather seeds.
inline std::vector<ComparisonRow> compare_variants(const std::vector<std::pair<std::string, Checkpoint>>& entries,
                                                   const RunConfig& run, std::vector<Trace>* traces = nullptr) {
  std::vector<ComparisonRow> rows;
  for (const auto& [name, ckpt] : entries) {
    auto tr = deploy(policy_controller(ckpt, run.online_tightening), run, ckpt.meta.at("horizon").get<std::size_t>());
    auto m = compute_metrics(tr, run.comfort_low, run.comfort_high);
    rows.push_back({name, m.electricity_bill, m.temperature_violation});
    if (traces) traces->push_back(std::move(tr));
  }
  return rows;
}

inline void write_comparison(const std::string& csv_path, const std::string& json_path, const std::vector<ComparisonRow>& rows) {
  std::ofstream os(csv_path);
  if (!os) throw std::runtime_error("cannot write " + csv_path);
  os << "variant,electricity_bill_eur,temperature_violation_degC_step\n";
  json arr = json::array();
  for (const auto& r : rows) {
    os << r.variant << ',' << format_double(r.bill) << ',' << format_double(r.violation) << '\n';
    arr.push_back({{"variant", r.variant}, {"electricity_bill_eur", r.bill}, {"temperature_violation_degC_step", r.violation}});
  }
  write_json(json_path, arr);
}

}  // namespace tubedpc
