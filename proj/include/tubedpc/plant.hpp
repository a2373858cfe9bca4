#pragma once

// Multi-zone RC thermal network used as the ground-truth building: heat-pump
// heating driven by four thermostats, appliance load, synthetic winter
// weather, bounded process noise, a time-of-use tariff and identification
// dataset generation.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tubedpc {

using json = nlohmann::json;

struct SimulationFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ tariff --

struct TouPeriod {
  std::string name;
  double start_hour = 0;  // inclusive
  double end_hour = 24;   // exclusive; may be smaller than start (wraps midnight)
  double price = 0;       // EUR/kWh

  bool contains(double hour) const {
    if (start_hour < end_hour) return hour >= start_hour && hour < end_hour;
    return hour >= start_hour || hour < end_hour;
  }
  double length() const { return start_hour < end_hour ? end_hour - start_hour : 24.0 - start_hour + end_hour; }
};

struct TOUTariff {
  std::vector<TouPeriod> periods;

  /// Throws unless the periods cover the day exactly once.
  void validate() const {
    if (periods.empty()) throw std::invalid_argument("tariff has no periods");
    double total = 0;
    std::vector<double> cuts{0.0};
    for (const auto& p : periods) {
      if (p.start_hour < 0 || p.start_hour >= 24 || p.end_hour <= 0 || p.end_hour > 24 || p.start_hour == p.end_hour)
        throw std::invalid_argument("tariff period '" + p.name + "' has invalid hours");
      total += p.length();
      cuts.push_back(p.start_hour);
      cuts.push_back(std::fmod(p.end_hour, 24.0));
    }
    if (std::abs(total - 24.0) > 1e-9) throw std::invalid_argument("tariff periods do not span 24 hours");
    std::sort(cuts.begin(), cuts.end());
    cuts.push_back(24.0);
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      if (cuts[i + 1] - cuts[i] < 1e-12) continue;
      double probe = 0.5 * (cuts[i] + cuts[i + 1]);
      auto n = std::count_if(periods.begin(), periods.end(), [&](const TouPeriod& p) { return p.contains(probe); });
      if (n != 1) throw std::invalid_argument("tariff periods overlap or leave a gap");
    }
  }

  std::size_t period_index(double hour_of_day) const {
    double h = std::fmod(hour_of_day, 24.0);
    if (h < 0) h += 24.0;
    for (std::size_t i = 0; i < periods.size(); ++i)
      if (periods[i].contains(h)) return i;
    throw std::invalid_argument("hour not covered by tariff");
  }
  double price(double hour_of_day) const { return periods[period_index(hour_of_day)].price; }

  /// Off-Peak 22-06, Mid-Peak 06-16, High-Peak 16-19, Super-Peak 19-22.
  static TOUTariff winter() {
    return {{{"off_peak", 22, 6, 0.214}, {"mid_peak", 6, 16, 0.316}, {"high_peak", 16, 19, 0.502},
             {"super_peak", 19, 22, 0.605}}};
  }
  static TOUTariff flat(double price) { return {{{"flat", 0, 24, price}}}; }
};

inline double tou_price(double hour_of_day, const TOUTariff& tariff = TOUTariff::winter()) {
  return tariff.price(hour_of_day);
}

inline void to_json(json& j, const TouPeriod& p) {
  j = {{"name", p.name}, {"start_hour", p.start_hour}, {"end_hour", p.end_hour}, {"price", p.price}};
}
inline void from_json(const json& j, TouPeriod& p) {
  p.name = j.value("name", "");
  p.start_hour = j.at("start_hour").get<double>();
  p.end_hour = j.at("end_hour").get<double>();
  p.price = j.at("price").get<double>();
}

// ------------------------------------------------------------------- plant --

struct RCPlantConfig {
  std::size_t n_zones = 8;
  double dt = 900.0;                       // s
  std::vector<double> capacitance;         // J/degC per zone
  std::vector<double> r_out;               // degC/W zone to ambient
  std::vector<std::vector<double>> r_zone;  // degC/W between zones, 0 = not adjacent
  std::vector<std::size_t> thermostat_of;  // zone -> setpoint index
  std::size_t n_thermostats = 4;
  double heater_capacity = 4000.0;  // W per zone
  double heater_gain = 3500.0;      // W/degC of setpoint error
  double cop = 3.5;
  std::vector<double> appliance_kw;  // 24 hourly values
  double internal_gain_fraction = 0.5;  // share of appliance power released as heat
  double noise_std = 0.02;              // degC per zone per step, truncated at 3 sigma
  double setpoint_low = 16.0, setpoint_high = 26.0;
  // HP return water temperature = base + ambient_coeff T_out + load_coeff * load fraction.
  double hp_return_base = 25.0, hp_return_ambient = 0.3, hp_return_load = 10.0;

  /// Eight zones on four floors with two zones each: a ring through all
  /// zones plus vertical links between zones stacked on adjacent floors.
  static RCPlantConfig building() {
    RCPlantConfig c;
    c.capacitance.assign(8, 3.6e6);
    c.r_out.assign(8, 0.01);
    c.r_zone.assign(8, std::vector<double>(8, 0.0));
    auto link = [&](std::size_t a, std::size_t b, double r) { c.r_zone[a][b] = c.r_zone[b][a] = r; };
    for (std::size_t i = 0; i < 8; ++i) link(i, (i + 1) % 8, 0.02);
    for (std::size_t i = 0; i + 2 < 8; ++i) link(i, i + 2, 0.02);
    c.thermostat_of = {0, 0, 1, 1, 2, 2, 3, 3};
    c.appliance_kw = {0.8, 0.7, 0.7, 0.7, 0.8, 1.0, 1.6, 2.4, 2.2, 1.8, 1.6, 1.7,
                      2.0, 1.8, 1.6, 1.6, 1.8, 2.4, 3.0, 3.2, 2.8, 2.2, 1.5, 1.0};
    return c;
  }

  void validate() const {
    if (n_zones == 0 || !(dt > 0)) throw std::invalid_argument("plant needs zones and dt > 0");
    if (capacitance.size() != n_zones || r_out.size() != n_zones || r_zone.size() != n_zones ||
        thermostat_of.size() != n_zones)
      throw std::invalid_argument("plant per-zone parameter sizes differ from n_zones");
    for (std::size_t i = 0; i < n_zones; ++i) {
      if (!(capacitance[i] > 0) || !(r_out[i] > 0)) throw std::invalid_argument("capacitances/resistances must be > 0");
      if (r_zone[i].size() != n_zones) throw std::invalid_argument("zone resistance matrix must be square");
      if (thermostat_of[i] >= n_thermostats) throw std::invalid_argument("zone mapped to unknown thermostat");
      for (std::size_t j = 0; j < n_zones; ++j) {
        if (r_zone[i][j] < 0) throw std::invalid_argument("zone resistances must be positive");
        if (r_zone[i][j] != r_zone[j][i]) throw std::invalid_argument("zone adjacency must be symmetric");
      }
    }
    if (appliance_kw.size() != 24) throw std::invalid_argument("appliance profile needs 24 hourly values");
    if (!(cop > 0) || heater_capacity < 0 || heater_gain < 0 || noise_std < 0)
      throw std::invalid_argument("invalid heater/noise parameters");
    if (!(setpoint_low < setpoint_high)) throw std::invalid_argument("setpoint range is empty");
  }

  /// Uniform bound on the 2-norm of one step's process noise.
  double w_bound() const { return 3.0 * noise_std * std::sqrt(static_cast<double>(n_zones)); }
  double appliance_power(double hour_of_day) const {
    auto h = static_cast<std::size_t>(std::floor(std::fmod(std::fmod(hour_of_day, 24.0) + 24.0, 24.0)));
    return appliance_kw[std::min<std::size_t>(h, 23)];
  }
};

inline json to_json(const RCPlantConfig& c) {
  return {{"n_zones", c.n_zones},
          {"dt", c.dt},
          {"capacitance", c.capacitance},
          {"r_out", c.r_out},
          {"r_zone", c.r_zone},
          {"thermostat_of", c.thermostat_of},
          {"n_thermostats", c.n_thermostats},
          {"heater_capacity", c.heater_capacity},
          {"heater_gain", c.heater_gain},
          {"cop", c.cop},
          {"appliance_kw", c.appliance_kw},
          {"internal_gain_fraction", c.internal_gain_fraction},
          {"noise_std", c.noise_std},
          {"setpoint_low", c.setpoint_low},
          {"setpoint_high", c.setpoint_high},
          {"hp_return_base", c.hp_return_base},
          {"hp_return_ambient", c.hp_return_ambient},
          {"hp_return_load", c.hp_return_load}};
}

/// Missing keys fall back to the eight-zone building.
inline RCPlantConfig plant_config_from_json(const json& j) {
  RCPlantConfig c = RCPlantConfig::building();
  c.n_zones = j.value("n_zones", c.n_zones);
  c.dt = j.value("dt", c.dt);
  c.capacitance = j.value("capacitance", c.capacitance);
  c.r_out = j.value("r_out", c.r_out);
  c.r_zone = j.value("r_zone", c.r_zone);
  c.thermostat_of = j.value("thermostat_of", c.thermostat_of);
  c.n_thermostats = j.value("n_thermostats", c.n_thermostats);
  c.heater_capacity = j.value("heater_capacity", c.heater_capacity);
  c.heater_gain = j.value("heater_gain", c.heater_gain);
  c.cop = j.value("cop", c.cop);
  c.appliance_kw = j.value("appliance_kw", c.appliance_kw);
  c.internal_gain_fraction = j.value("internal_gain_fraction", c.internal_gain_fraction);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.setpoint_low = j.value("setpoint_low", c.setpoint_low);
  c.setpoint_high = j.value("setpoint_high", c.setpoint_high);
  c.hp_return_base = j.value("hp_return_base", c.hp_return_base);
  c.hp_return_ambient = j.value("hp_return_ambient", c.hp_return_ambient);
  c.hp_return_load = j.value("hp_return_load", c.hp_return_load);
  c.validate();
  return c;
}

struct PlantState {
  std::vector<double> temps;     // degC
  double hp_return = 0;          // degC
  double energy_total = 0;       // kWh during the last step
  double energy_appliance = 0;   // kWh during the last step
  double hour = 0;               // wall-clock hour since simulation start
};

struct StepResult {
  PlantState state;
  double energy_kwh = 0;           // total electrical energy of the step
  std::vector<double> heat;        // W delivered per zone
  std::vector<double> noise;       // degC added per zone
  bool clamped = false;            // a setpoint was outside the allowed range
};

/// Heater power of every zone for the given (clamped) setpoints.
inline std::vector<double> heater_power(const RCPlantConfig& c, std::span<const double> temps,
                                        std::span<const double> setpoints) {
  std::vector<double> q(c.n_zones);
  for (std::size_t i = 0; i < c.n_zones; ++i) {
    double err = setpoints[c.thermostat_of[i]] - temps[i];
    q[i] = std::min(c.heater_capacity, c.heater_gain * std::max(0.0, err));
  }
  return q;
}

/// Explicit Euler step of the RC network. `noise` (one value per zone, degC)
/// is added after the deterministic update.
inline StepResult plant_step(const RCPlantConfig& c, const PlantState& s, std::span<const double> setpoints,
                             double t_out, std::span<const double> noise) {
  if (setpoints.size() != c.n_thermostats) throw std::invalid_argument("setpoint count != thermostat count");
  if (s.temps.size() != c.n_zones || noise.size() != c.n_zones) throw std::invalid_argument("plant state size mismatch");
  StepResult r;
  std::vector<double> sp(setpoints.begin(), setpoints.end());
  for (auto& v : sp) {
    double k = std::clamp(v, c.setpoint_low, c.setpoint_high);
    if (k != v) r.clamped = true;
    v = k;
  }
  r.heat = heater_power(c, s.temps, sp);
  double appliance_w = 1000.0 * c.appliance_power(s.hour);
  double gain_per_zone = c.internal_gain_fraction * appliance_w / static_cast<double>(c.n_zones);

  r.state = s;
  double q_sum = 0;
  for (std::size_t i = 0; i < c.n_zones; ++i) {
    double flow = (t_out - s.temps[i]) / c.r_out[i] + r.heat[i] + gain_per_zone;
    for (std::size_t j = 0; j < c.n_zones; ++j)
      if (c.r_zone[i][j] > 0) flow += (s.temps[j] - s.temps[i]) / c.r_zone[i][j];
    r.state.temps[i] = s.temps[i] + c.dt / c.capacitance[i] * flow + noise[i];
    if (!std::isfinite(r.state.temps[i])) throw SimulationFault("non-finite zone temperature");
    q_sum += r.heat[i];
  }
  r.noise.assign(noise.begin(), noise.end());
  double to_kwh = c.dt / 3.6e6;
  r.state.energy_appliance = appliance_w * to_kwh;
  r.state.energy_total = q_sum / c.cop * to_kwh + r.state.energy_appliance;
  double load = c.heater_capacity > 0 ? q_sum / (static_cast<double>(c.n_zones) * c.heater_capacity) : 0.0;
  r.state.hp_return = c.hp_return_base + c.hp_return_ambient * t_out + c.hp_return_load * load;
  r.state.hour = s.hour + c.dt / 3600.0;
  r.energy_kwh = r.state.energy_total;
  return r;
}

/// Gaussian noise truncated componentwise at 3 sigma.
inline std::vector<double> truncated_noise(std::size_t n, double sigma, std::mt19937_64& rng) {
  std::vector<double> w(n, 0.0);
  if (sigma <= 0) return w;
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& x : w) {
    do x = g(rng);
    while (std::abs(x) > 3.0 * sigma);
  }
  return w;
}

// ----------------------------------------------------------------- weather --

struct WeatherConfig {
  double mean = 6.0;       // degC
  double amplitude = 4.0;  // degC, daily sinusoid peaking mid-afternoon
  double peak_hour = 15.0;
  double ar_coeff = 0.95;
  double ar_std = 0.15;
};

/// Ambient temperature at the start of each step.
inline std::vector<double> ambient_trace(std::size_t steps, double start_hour, double dt, const WeatherConfig& w,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, w.ar_std);
  std::vector<double> out(steps);
  double ar = 0;
  constexpr double two_pi = 6.283185307179586;
  for (std::size_t k = 0; k < steps; ++k) {
    double h = start_hour + static_cast<double>(k) * dt / 3600.0;
    out[k] = w.mean + w.amplitude * std::cos(two_pi * (h - w.peak_hour) / 24.0) + ar;
    ar = w.ar_coeff * ar + g(rng);
  }
  return out;
}

inline json to_json(const WeatherConfig& w) {
  return {{"mean", w.mean}, {"amplitude", w.amplitude}, {"peak_hour", w.peak_hour}, {"ar_coeff", w.ar_coeff},
          {"ar_std", w.ar_std}};
}
inline WeatherConfig weather_config_from_json(const json& j) {
  WeatherConfig w;
  w.mean = j.value("mean", w.mean);
  w.amplitude = j.value("amplitude", w.amplitude);
  w.peak_hour = j.value("peak_hour", w.peak_hour);
  w.ar_coeff = j.value("ar_coeff", w.ar_coeff);
  w.ar_std = j.value("ar_std", w.ar_std);
  return w;
}

/// Stateful simulator: plant, weather trace and noise stream share one seed.
class Plant {
 public:
  Plant(RCPlantConfig cfg, PlantState init, std::vector<double> ambient, std::uint64_t noise_seed)
      : cfg_(std::move(cfg)), state_(std::move(init)), ambient_(std::move(ambient)), rng_(noise_seed) {
    cfg_.validate();
  }

  StepResult step(std::span<const double> setpoints) {
    if (k_ >= ambient_.size()) throw SimulationFault("weather trace exhausted");
    auto w = truncated_noise(cfg_.n_zones, cfg_.noise_std, rng_);
    auto r = plant_step(cfg_, state_, setpoints, ambient_[k_], w);
    state_ = r.state;
    ++k_;
    return r;
  }

  const PlantState& state() const { return state_; }
  const RCPlantConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return k_; }
  double ambient() const { return ambient_.at(k_); }

 private:
  RCPlantConfig cfg_;
  PlantState state_;
  std::vector<double> ambient_;
  std::mt19937_64 rng_;
  std::size_t k_ = 0;
};

/// Initial state with every zone at `temp`, aux signals from a zero-heat step.
inline PlantState initial_state(const RCPlantConfig& c, double temp, double t_out, double hour) {
  PlantState s;
  s.temps.assign(c.n_zones, temp);
  s.hour = hour;
  s.energy_appliance = 1000.0 * c.appliance_power(hour) * c.dt / 3.6e6;
  s.energy_total = s.energy_appliance;
  s.hp_return = c.hp_return_base + c.hp_return_ambient * t_out;
  return s;
}

// ----------------------------------------------------------------- dataset --

/// One CSV row: measured outputs at step j and the setpoints applied during
/// [j, j+1). The energies are those consumed during [j-1, j).
struct DataRow {
  std::vector<double> temps;
  double e_all = 0, e_appl = 0, hp_return = 0;
  std::vector<double> setpoints;
};

struct Dataset {
  std::vector<DataRow> rows;
  std::size_t transitions() const { return rows.empty() ? 0 : rows.size() - 1; }
};

struct ExcitationConfig {
  std::size_t min_dwell = 4, max_dwell = 16;
  double low = 16.0, high = 26.0;
};

inline json to_json(const ExcitationConfig& e) {
  return {{"min_dwell", e.min_dwell}, {"max_dwell", e.max_dwell}, {"low", e.low}, {"high", e.high}};
}
inline ExcitationConfig excitation_config_from_json(const json& j) {
  ExcitationConfig e;
  e.min_dwell = j.value("min_dwell", e.min_dwell);
  e.max_dwell = j.value("max_dwell", e.max_dwell);
  e.low = j.value("low", e.low);
  e.high = j.value("high", e.high);
  return e;
}

/// Pseudo-random multi-level setpoint excitation: each thermostat holds a
/// uniformly drawn level for a uniformly drawn number of steps.
inline Dataset generate_dataset(const RCPlantConfig& cfg, const WeatherConfig& weather, const ExcitationConfig& ex,
                                std::size_t steps, std::uint64_t seed, double start_hour = 0.0) {
  if (steps < 1) throw std::invalid_argument("dataset needs at least one step");
  if (ex.min_dwell < 1 || ex.max_dwell < ex.min_dwell) throw std::invalid_argument("invalid dwell range");
  std::mt19937_64 rng(seed);
  auto amb = ambient_trace(steps, start_hour, cfg.dt, weather, rng());
  std::uniform_real_distribution<double> level(ex.low, ex.high);
  std::uniform_int_distribution<std::size_t> dwell(ex.min_dwell, ex.max_dwell);
  std::uniform_real_distribution<double> t0(19.0, 24.0);

  auto init = initial_state(cfg, t0(rng), amb[0], start_hour);
  Plant plant(cfg, init, amb, rng());
  std::vector<double> sp(cfg.n_thermostats);
  std::vector<std::size_t> left(cfg.n_thermostats, 0);

  Dataset d;
  d.rows.reserve(steps);
  for (std::size_t j = 0; j < steps; ++j) {
    for (std::size_t t = 0; t < sp.size(); ++t) {
      if (left[t] == 0) {
        sp[t] = level(rng);
        left[t] = dwell(rng);
      }
      --left[t];
    }
    const auto& s = plant.state();
    d.rows.push_back({s.temps, s.energy_total, s.energy_appliance, s.hp_return, sp});
    if (j + 1 < steps) plant.step(sp);
  }
  return d;
}

inline std::vector<std::string> dataset_columns(std::size_t n_zones = 8, std::size_t n_setpoints = 4) {
  std::vector<std::string> cols;
  char buf[32];
  for (std::size_t i = 0; i < n_zones; ++i) {
    std::snprintf(buf, sizeof buf, "Z%02zu_T", i + 1);
    cols.emplace_back(buf);
  }
  cols.insert(cols.end(), {"Fa_E_All", "Fa_E_Appl", "Bd_T_HP_return"});
  for (std::size_t i = 0; i < n_setpoints; ++i) cols.push_back("P" + std::to_string(i + 1));
  return cols;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_dataset_csv(const std::string& path, const Dataset& d) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  std::size_t nz = d.rows.empty() ? 8 : d.rows[0].temps.size();
  std::size_t nu = d.rows.empty() ? 4 : d.rows[0].setpoints.size();
  auto cols = dataset_columns(nz, nu);
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : d.rows) {
    std::string line;
    for (double t : r.temps) line += format_double(t) + ",";
    line += format_double(r.e_all) + "," + format_double(r.e_appl) + "," + format_double(r.hp_return);
    for (double u : r.setpoints) line += "," + format_double(u);
    os << line << '\n';
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": empty dataset");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) header.push_back(c);
  }
  std::size_t nz = 0, nu = 0;
  for (const auto& h : header) {
    if (h.size() == 5 && h[0] == 'Z' && h.substr(3) == "_T") ++nz;
    if (h.size() >= 2 && h[0] == 'P' && std::isdigit(static_cast<unsigned char>(h[1]))) ++nu;
  }
  if (header != dataset_columns(nz, nu)) throw std::runtime_error(path + ": unexpected dataset header");
  Dataset d;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) v.push_back(std::stod(c));
    if (v.size() != header.size()) throw std::runtime_error(path + ": wrong field count on line " + std::to_string(lineno));
    DataRow r;
    r.temps.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(nz));
    r.e_all = v[nz];
    r.e_appl = v[nz + 1];
    r.hp_return = v[nz + 2];
    r.setpoints.assign(v.begin() + static_cast<std::ptrdiff_t>(nz + 3), v.end());
    d.rows.push_back(std::move(r));
  }
  return d;
}

}  // namespace tubedpc
