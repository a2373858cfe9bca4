#pragma once

// Probabilistic validation of a trained policy on virtual rollouts of the
// learned model: satisfaction indicators, empirical rate, Hoeffding bound.

#include "checkpoint.hpp"
#include "closedloop.hpp"
#include "tube.hpp"

#include <cstdint>
#include <optional>

namespace tubedpc {

struct CertConfig {
  std::size_t m_val = 8000;
  double delta = 0.05;
  double mu_bound = 0.9;

  void validate() const {
    if (m_val < 1) throw std::invalid_argument("m_val must be >= 1");
    if (!(delta > 0 && delta < 1)) throw std::invalid_argument("delta must lie in (0, 1)");
    if (!(mu_bound >= 0 && mu_bound <= 1)) throw std::invalid_argument("mu_bound must lie in [0, 1]");
  }
};

/// 1 for every batch row whose states x̂_0..x̂_{N-1} and actions u_0..u_{N-1}
/// all lie in the closed box, else 0.
inline std::vector<std::uint8_t> indicators(const Trajectory& tr, const ConstraintBox& box) {
  std::size_t B = tr.batch();
  std::vector<std::uint8_t> ok(B, 1);
  for (std::size_t k = 0; k < tr.horizon(); ++k)
    for (std::size_t b = 0; b < B; ++b) {
      if (!ok[b]) continue;
      auto x = tr.states[k].data().subspan(b * tr.states[k].cols(), tr.states[k].cols());
      auto u = tr.actions[k].data().subspan(b * tr.actions[k].cols(), tr.actions[k].cols());
      if (!box.contains_state(x) || !box.contains_action(u)) ok[b] = 0;
    }
  return ok;
}

inline double empirical_rate(std::span<const std::uint8_t> ind) {
  if (ind.empty()) throw std::invalid_argument("empirical_rate: no indicators");
  std::size_t n = 0;
  for (auto v : ind) n += v ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(ind.size());
}

inline double hoeffding_bound(double mu_tilde, std::size_t m_val, double delta) {
  return mu_tilde - std::sqrt(std::log(1.0 / delta) / (2.0 * static_cast<double>(m_val)));
}

struct CertReport {
  double mu_tilde = 0;
  double mu_wc = 0;
  std::size_t m_val = 0;
  double delta = 0;
  double mu_bound = 0;
  bool pass = false;
  std::size_t diverged = 0;
  std::vector<std::uint8_t> indicators;
  json extra = json::object();
};

/// Pure assembly from stored indicators.
inline CertReport make_report(std::vector<std::uint8_t> ind, const CertConfig& cfg, std::size_t diverged = 0) {
  cfg.validate();
  if (ind.size() != cfg.m_val) throw std::invalid_argument("indicator count differs from m_val");
  CertReport r;
  r.mu_tilde = empirical_rate(ind);
  r.mu_wc = hoeffding_bound(r.mu_tilde, cfg.m_val, cfg.delta);
  r.m_val = cfg.m_val;
  r.delta = cfg.delta;
  r.mu_bound = cfg.mu_bound;
  r.pass = r.mu_wc >= cfg.mu_bound;
  r.diverged = diverged;
  r.indicators = std::move(ind);
  return r;
}

inline json to_json(const CertReport& r) {
  std::vector<int> ind(r.indicators.begin(), r.indicators.end());
  json j{{"mu_tilde", r.mu_tilde}, {"mu_wc", r.mu_wc}, {"m_val", r.m_val},       {"delta", r.delta},
         {"mu_bound", r.mu_bound}, {"pass", r.pass},   {"diverged", r.diverged}, {"indicators", ind}};
  for (auto& [k, v] : r.extra.items()) j[k] = v;
  return j;
}

inline CertReport report_from_json(const json& j) {
  CertReport r;
  r.mu_tilde = j.at("mu_tilde");
  r.mu_wc = j.at("mu_wc");
  r.m_val = j.at("m_val");
  r.delta = j.at("delta");
  r.mu_bound = j.at("mu_bound");
  r.pass = j.at("pass");
  r.diverged = j.value("diverged", std::size_t{0});
  for (int v : j.at("indicators")) r.indicators.push_back(static_cast<std::uint8_t>(v));
  return r;
}

/// Virtual closed-loop rollouts of every scenario row, scored against the
/// original box. Rows whose rollout goes non-finite score 0.
inline CertReport certify(const DynamicsParams& dyn, const PolicyParams& pol, const ScenarioBatch& scenarios,
                          std::size_t N, const ConstraintBox& box, const std::optional<std::vector<double>>& eps,
                          const CertConfig& cfg, std::size_t chunk = 256) {
  cfg.validate();
  if (scenarios.size() != cfg.m_val) throw std::invalid_argument("scenario count differs from m_val");
  ad::NoTapeScope off;
  std::vector<std::uint8_t> ind;
  ind.reserve(cfg.m_val);
  std::size_t diverged = 0;
  auto rows = [](const Tensor& t, std::size_t b, std::size_t e) {
    std::size_t w = t.cols();
    std::vector<double> v(t.data().begin() + static_cast<std::ptrdiff_t>(b * w), t.data().begin() + static_cast<std::ptrdiff_t>(e * w));
    return Tensor({e - b, w}, std::move(v));
  };
  const std::vector<double>* ep = eps ? &*eps : nullptr;
  for (std::size_t s = 0; s < cfg.m_val; s += chunk) {
    std::size_t e = std::min(cfg.m_val, s + chunk);
    ScenarioBatch part{rows(scenarios.x0, s, e), rows(scenarios.aux0, s, e), rows(scenarios.prices, s, e)};
    try {
      auto got = indicators(rollout(part, dyn, pol, N, ep), box);
      ind.insert(ind.end(), got.begin(), got.end());
    } catch (const NonFiniteError&) {
      for (std::size_t b = s; b < e; ++b) {
        ScenarioBatch one{rows(scenarios.x0, b, b + 1), rows(scenarios.aux0, b, b + 1), rows(scenarios.prices, b, b + 1)};
        try {
          ind.push_back(indicators(rollout(one, dyn, pol, N, ep), box)[0]);
        } catch (const NonFiniteError&) {
          ind.push_back(0);
          ++diverged;
        }
      }
    }
  }
  return make_report(std::move(ind), cfg, diverged);
}

/// m initial states uniform on the state box, d_0 drawn from `aux_pool` rows
/// and price windows from uniformly drawn start steps of the day.
inline ScenarioBatch certification_scenarios(std::size_t m, std::size_t N, const ConstraintBox& box,
                                             const std::vector<std::vector<double>>& aux_pool,
                                             const std::vector<double>& day_prices, std::uint64_t seed) {
  if (aux_pool.empty() || day_prices.empty()) throw std::invalid_argument("certification scenarios need aux rows and prices");
  std::mt19937_64 rng(seed);
  std::size_t nx = box.x_low.size(), na = aux_pool[0].size(), W = 2 * N - 1, P = day_prices.size();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> row(0, aux_pool.size() - 1), start(0, P - 1);
  std::vector<double> x(m * nx), d(m * na), pr(m * W);
  for (std::size_t b = 0; b < m; ++b) {
    for (std::size_t i = 0; i < nx; ++i) x[b * nx + i] = box.x_low[i] + (box.x_high[i] - box.x_low[i]) * unit(rng);
    const auto& a = aux_pool[row(rng)];
    std::copy(a.begin(), a.end(), d.begin() + static_cast<std::ptrdiff_t>(b * na));
    std::size_t s0 = start(rng);
    for (std::size_t k = 0; k < W; ++k) pr[b * W + k] = day_prices[(s0 + k) % P];
  }
  return {Tensor({m, nx}, std::move(x)), Tensor({m, na}, std::move(d)), Tensor({m, W}, std::move(pr))};
}

}  // namespace tubedpc
