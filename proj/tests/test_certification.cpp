#include "oracles.hpp"
#include "toy.hpp"

#include <tubedpc/certification.hpp>

#include <gtest/gtest.h>

using namespace tubedpc;

namespace {

Trajectory one_row(std::vector<std::vector<double>> xs, std::vector<std::vector<double>> us) {
  Trajectory tr;
  for (auto& x : xs) tr.states.push_back(Tensor({1, x.size()}, x));
  for (auto& u : us) tr.actions.push_back(Tensor({1, u.size()}, u));
  return tr;
}

const ConstraintBox kBox = ConstraintBox::uniform(2, 19, 24, 1, 16, 26);

/// Toy policy with random weights whose output stays near a mid-range setpoint.
PolicyParams toy_policy(std::uint64_t seed, std::size_t N) {
  auto p = init_policy(seed, {2 + 3 + N, {8}, 1});
  p.input_offset = Tensor::vector(std::vector<double>(2 + 3 + N, 0.0));
  auto sc = std::vector<double>(2 + 3 + N, 1.0);
  sc[0] = sc[1] = 2.0;
  p.input_offset.mutable_data()[0] = p.input_offset.mutable_data()[1] = 21.5;
  p.input_scale = Tensor::vector(sc);
  p.layers.back().bias = Tensor::vector({21.0});
  return p;
}

}  // namespace

TEST(Indicator, Examples) {
  EXPECT_EQ(indicators(one_row({{20, 21}, {22, 23}}, {{20}, {20}}), kBox)[0], 1);
  EXPECT_EQ(indicators(one_row({{20, 21}, {24.1, 23}}, {{20}, {20}}), kBox)[0], 0);
  EXPECT_EQ(indicators(one_row({{20, 21}, {24.0, 19.0}}, {{26}, {16}}), kBox)[0], 1);
  EXPECT_EQ(indicators(one_row({{20, 21}}, {{26.5}}), kBox)[0], 0);
}

TEST(Indicator, MonotoneInBox) {
  std::mt19937_64 rng(3);
  auto big = ConstraintBox::uniform(2, 18.5, 24.5, 1, 15, 27);
  for (int t = 0; t < 2000; ++t) {
    std::vector<std::vector<double>> xs{oracle::uniform(2, 18, 25, rng), oracle::uniform(2, 18, 25, rng)};
    std::vector<std::vector<double>> us{oracle::uniform(1, 15, 27, rng), oracle::uniform(1, 15, 27, rng)};
    auto tr = one_row(xs, us);
    if (indicators(tr, kBox)[0]) {
      ASSERT_EQ(indicators(tr, big)[0], 1);
    }
  }
}

TEST(EmpiricalRate, Examples) {
  EXPECT_EQ(empirical_rate(std::vector<std::uint8_t>(10, 1)), 1.0);
  EXPECT_EQ(empirical_rate(std::vector<std::uint8_t>{1, 0, 1, 1}), 0.75);
  std::vector<std::uint8_t> v(8000, 0);
  std::fill_n(v.begin(), 7920, 1);
  EXPECT_NEAR(empirical_rate(v), 0.99, 1e-15);
  EXPECT_THROW(empirical_rate(std::vector<std::uint8_t>{}), std::invalid_argument);
}

TEST(Hoeffding, Algebra) {
  // ln(1/0.05) / 16000 = ln 20 / 16000.
  double gap = std::sqrt(std::log(20.0) / 16000.0);
  EXPECT_NEAR(hoeffding_bound(0.99, 8000, 0.05), 0.99 - gap, 1e-15);
  EXPECT_NEAR(hoeffding_bound(0.99, 8000, 0.05), 0.976317, 1e-6);
  EXPECT_EQ(hoeffding_bound(0.7, 10, 1.0), 0.7);
  double g1 = 0.9 - hoeffding_bound(0.9, 500, 0.1), g4 = 0.9 - hoeffding_bound(0.9, 2000, 0.1);
  EXPECT_NEAR(g4, g1 / 2, 1e-15);
  EXPECT_LT(hoeffding_bound(0.1, 3, 0.01), 0.0);  // reported as-is
}

TEST(CertReport, PassRuleAndRecompute) {
  std::vector<std::uint8_t> ind(100, 1);
  ind[3] = ind[50] = 0;
  auto r = make_report(ind, {100, 0.05, 0.8});
  EXPECT_EQ(r.mu_tilde, 0.98);
  EXPECT_EQ(r.mu_wc, 0.98 - std::sqrt(std::log(1 / 0.05) / 200.0));
  EXPECT_EQ(r.pass, r.mu_wc >= 0.8);
  auto back = report_from_json(json::parse(to_json(r).dump()));
  auto again = make_report(back.indicators, {back.m_val, back.delta, back.mu_bound});
  EXPECT_EQ(again.mu_tilde, r.mu_tilde);
  EXPECT_EQ(again.mu_wc, r.mu_wc);
  EXPECT_EQ(again.pass, r.pass);
  EXPECT_FALSE(make_report(ind, {100, 0.05, 0.99}).pass);
  EXPECT_THROW(make_report(ind, {99, 0.05, 0.8}), std::invalid_argument);
  EXPECT_THROW(make_report(ind, {100, 0.0, 0.8}), std::invalid_argument);
}

TEST(Certify, SixteenPointGridMatchesBruteForce) {
  const std::size_t N = 4;
  auto dyn = init_dynamics(9, toy::model());
  dyn.output_scale = Tensor::full({5}, 0.4);
  auto pol = toy_policy(2, N);
  // 4x4 grid over the box, fixed d_0 and prices.
  std::vector<double> x0, d0, pr;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      x0.insert(x0.end(), {19.0 + 5.0 * i / 3.0, 19.0 + 5.0 * j / 3.0});
      d0.insert(d0.end(), {1.0, 0.2, 28.0});
      for (std::size_t k = 0; k < 2 * N - 1; ++k) pr.push_back(k < 3 ? 0.214 : 0.605);
    }
  ScenarioBatch sc{Tensor({16, 2}, x0), Tensor({16, 3}, d0), Tensor({16, 2 * N - 1}, pr)};
  auto rep = certify(dyn, pol, sc, N, kBox, std::nullopt, {16, 0.05, 0.5}, 5);

  // Brute force: step each grid point through policy and model one at a time.
  ad::NoTapeScope off;
  std::size_t ok = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    std::vector<double> x{x0[2 * p], x0[2 * p + 1]}, d{d0[3 * p], d0[3 * p + 1], d0[3 * p + 2]};
    bool sat = true;
    for (std::size_t k = 0; k < N; ++k) {
      std::vector<double> sd{x[0], x[1], d[0], d[1], d[2]};
      std::vector<double> w(pr.begin() + static_cast<std::ptrdiff_t>(p * (2 * N - 1) + k),
                            pr.begin() + static_cast<std::ptrdiff_t>(p * (2 * N - 1) + k + N));
      double u = policy_forward({Tensor({1, 5}, sd), Tensor({1, N}, w), std::nullopt}, pol).item();
      if (!(x[0] >= 19 && x[0] <= 24 && x[1] >= 19 && x[1] <= 24 && u >= 16 && u <= 26)) sat = false;
      auto next = dynamics_forward(Tensor({1, 2}, x), Tensor({1, 1}, std::vector<double>{u}), Tensor({1, 3}, d), dyn).to_vector();
      x = {next[0], next[1]};
      d = {next[2], next[3], next[4]};
    }
    ok += sat ? 1 : 0;
  }
  EXPECT_EQ(rep.mu_tilde, static_cast<double>(ok) / 16.0);
  EXPECT_EQ(rep.indicators.size(), 16u);
  // The grid mixes outcomes, so the comparison is not vacuous.
  EXPECT_GT(ok, 0u);
  EXPECT_LT(ok, 16u);
}

TEST(Certify, TrivialBoundsAndBadPolicy) {
  const std::size_t N = 3;
  auto dyn = init_dynamics(1, toy::model());
  dyn.head.weight = Tensor::zeros(dyn.head.weight.shape());  // identity model
  auto pol = toy_policy(4, N);
  pol.layers.back().weight = Tensor::zeros(pol.layers.back().weight.shape());
  auto sc = certification_scenarios(50, N, kBox, {{1.0, 0.2, 28.0}}, {0.214, 0.316, 0.605}, 8);
  auto good = certify(dyn, pol, sc, N, kBox, std::nullopt, {50, 0.05, 0.0});
  EXPECT_EQ(good.mu_tilde, 1.0);
  EXPECT_TRUE(good.pass);
  pol.layers.back().bias = Tensor::vector({40.0});
  auto r = certify(dyn, pol, sc, N, kBox, std::nullopt, {50, 0.05, 0.01});
  EXPECT_EQ(r.mu_tilde, 0.0);
  EXPECT_FALSE(r.pass);
  // With μ̃ below the Hoeffding gap μ_wc is negative, so even μ_bound = 0 fails.
  EXPECT_LT(r.mu_wc, 0.0);
  EXPECT_FALSE(make_report(r.indicators, {50, 0.05, 0.0}).pass);
}

TEST(Certify, DivergedRolloutsScoreZero) {
  const std::size_t N = 3;
  auto dyn = init_dynamics(1, toy::model());
  dyn.output_scale = Tensor::full({5}, 1e308);
  auto pol = toy_policy(4, N);
  auto sc = certification_scenarios(10, N, kBox, {{1.0, 0.2, 28.0}}, {0.214, 0.316, 0.605}, 8);
  auto r = certify(dyn, pol, sc, N, kBox, std::nullopt, {10, 0.05, 0.5}, 4);
  EXPECT_EQ(r.diverged, 10u);
  EXPECT_EQ(r.mu_tilde, 0.0);
}

TEST(CertificationScenarios, SeededAndInsideBox) {
  auto a = certification_scenarios(200, 4, kBox, {{1, 2, 3}, {4, 5, 6}}, {0.1, 0.2, 0.3, 0.4}, 3);
  auto b = certification_scenarios(200, 4, kBox, {{1, 2, 3}, {4, 5, 6}}, {0.1, 0.2, 0.3, 0.4}, 3);
  EXPECT_EQ(a.x0.to_vector(), b.x0.to_vector());
  EXPECT_EQ(a.prices.to_vector(), b.prices.to_vector());
  for (double x : a.x0.data()) {
    EXPECT_GE(x, 19.0);
    EXPECT_LE(x, 24.0);
  }
  EXPECT_EQ(a.prices.cols(), 7u);
}
