#include "oracles.hpp"

#include <tubedpc/closedloop.hpp>

#include <gtest/gtest.h>

using namespace tubedpc;

namespace {

Tensor rand_tensor(ad::Shape s, std::mt19937_64& rng, double lo, double hi) {
  auto n = ad::numel(s);
  return Tensor(std::move(s), oracle::uniform(n, lo, hi, rng));
}

DynamicsConfig toy_config() {
  DynamicsConfig c;
  c.n_state = 2;
  c.n_aux = 1;
  c.n_action = 1;
  c.width = 4;
  c.blocks = 1;
  c.heads = 1;
  c.ff_width = 4;
  return c;
}

/// Dynamics whose head is zero: with the residual skip it is the identity map
/// on (state, aux).
DynamicsParams identity_dynamics(DynamicsConfig cfg) {
  auto p = init_dynamics(1, cfg);
  p.head.weight = Tensor::zeros(p.head.weight.shape());
  return p;
}

ScenarioBatch toy_scenarios(std::size_t B, std::size_t N, std::mt19937_64& rng) {
  return {rand_tensor({B, 2}, rng, 19, 24), rand_tensor({B, 1}, rng, 0, 1), rand_tensor({B, 2 * N - 1}, rng, 0.2, 0.6)};
}

}  // namespace

TEST(Rollout, HorizonEightRecordsEightSteps) {
  std::mt19937_64 rng(1);
  auto sc = toy_scenarios(3, 8, rng);
  auto tr = rollout(sc, init_dynamics(2, toy_config()), init_policy(3, {3 + 8, {6}, 1}), 8);
  EXPECT_EQ(tr.actions.size(), 8u);
  EXPECT_EQ(tr.aux.size(), 8u);
  EXPECT_EQ(tr.states.size(), 9u);  // x̂_N is produced but never scored
  EXPECT_EQ(tr.states[0].to_vector(), sc.x0.to_vector());
}

TEST(Rollout, IdentityDynamicsKeepsInitialState) {
  std::mt19937_64 rng(2);
  auto sc = toy_scenarios(4, 5, rng);
  auto pol = init_policy(3, {3 + 5, {}, 1});
  pol.layers[0].weight = Tensor::zeros(pol.layers[0].weight.shape());
  pol.layers[0].bias = Tensor::vector({21.0});
  auto tr = rollout(sc, identity_dynamics(toy_config()), pol, 5);
  for (const auto& x : tr.states) EXPECT_EQ(x.to_vector(), sc.x0.to_vector());
  for (const auto& u : tr.actions)
    for (double v : u.data()) EXPECT_EQ(v, 21.0);
}

TEST(Rollout, TighteningWidensPolicyInput) {
  std::mt19937_64 rng(2);
  auto sc = toy_scenarios(2, 3, rng);
  std::vector<double> eps{0, 0.1, 0.15, 0.17, 0.18};
  auto pol = init_policy(3, {3 + 3 + 3, {4}, 1});
  EXPECT_NO_THROW(rollout(sc, init_dynamics(1, toy_config()), pol, 3, &eps));
  EXPECT_THROW(rollout(sc, init_dynamics(1, toy_config()), pol, 3), ShapeError);
}

TEST(Rollout, CompositeGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::size_t N = 8;
  auto sc = toy_scenarios(2, N, rng);
  auto dyn = init_dynamics(4, toy_config());
  dyn.output_scale = Tensor::full({3}, 0.1);
  auto pol = init_policy(6, {3 + N, {5}, 1});
  pol.input_offset = Tensor::full({3 + N}, 10.0);
  pol.input_scale = Tensor::full({3 + N}, 10.0);
  pol.layers.back().bias = Tensor::vector({21.0});
  auto box = ConstraintBox::uniform(2, 20.5, 22.5, 1, 19, 24);
  TransitionBatch id{rand_tensor({3, 2}, rng, 19, 24), rand_tensor({3, 1}, rng, 16, 26), rand_tensor({3, 1}, rng, 0, 1),
                     rand_tensor({3, 3}, rng, 19, 24)};

  auto loss = [&](const DynamicsParams& f, const PolicyParams& p) {
    auto tr = rollout(sc, f, p, N);
    return composite_loss(identification_loss(id, f), constraint_loss(tr, box), objective_loss(tr), LossWeights{});
  };

  ad::Tape tape;
  std::vector<double> gf, gp;
  {
    ad::TapeScope scope(tape);
    auto bf = bind(tape, dyn);
    auto bp = bind(tape, pol);
    auto g = ad::backward(loss(bf, bp));
    gf = flat_gradient(g, bf);
    gp = flat_gradient(g, bp);
  }
  auto fd_f = oracle::fd_gradient(
      [&](const std::vector<double>& th) {
        auto f = dyn;
        set_flat_values(f, th);
        return loss(f, pol).item();
      },
      flat_values(dyn));
  auto fd_p = oracle::fd_gradient(
      [&](const std::vector<double>& th) {
        auto p = pol;
        set_flat_values(p, th);
        return loss(dyn, p).item();
      },
      flat_values(pol));
  EXPECT_LT(oracle::rel_error(gf, fd_f), 1e-4);
  EXPECT_LT(oracle::rel_error(gp, fd_p), 1e-4);
}

TEST(IdentificationLoss, HandValues) {
  auto cfg = toy_config();
  auto f = identity_dynamics(cfg);
  Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4}), u = Tensor::matrix(2, 1, {0, 0}), d = Tensor::matrix(2, 1, {5, 6});
  Tensor perfect = Tensor::matrix(2, 3, {1, 2, 5, 3, 4, 6});
  EXPECT_EQ(identification_loss({x, u, d, perfect}, f).item(), 0.0);
  Tensor one = Tensor::matrix(1, 3, {2, 2, 5});
  EXPECT_EQ(identification_loss({Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(1, 1, {0}), Tensor::matrix(1, 1, {5}), one}, f)
                .item(),
            1.0);
  // Errors of norm 1 and 2.
  Tensor off = Tensor::matrix(2, 3, {1, 3, 5, 3, 4, 8});
  EXPECT_EQ(identification_loss({x, u, d, off}, f).item(), 2.5);
  EXPECT_THROW(identification_loss({Tensor({0, 2}, std::vector<double>{}), u, d, off}, f), std::invalid_argument);
}

namespace {
Trajectory scalar_trajectory(std::vector<double> xs, std::vector<double> us) {
  Trajectory tr;
  for (double x : xs) tr.states.push_back(Tensor::matrix(1, 1, {x}));
  for (double u : us) tr.actions.push_back(Tensor::matrix(1, 1, {u}));
  return tr;
}
}  // namespace

TEST(ConstraintLoss, HandValues) {
  auto box = ConstraintBox::uniform(1, 19, 24, 1, 16, 26);
  EXPECT_EQ(constraint_loss(scalar_trajectory({21, 22, 0}, {20, 20}), box).item(), 0.0);
  EXPECT_EQ(constraint_loss(scalar_trajectory({25, 25, 0}, {20, 20}), box).item(), 1.0);
  EXPECT_EQ(constraint_loss(scalar_trajectory({18.5, 0}, {20}), box).item(), 0.25);
  // Boundary values are feasible.
  EXPECT_EQ(constraint_loss(scalar_trajectory({24, 19, 0}, {26, 16}), box).item(), 0.0);
  std::vector<ConstraintBox> two(1, box);
  EXPECT_THROW(constraint_loss(scalar_trajectory({21, 22, 0}, {20, 20}), two), std::invalid_argument);
}

TEST(ObjectiveLoss, HandValues) {
  Trajectory tr;
  tr.states = {Tensor::matrix(1, 1, {0}), Tensor::matrix(1, 1, {0}), Tensor::matrix(1, 1, {0})};
  tr.actions = {Tensor::matrix(1, 1, {0}), Tensor::matrix(1, 1, {0})};
  tr.aux = {Tensor::matrix(1, 3, {1, 0.3, 30}), Tensor::matrix(1, 3, {1, 0.2, 31})};
  tr.prices = Tensor::matrix(1, 3, {0.214, 0.605, 0.9});
  EXPECT_NEAR(objective_loss(tr).item(), 0.819, 1e-15);
  auto doubled = tr;
  doubled.aux = {Tensor::matrix(1, 3, {2, 0.3, 30}), Tensor::matrix(1, 3, {2, 0.2, 31})};
  EXPECT_EQ(objective_loss(doubled).item(), 2 * objective_loss(tr).item());
  tr.prices = Tensor::matrix(1, 3, {0, 0, 0});
  EXPECT_EQ(objective_loss(tr).item(), 0.0);
}

TEST(CompositeLoss, HandValues) {
  EXPECT_NEAR(composite_loss(1.0, 1.0, 1.0, LossWeights{0.1, 10.0, 0.075}), 10.175, 1e-12);
  EXPECT_EQ(composite_loss(3.0, 2.0, 1.0, LossWeights{0, 0, 0}), 0.0);
  EXPECT_EQ(composite_loss(3.0, 2.0, 1.0, LossWeights{0, 10, 0}), 20.0);
  EXPECT_THROW(composite_loss(1.0, 1.0, 1.0, LossWeights{-1, 0, 0}), std::invalid_argument);
  auto t = composite_loss(Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1), LossWeights{});
  EXPECT_NEAR(t.item(), 10.175, 1e-12);
}

TEST(ConstraintBox, Validation) {
  EXPECT_THROW(ConstraintBox::uniform(2, 24, 19, 1, 16, 26), std::invalid_argument);
  auto b = ConstraintBox::building();
  EXPECT_EQ(b.x_low.size(), 8u);
  EXPECT_EQ(b.u_high.size(), 4u);
  std::vector<double> at_edge(8, 24.0), over(8, 21.0);
  over[3] = 24.1;
  EXPECT_TRUE(b.contains_state(at_edge));
  EXPECT_FALSE(b.contains_state(over));
}
