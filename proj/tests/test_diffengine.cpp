#include "oracles.hpp"

#include <tubedpc/diffengine.hpp>

#include <gtest/gtest.h>

using tubedpc::ShapeError;
using tubedpc::NonFiniteError;
using tubedpc::ad::Shape;
using tubedpc::ad::Tape;
using tubedpc::ad::TapeScope;
using tubedpc::ad::Tensor;
namespace ad = tubedpc::ad;

namespace {

std::vector<double> values(const Tensor& t) { return t.to_vector(); }

/// Reverse-mode gradient of sum(w ⊙ f(inputs)) w.r.t. every input, compared
/// to central differences of the same scalar computed without a tape.
void check_primitive(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                     std::uint64_t seed, double tol = 1e-5) {
  std::mt19937_64 rng(seed);
  Tensor probe = f(inputs);
  Tensor w(probe.shape(), oracle::uniform(probe.size(), -1.0, 1.0, rng));
  auto scalar = [&](const std::vector<Tensor>& in) { return ad::sum(ad::mul(f(in), w)); };

  Tape tape;
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope(tape);
    std::vector<Tensor> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t));
    auto g = ad::backward(scalar(leaves));
    for (auto& l : leaves) analytic.push_back(values(g[l]));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto fd = oracle::fd_gradient(
        [&](const std::vector<double>& x) {
          auto in = inputs;
          in[i] = Tensor(inputs[i].shape(), x);
          return scalar(in).item();
        },
        values(inputs[i]));
    EXPECT_LT(oracle::rel_error(analytic[i], fd), tol) << "input " << i;
  }
}

Tensor rand_tensor(Shape s, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  auto n = ad::numel(s);
  return Tensor(std::move(s), oracle::uniform(n, lo, hi, rng));
}

}  // namespace

TEST(DiffEngine, MatmulIdentity) {
  Tensor I = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor M = Tensor::matrix(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9.5});
  EXPECT_EQ(values(ad::matmul(I, M)), values(M));
}

TEST(DiffEngine, ReluAndSoftmaxDefinitions) {
  EXPECT_EQ(values(ad::relu(Tensor::vector({-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  auto s = ad::softmax_rows(Tensor::matrix(1, 2, {0, 0}));
  EXPECT_EQ(values(s), (std::vector<double>{0.5, 0.5}));
}

TEST(DiffEngine, SquareGradient) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::scalar(3.0));
  auto g = ad::backward(ad::square(x));
  EXPECT_DOUBLE_EQ(g[x].item(), 6.0);
}

TEST(DiffEngine, SumReluGradient) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::vector({-1, 2}));
  auto g = ad::backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(values(g[x]), (std::vector<double>{0, 1}));
}

TEST(DiffEngine, FanOutAccumulates) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::scalar(1.7));
  auto g = ad::backward(ad::add(x, x));
  EXPECT_EQ(g[x].item(), 2.0);
  Tensor y = tape.leaf(Tensor::vector({0.3, -1.2}));
  auto h = ad::backward(ad::sum(ad::mul(y, y)));
  EXPECT_EQ(values(h[y]), (std::vector<double>{0.6, -2.4}));
}

TEST(DiffEngine, UnreachedLeafHasZeroGradient) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::vector({1, 2}));
  Tensor y = tape.leaf(Tensor::vector({3, 4}));
  auto g = ad::backward(ad::sum(x));
  EXPECT_EQ(values(g[y]), (std::vector<double>{0, 0}));
}

TEST(DiffEngine, PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto s = static_cast<std::uint64_t>(trial);
    check_primitive([](auto& in) { return ad::add(in[0], in[1]); },
                    {rand_tensor({3, 4}, rng), rand_tensor({3, 4}, rng)}, s);
    check_primitive([](auto& in) { return ad::add(in[0], in[1]); },
                    {rand_tensor({2, 3, 4}, rng), rand_tensor({4}, rng)}, s);
    check_primitive([](auto& in) { return ad::sub(in[0], in[1]); },
                    {rand_tensor({3, 4}, rng), rand_tensor({3, 1}, rng)}, s);
    check_primitive([](auto& in) { return ad::mul(in[0], in[1]); },
                    {rand_tensor({2, 3, 4}, rng), rand_tensor({3, 4}, rng)}, s);
    check_primitive([](auto& in) { return ad::matmul(in[0], in[1]); },
                    {rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng)}, s);
    check_primitive([](auto& in) { return ad::matmul(in[0], in[1]); },
                    {rand_tensor({2, 3, 4}, rng), rand_tensor({4, 5}, rng)}, s);
    check_primitive([](auto& in) { return ad::matmul(in[0], in[1]); },
                    {rand_tensor({2, 3, 4}, rng), rand_tensor({2, 4, 3}, rng)}, s);
    check_primitive([](auto& in) { return ad::relu(in[0]); }, {rand_tensor({5, 3}, rng)}, s);
    check_primitive([](auto& in) { return ad::exp(in[0]); }, {rand_tensor({5, 3}, rng)}, s);
    check_primitive([](auto& in) { return ad::log(in[0]); }, {rand_tensor({5, 3}, rng, 0.2, 2.0)}, s);
    check_primitive([](auto& in) { return ad::sum(in[0]); }, {rand_tensor({5, 3}, rng)}, s);
    check_primitive([](auto& in) { return ad::mean(in[0]); }, {rand_tensor({2, 5, 3}, rng)}, s);
    check_primitive([](auto& in) { return ad::square(in[0]); }, {rand_tensor({7}, rng)}, s);
    check_primitive([](auto& in) { return ad::transpose(in[0]); }, {rand_tensor({2, 3, 4}, rng)}, s);
    check_primitive([](auto& in) { return ad::softmax_rows(in[0]); }, {rand_tensor({2, 3, 4}, rng)}, s);
    check_primitive([](auto& in) { return ad::layernorm_rows(in[0]); }, {rand_tensor({4, 6}, rng)}, s);
    check_primitive([](auto& in) { return ad::concat({in[0], in[1], in[0]}); },
                    {rand_tensor({3, 2}, rng), rand_tensor({3, 4}, rng)}, s);
    check_primitive([](auto& in) { return ad::slice(in[0], 1, 4); }, {rand_tensor({2, 3, 5}, rng)}, s);
    check_primitive([](auto& in) { return ad::scale(in[0], -1.7); }, {rand_tensor({4}, rng)}, s);
    check_primitive([](auto& in) { return ad::reshape(in[0], {2, 6}); }, {rand_tensor({3, 4}, rng)}, s);
  }
}

TEST(DiffEngine, TwoLayerNetworkGradient) {
  std::mt19937_64 rng(5);
  check_primitive(
      [](auto& in) { return ad::matmul(ad::relu(ad::add(ad::matmul(in[0], in[1]), in[2])), in[3]); },
      {rand_tensor({4, 3}, rng), rand_tensor({3, 6}, rng), rand_tensor({6}, rng), rand_tensor({6, 2}, rng)}, 3);
}

TEST(DiffEngine, JacobianOfLinearMapIsExact) {
  Tensor A = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto J = ad::jacobian([&](const Tensor& x) { return ad::matmul(ad::reshape(x, {1, 2}), ad::transpose(A)); },
                        Tensor::vector({0.3, -0.7}));
  EXPECT_EQ(J(0, 0), 1);
  EXPECT_EQ(J(0, 1), 2);
  EXPECT_EQ(J(1, 0), 3);
  EXPECT_EQ(J(1, 1), 4);
  auto I = ad::jacobian([](const Tensor& x) { return ad::scale(x, 1.0); }, Tensor::vector({1, 2, 3}));
  EXPECT_TRUE(I.isApprox(Eigen::MatrixXd::Identity(3, 3)));
}

TEST(DiffEngine, RowJacobiansMatchPerRowJacobians) {
  std::mt19937_64 rng(8);
  Tensor W = rand_tensor({3, 2}, rng);
  auto f = [&](const Tensor& x) { return ad::softmax_rows(ad::matmul(ad::exp(x), W)); };
  Tensor pts = rand_tensor({4, 3}, rng);
  auto rows = ad::row_jacobians(f, pts);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t p = 0; p < 4; ++p) {
    std::vector<double> row(pts.data().begin() + 3 * p, pts.data().begin() + 3 * p + 3);
    auto J = ad::jacobian([&](const Tensor& x) { return f(ad::reshape(x, {1, 3})); }, Tensor::vector(row));
    EXPECT_LT((J - rows[p]).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(DiffEngine, ReplayReproducesForwardBitForBit) {
  std::mt19937_64 rng(2);
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(rand_tensor({3, 4}, rng));
  Tensor y = ad::layernorm_rows(ad::softmax_rows(ad::matmul(x, ad::transpose(x))));
  (void)ad::sum(ad::exp(y));
  EXPECT_TRUE(tape.replay_matches());
}

TEST(DiffEngine, TapeIsTopologicallyOrdered) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::vector({1, 2}));
  (void)ad::sum(ad::mul(ad::add(x, Tensor::vector({3, 4})), x));
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (int j : tape.node(i).inputs) EXPECT_LT(static_cast<std::size_t>(j), i);
}

TEST(DiffEngine, LayernormRowsAreStandardized) {
  std::mt19937_64 rng(4);
  auto y = ad::layernorm_rows(rand_tensor({5, 16}, rng));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c) / 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 16;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(DiffEngine, Errors) {
  EXPECT_THROW(ad::matmul(Tensor::matrix(2, 3, std::vector<double>(6)), Tensor::matrix(2, 3, std::vector<double>(6))),
               ShapeError);
  EXPECT_THROW(ad::add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ShapeError);
  EXPECT_THROW(ad::log(Tensor::vector({-1.0})), NonFiniteError);
  EXPECT_THROW(ad::exp(Tensor::vector({1000.0})), NonFiniteError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);

  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(ad::backward(ad::scale(x, 2.0)), ShapeError);
  EXPECT_THROW(ad::backward(Tensor::scalar(1.0)), std::invalid_argument);
}

TEST(DiffEngine, UntrackedOpsStayOffTheTape) {
  Tape tape;
  TapeScope scope(tape);
  (void)ad::add(Tensor::vector({1}), Tensor::vector({2}));
  EXPECT_EQ(tape.size(), 0u);
  {
    ad::NoTapeScope off;
    Tensor x = Tensor::vector({1});
    (void)ad::exp(x);
  }
  EXPECT_EQ(tape.size(), 0u);
}
