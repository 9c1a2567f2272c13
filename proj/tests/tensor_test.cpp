/**
 * @file tensor_test.cpp
 * @brief Forward values and finite-difference gradients of every op.
 */

#include "poly/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "poly/error.hpp"
#include "poly/params.hpp"

namespace poly::ad {
namespace {

constexpr double kTol = 1e-6;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

/// Contracts an arbitrary output with fixed random weights so every output
/// component contributes to the scalar under test.
Tensor probe(const Tensor& y, unsigned seed = 17) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(y.size());
  for (auto& x : w) x = dist(rng);
  return sum(mul(y, Tensor(y.shape(), std::move(w))));
}

TEST(TensorBasics, ElementwiseValues) {
  const Tensor a({2, 2}, {1, -2, 3, -4});
  const Tensor b({2, 2}, {0.5, 0.5, 2, 2});
  const auto s = add(a, b);
  EXPECT_EQ(std::vector<double>(s.values().begin(), s.values().end()), (std::vector<double>{1.5, -1.5, 5, -2}));
  EXPECT_EQ(mul(a, b)[3], -8);
  EXPECT_EQ(sub(a, b)[0], 0.5);
  EXPECT_EQ(relu(a)[1], 0);
  EXPECT_EQ(relu(a)[2], 3);
  EXPECT_NEAR(sigmoid(Tensor::scalar(0)).item(), 0.5, 1e-15);
  EXPECT_EQ(clamp(a, -1, 1)[3], -1);
  EXPECT_EQ(sum(a).item(), -2);
  EXPECT_EQ(mean(a).item(), -0.5);
  EXPECT_THROW(add(a, Tensor::zeros({4})), Error);
  EXPECT_THROW(a.item(), Error);
}

TEST(TensorBasics, MatmulAndLinear) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor w({3, 2}, {1, 0, 0, 1, 1, 1});
  const Tensor b({2}, {10, 20});
  const auto y = linear(a, w, b);
  EXPECT_EQ(y.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{14, 25, 20, 31}));
  EXPECT_THROW(matmul(a, a), Error);
}

TEST(TensorBasics, ConcatAndSlice) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {5, 6});
  const auto c = concat({a, b}, 1);
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{1, 2, 5, 3, 4, 6}));
  const auto s = slice(c, 1, 1, 2);
  EXPECT_EQ(std::vector<double>(s.values().begin(), s.values().end()), (std::vector<double>{2, 5, 4, 6}));
  const auto r = concat({a, a}, 0);
  EXPECT_EQ(r.shape(), (Shape{4, 2}));
}

TEST(TensorBasics, GatherAndScatter) {
  const Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<int> idx = {2, 0, 2};
  const auto g = gather_rows(x, idx);
  EXPECT_EQ(std::vector<double>(g.values().begin(), g.values().end()), (std::vector<double>{5, 6, 1, 2, 5, 6}));
  const std::vector<int> to = {1, 1, 0};
  const auto s = scatter_add_rows(x, to, 2);
  EXPECT_EQ(std::vector<double>(s.values().begin(), s.values().end()), (std::vector<double>{5, 6, 4, 6}));
  const std::vector<int> bad = {3};
  EXPECT_THROW(gather_rows(x, bad), Error);
}

TEST(TensorBasics, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor({3, 4, 5}, rng, -5, 5);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const auto p = softmax(x, axis);
    const auto total = sum(p).item();
    EXPECT_NEAR(total, static_cast<double>(x.size()) / static_cast<double>(x.dim(axis)), 1e-12);
  }
  const auto ls = log_softmax(x);
  const auto sm = softmax(x, 2);
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(std::exp(ls[k]), sm[k], 1e-12);
}

TEST(TensorBasics, Conv2dMatchesDirectSum) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor({2, 3, 5, 6}, rng);
  const auto k = random_tensor({4, 3, 3, 3}, rng);
  const auto b = random_tensor({4}, rng);
  const auto y = conv2d(x, k, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 5, 6}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) {
          double acc = b[o];
          for (int c = 0; c < 3; ++c)
            for (int di = 0; di < 3; ++di)
              for (int dj = 0; dj < 3; ++dj) {
                const int ii = i + di - 1, jj = j + dj - 1;
                if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
                acc += x[((n * 3 + c) * 5 + ii) * 6 + jj] * k[((o * 3 + c) * 3 + di) * 3 + dj];
              }
          EXPECT_NEAR(y[((n * 4 + o) * 5 + i) * 6 + j], acc, 1e-12);
        }
}

TEST(TensorBasics, PoolAndUpsample) {
  const Tensor x({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
  const auto p = maxpool2d(x, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(p[0], 5);
  EXPECT_EQ(p[1], 8);
  const auto u = upsample_nearest(p, 2);
  EXPECT_EQ(u.shape(), (Shape{1, 1, 2, 4}));
  EXPECT_EQ(std::vector<double>(u.values().begin(), u.values().end()), (std::vector<double>{5, 5, 8, 8, 5, 5, 8, 8}));
}

TEST(TensorBasics, BatchNormStatistics) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({6, 3, 2, 2}, rng, -3, 5);
  BatchNormState state(3);
  const auto gamma = Tensor::full({3}, 1.0);
  const auto beta = Tensor::zeros({3});
  const auto y = batchnorm(x, gamma, beta, state, true);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0, xm = 0, xv = 0;
    std::vector<double> xs;
    for (int n = 0; n < 6; ++n)
      for (int s = 0; s < 4; ++s) {
        m += y[(n * 3 + c) * 4 + s];
        xs.push_back(x[(n * 3 + c) * 4 + s]);
      }
    m /= 24;
    for (int n = 0; n < 6; ++n)
      for (int s = 0; s < 4; ++s) v += std::pow(y[(n * 3 + c) * 4 + s] - m, 2);
    v /= 24;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-3);
    for (double e : xs) xm += e;
    xm /= 24;
    for (double e : xs) xv += (e - xm) * (e - xm);
    xv /= 23;
    EXPECT_NEAR(state.running_mean[c], 0.1 * xm, 1e-12);
    EXPECT_NEAR(state.running_var[c], 0.9 + 0.1 * xv, 1e-12);
  }
  // Eval mode is the affine map defined by the running statistics.
  const auto z = batchnorm(x, gamma, beta, state, false);
  EXPECT_NEAR(z[0], (x[0] - state.running_mean[0]) / std::sqrt(state.running_var[0] + state.eps), 1e-12);
}

TEST(TensorBasics, FusedLossesMatchFormulas) {
  const Tensor logits({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  const std::vector<int> targets = {1, 2};
  const double lse0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  const double lse1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0));
  EXPECT_NEAR(cross_entropy_sum(logits, targets).item(), (lse0 - 2.0) + (lse1 - 3.0), 1e-12);
  const std::vector<double> w = {0.0, 2.0};
  EXPECT_NEAR(cross_entropy_sum(logits, targets, w).item(), 2.0 * (lse1 - 3.0), 1e-12);

  const Tensor l({3}, {-2.0, 0.0, 40.0});
  const std::vector<double> y = {1.0, 0.0, 0.0};
  const auto s = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double expected = -std::log(s(-2.0)) - std::log(1 - s(0.0)) + 40.0;
  EXPECT_NEAR(bce_with_logits_sum(l, y).item(), expected, 1e-9);
}

TEST(Autodiff, GradientsAccumulateOnLeaves) {
  auto x = Tensor({2}, {1.0, 2.0}, true);
  sum(square(x)).backward();
  sum(square(x)).backward();
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Autodiff, SharedSubexpressionsSumTheirPaths) {
  auto x = Tensor::scalar(3.0, true);
  const auto y = mul(x, x);
  add(y, y).backward();
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  auto x = Tensor::scalar(3.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = square(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

struct OpCase {
  const char* name;
  std::function<Tensor(const Tensor&)> f;
  Shape shape;
  double lo = -1.0;
  double hi = 1.0;
};

class FiniteDifference : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  static std::mt19937_64 rng(42);
  const auto w = random_tensor({4, 3}, rng);
  const auto b = random_tensor({3}, rng);
  const auto other = random_tensor({3, 4}, rng);
  const auto kernel = random_tensor({2, 3, 3, 3}, rng);
  const auto kb = random_tensor({2}, rng);
  const auto table_idx = std::make_shared<std::vector<int>>(std::vector<int>{0, 2, 2, 1});
  const auto targets = std::make_shared<std::vector<int>>(std::vector<int>{0, 3, 1});
  const auto bin = std::make_shared<std::vector<double>>(std::vector<double>{1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1});
  const auto weights = std::make_shared<std::vector<double>>(std::vector<double>{0.5, 2.0, 1.0});
  auto bn_state = std::make_shared<BatchNormState>(3);
  const auto gamma = random_tensor({3}, rng, 0.5, 1.5);
  const auto beta = random_tensor({3}, rng);
  return {
      {"add", [=](const Tensor& x) { return probe(add(x, other)); }, {3, 4}},
      {"sub", [=](const Tensor& x) { return probe(sub(other, x)); }, {3, 4}},
      {"mul", [=](const Tensor& x) { return probe(mul(x, x)); }, {3, 4}},
      {"scale", [](const Tensor& x) { return probe(add_scalar(scale(x, -2.5), 1.0)); }, {5}},
      {"relu", [](const Tensor& x) { return probe(relu(x)); }, {10}},
      {"sigmoid", [](const Tensor& x) { return probe(sigmoid(x)); }, {10}, -4, 4},
      {"exp", [](const Tensor& x) { return probe(exp(x)); }, {10}},
      {"log", [](const Tensor& x) { return probe(log(x)); }, {10}, 0.2, 3.0},
      {"square", [](const Tensor& x) { return probe(square(x)); }, {10}},
      {"clamp", [](const Tensor& x) { return probe(clamp(x, -0.5, 0.5)); }, {10}},
      {"mean", [](const Tensor& x) { return mean(square(x)); }, {2, 3}},
      {"reshape", [](const Tensor& x) { return probe(reshape(x, {3, 2})); }, {2, 3}},
      {"concat", [=](const Tensor& x) { return probe(concat({x, other, x}, 1)); }, {3, 2}},
      {"slice", [](const Tensor& x) { return probe(slice(x, 1, 1, 2)); }, {2, 4, 3}},
      {"matmul", [=](const Tensor& x) { return probe(matmul(x, w)); }, {5, 4}},
      {"linear", [=](const Tensor& x) { return probe(linear(x, w, b)); }, {5, 4}},
      {"linear_weight", [=](const Tensor& x) { return probe(linear(other, x, b)); }, {4, 3}},
      {"add_row", [=](const Tensor& x) { return probe(add_row(other, x)); }, {4}},
      {"embed", [=](const Tensor& x) { return probe(embed(x, *table_idx)); }, {3, 5}},
      {"scatter", [=](const Tensor& x) { return probe(scatter_add_rows(x, *table_idx, 3)); }, {4, 2}},
      {"scale_rows", [=](const Tensor& x) { return probe(scale_rows(x, *weights)); }, {3, 2}},
      {"softmax0", [](const Tensor& x) { return probe(softmax(x, 0)); }, {3, 4}, -3, 3},
      {"softmax1", [](const Tensor& x) { return probe(softmax(x, 1)); }, {3, 4}, -3, 3},
      {"log_softmax", [](const Tensor& x) { return probe(log_softmax(x)); }, {3, 4}, -3, 3},
      {"conv2d", [=](const Tensor& x) { return probe(conv2d(x, kernel, kb, 1, 1)); }, {2, 3, 4, 5}},
      {"conv2d_kernel",
       [](const Tensor& k) {
         static std::mt19937_64 r(5);
         static const auto input = random_tensor({2, 3, 4, 5}, r);
         return probe(conv2d(input, k, Tensor::zeros({2}), 1, 1));
       },
       {2, 3, 3, 3}},
      {"maxpool", [](const Tensor& x) { return probe(maxpool2d(x, 2)); }, {2, 2, 4, 4}},
      {"upsample", [](const Tensor& x) { return probe(upsample_nearest(x, 2)); }, {1, 2, 2, 3}},
      {"batchnorm",
       [=](const Tensor& x) {
         BatchNormState scratch = *bn_state;
         return probe(batchnorm(x, gamma, beta, scratch, true));
       },
       {5, 3}},
      {"batchnorm4d",
       [=](const Tensor& x) {
         BatchNormState scratch = *bn_state;
         return probe(batchnorm(x, gamma, beta, scratch, true));
       },
       {3, 3, 2, 2}},
      {"cross_entropy", [=](const Tensor& x) { return cross_entropy_sum(x, *targets, *weights); }, {3, 5}, -3, 3},
      {"bce_logits", [=](const Tensor& x) { return bce_with_logits_sum(x, *bin); }, {12}, -4, 4},
  };
}

TEST_P(FiniteDifference, MatchesCentralDifferences) {
  const auto cases = op_cases();
  const auto& c = cases.at(static_cast<std::size_t>(GetParam()));
  std::mt19937_64 rng(100 + GetParam());
  auto x = random_tensor(c.shape, rng, c.lo, c.hi);
  if (std::string(c.name) == "maxpool" || std::string(c.name) == "relu" || std::string(c.name) == "clamp") {
    // Keep inputs away from kinks and ties.
    auto v = x.mutable_values();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = (static_cast<double>(k % 7) - 3.0) * 0.23 + 0.01 * k;
  }
  EXPECT_LT(grad_check(c.f, x, 1e-5), kTol) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, FiniteDifference, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(Autodiff, GradCheckManyCoversSeveralInputs) {
  std::mt19937_64 rng(8);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  const double err = grad_check_many([&] { return probe(sigmoid(matmul(a, b))); }, {a, b}, 1e-5);
  EXPECT_LT(err, kTol);
}

TEST(Autodiff, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto x = random_tensor({4, 3, 4, 4}, rng);
    auto k = random_tensor({2, 3, 3, 3}, rng);
    const auto y = probe(relu(conv2d(x, k, Tensor::zeros({2}), 1, 1)));
    y.backward();
    std::vector<double> g(k.grad().begin(), k.grad().end());
    g.push_back(y.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Params, AdamFirstStepMovesByLearningRate) {
  ParameterStore store;
  auto w = store.add("w", {2}, {1.0, -1.0});
  sum(mul(w, Tensor({2}, {3.0, -0.5}))).backward();
  adam_update(store.parameters(), 0.1, 1);
  // Bias-corrected first step is lr * sign(g) for eps << |g|.
  EXPECT_NEAR(w[0], 0.9, 1e-6);
  EXPECT_NEAR(w[1], -0.9, 1e-6);
  EXPECT_THROW(store.add("w", {1}, {0}), Error);
  EXPECT_THROW(store.get("missing"), Error);
}

TEST(Params, GlorotRespectsLimit) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const auto w = store.add_glorot("w", {30, 20}, 30, 20, rng);
  const double limit = std::sqrt(6.0 / 50.0);
  for (double v : w.values()) EXPECT_LE(std::abs(v), limit);
  EXPECT_EQ(store.count(), 600u);
}

TEST(Params, CheckpointRoundTripIsBitExact) {
  ParameterStore store;
  std::mt19937_64 rng(4);
  store.add_glorot("a", {3, 4}, 3, 4, rng);
  store.add_glorot("b", {5}, 5, 5, rng);
  auto& bn = store.add_batchnorm("bn", 2);
  bn.running_mean = {0.25, -1.0 / 3.0};
  store.parameters()[0].first_moment[2] = 1e-300;
  Checkpoint ckpt;
  ckpt.meta = {{"step", 12}};
  store_to_checkpoint(store, ckpt, true);
  const auto decoded = decode_checkpoint(encode_checkpoint(ckpt));
  EXPECT_EQ(decoded.meta["step"], 12);

  ParameterStore other;
  std::mt19937_64 rng2(99);
  other.add_glorot("a", {3, 4}, 3, 4, rng2);
  other.add_glorot("b", {5}, 5, 5, rng2);
  other.add_batchnorm("bn", 2);
  store_from_checkpoint(other, decoded, true);
  for (std::size_t p = 0; p < 2; ++p) {
    const auto x = store.parameters()[p].value.values();
    const auto y = other.parameters()[p].value.values();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    EXPECT_EQ(store.parameters()[p].first_moment, other.parameters()[p].first_moment);
  }
  EXPECT_EQ(other.batchnorm("bn").running_mean, bn.running_mean);

  ParameterStore wrong;
  wrong.add("a", {4, 3}, std::vector<double>(12));
  EXPECT_THROW(store_from_checkpoint(wrong, decoded, false), Error);
  auto bytes = encode_checkpoint(ckpt);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), Error);
}

}  // namespace
}  // namespace poly::ad
