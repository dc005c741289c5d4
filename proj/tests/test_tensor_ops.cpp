#include "aunet/grad_check.hpp"
#include "aunet/gradcheck_suite.hpp"
#include "aunet/ops.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace aunet;

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, bool grad = true) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = u(rng);
  return Tensor(shape, std::move(a), grad);
}

}  // namespace

TEST(Conv2d, UnitFilterIsIdentity) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 5, 4}, rng, false);
  const Tensor w = Tensor::full({1, 1, 1, 1}, 1.0);
  const Tensor y = conv2d(x, w);
  ASSERT_EQ(y.shape(), x.shape());
  for (Index i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, AllOnesFilterSumsTheWindow) {
  const Tensor y = conv2d(Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0));
  ASSERT_EQ(y.size(), 1);
  EXPECT_DOUBLE_EQ(y[0], 9.0);
}

TEST(Conv2d, PaddedShapePreserved) {
  // Same arithmetic as 512 channels on a 14x14 map, scaled down in channels.
  const Tensor y = conv2d(Tensor::zeros({8, 14, 14}), Tensor::zeros({8, 8, 3, 3}), 1, 1);
  EXPECT_EQ(y.shape(), (Shape{8, 14, 14}));
}

TEST(Conv2d, ChannelMismatchRejected) {
  EXPECT_THROW(conv2d(Tensor::zeros({2, 5, 5}), Tensor::zeros({1, 3, 3, 3})), ShapeError);
}

TEST(Conv2d, SumGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::vector<Tensor> in{random_tensor({1, 5, 5}, rng), random_tensor({2, 1, 3, 3}, rng)};
  const auto r = grad_check<double>([&] { return sum(conv2d(in[0], in[1])); }, std::span<Tensor>(in), 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Upsample, ThreeByThreeBecomesTiledSixBySix) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({1, 3, 3}, rng, false);
  const Tensor y = upsample_nearest(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 6, 6}));
  for (Index r = 0; r < 6; ++r) {
    for (Index c = 0; c < 6; ++c) EXPECT_EQ(y[r * 6 + c], x[(r / 2) * 3 + c / 2]);
  }
}

TEST(Upsample, SingleValue) {
  const Tensor y = upsample_nearest(Tensor::full({1, 1, 1}, 5.0), 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(y[i], 5.0);
}

TEST(Upsample, GradientSumsReplicatedCells) {
  Tensor x = Tensor::zeros({1, 3, 3}, true);
  backward(sum(upsample_nearest(x, 2)));
  for (Index i = 0; i < 9; ++i) EXPECT_EQ(x.grad()[i], 4.0);
}

TEST(Upsample, ZeroFactorRejected) {
  EXPECT_ANY_THROW(upsample_nearest(Tensor::zeros({1, 3, 3}), 0));
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  backward(sum(x));
  for (Index i = 0; i < x.size(); ++i) EXPECT_EQ(x.grad()[i], 1.0);
}

TEST(Backward, SigmoidAtZero) {
  Tensor x = Tensor::scalar(0.0, true);
  backward(sigmoid(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::zeros({2}, true);
  EXPECT_ANY_THROW(backward(scale(x, 2.0)));
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::zeros({2}, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(MaxPool, PicksWindowMaxima) {
  const Tensor x = Tensor::from({1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
  const Tensor y = max_pool2d(x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(y[0], 5.0);
  EXPECT_EQ(y[1], 8.0);
}

TEST(GradCheck, LinearMap) {
  std::vector<Tensor> in{Tensor::from({1}, {0.7})};
  const auto r = grad_check<double>([&] { return scale(in[0], 3.0); }, std::span<Tensor>(in), 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ConstantClosure) {
  std::vector<Tensor> in{Tensor::from({2}, {1.0, 2.0})};
  const auto r = grad_check<double>([] { return Tensor::scalar(4.0); }, std::span<Tensor>(in), 1e-3);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, RejectsBadEps) {
  std::vector<Tensor> in{Tensor::from({1}, {0.5})};
  EXPECT_THROW(grad_check<double>([&] { return sum(in[0]); }, std::span<Tensor>(in), 0.5), std::invalid_argument);
}

TEST(GradCheck, ReportsNonFiniteGradients) {
  std::vector<Tensor> in{Tensor::from({1}, {0.5})};
  auto closure = [&] {
    Tensor::Array v(1);
    v[0] = std::numeric_limits<double>::quiet_NaN();
    return sum(mul(in[0], Tensor({1}, v)));
  };
  const auto r = grad_check<double>(closure, std::span<Tensor>(in), 1e-3);
  EXPECT_FALSE(r.finite);
  EXPECT_EQ(r.coordinate, 0);
  EXPECT_FALSE(r.passed(1e-4));
}

TEST(GradCheck, CountsReluKinkCrossings) {
  std::vector<Tensor> in{Tensor::from({2}, {1e-5, 0.5})};
  const auto r = grad_check<double>([&] { return sum(relu(in[0])); }, std::span<Tensor>(in), 1e-3);
  EXPECT_EQ(r.branch_crossings, 1);
}

TEST(GradCheck, EveryOpPassesOnSeveralSeeds) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& c : run_op_gradchecks(seed)) {
      EXPECT_TRUE(c.result.passed(1e-4)) << c.name << " seed " << seed << " error " << c.result.max_rel_error;
      EXPECT_EQ(c.result.branch_crossings, 0) << c.name;
    }
  }
}

TEST(GradCheck, FloatScalarInstantiates) {
  BasicTensor<float> x = BasicTensor<float>::from({2}, {1.0f, -2.0f}, true);
  backward(sum(mul(x, x)));
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], -4.0f);
}
