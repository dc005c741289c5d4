#include "aunet/loss_metrics.hpp"
#include "aunet/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

using namespace aunet;

namespace {

double direct_loss(const ProbMatrix& p, const LabelMatrix& l) {
  double s = 0;
  for (Index r = 0; r < p.rows(); ++r) {
    for (Index c = 0; c < p.cols(); ++c) {
      s -= l(r, c) ? std::log((p(r, c) + 0.05) / 1.05) : std::log((1.05 - p(r, c)) / 1.05);
    }
  }
  return s;
}

Tensor as_tensor(const ProbMatrix& p) {
  return Tensor({p.rows(), p.cols()}, Eigen::Map<const Tensor::Array>(p.data(), p.size()), true);
}

}  // namespace

TEST(Loss, ZeroWhenPredictionsMatchLabels) {
  LabelMatrix l(2, 3);
  l << 1, 0, 1, 0, 0, 1;
  EXPECT_EQ(multilabel_loss(l.cast<double>().eval(), l), 0.0);
}

TEST(Loss, OppositeExtremeIsLogTwentyOne) {
  LabelMatrix l(1, 1);
  l << 1;
  ProbMatrix p(1, 1);
  p << 0.0;
  EXPECT_NEAR(multilabel_loss(p, l), std::log(21.0), 1e-12);
  l << 0;
  p << 1.0;
  EXPECT_NEAR(multilabel_loss(p, l), std::log(21.0), 1e-12);
}

TEST(Loss, HalfProbabilityOnAPositive) {
  LabelMatrix l(1, 1);
  l << 1;
  ProbMatrix p(1, 1);
  p << 0.5;
  EXPECT_NEAR(multilabel_loss(p, l), 0.6466, 5e-5);
}

TEST(Loss, FiniteGradientAtTheBounds) {
  LabelMatrix l(1, 4);
  l << 1, 0, 1, 0;
  ProbMatrix p(1, 4);
  p << 0.0, 1.0, 1.0, 0.0;
  Tensor t = as_tensor(p);
  const Tensor loss = multilabel_loss(t, l);
  backward(loss);
  EXPECT_TRUE(std::isfinite(loss.item()));
  EXPECT_TRUE(t.grad().isFinite().all());
  EXPECT_NEAR(t.grad()[0], -1.0 / 0.05, 1e-12);
  EXPECT_NEAR(t.grad()[1], 1.0 / 0.05, 1e-12);
}

TEST(Loss, MatchesDirectEvaluation) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::bernoulli_distribution b(0.4);
  for (int i = 0; i < 200; ++i) {
    ProbMatrix p = ProbMatrix::NullaryExpr(4, 12, [&] { return u(rng); });
    LabelMatrix l = LabelMatrix::NullaryExpr(4, 12, [&] { return static_cast<std::uint8_t>(b(rng)); });
    EXPECT_NEAR(multilabel_loss(p, l), direct_loss(p, l), 1e-12);
    EXPECT_NEAR(multilabel_loss(as_tensor(p), l).item(), direct_loss(p, l), 1e-12);
  }
}

TEST(Loss, OutOfRangeProbabilityRejected) {
  LabelMatrix l(1, 1);
  l << 1;
  ProbMatrix p(1, 1);
  p << 1.2;
  EXPECT_ANY_THROW(multilabel_loss(p, l));
  EXPECT_ANY_THROW(multilabel_loss(ProbMatrix::Zero(2, 1), l));
}

TEST(F1, PerfectPredictions) {
  LabelMatrix l(3, 2);
  l << 1, 0, 0, 1, 1, 1;
  const F1Scores s = f1_per_label(l.cast<double>().eval(), l);
  EXPECT_EQ(s.per_au, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(s.average, 1.0);
}

TEST(F1, TwoThirds) {
  // TP=2, FP=1, FN=1.
  LabelMatrix l(5, 1);
  l << 1, 1, 1, 0, 0;
  ProbMatrix p(5, 1);
  p << 0.9, 0.8, 0.1, 0.7, 0.2;
  const F1Scores s = f1_per_label(p, l);
  EXPECT_EQ(s.counts.tp[0], 2);
  EXPECT_EQ(s.counts.fp[0], 1);
  EXPECT_EQ(s.counts.fn[0], 1);
  EXPECT_DOUBLE_EQ(s.per_au[0], 2.0 / 3.0);
}

TEST(F1, ThresholdIsInclusive) {
  LabelMatrix l(1, 1);
  l << 1;
  ProbMatrix p(1, 1);
  p << 0.5;
  EXPECT_EQ(f1_per_label(p, l).counts.tp[0], 1);
}

TEST(F1, EmptyClassConventions) {
  EXPECT_EQ(f1_from_counts(0, 0, 0), 1.0);
  EXPECT_EQ(f1_from_counts(0, 3, 0), 0.0);
  EXPECT_EQ(f1_from_counts(0, 0, 2), 0.0);
}

TEST(Folds, OneSubjectPerFold) {
  const auto f = subject_kfold_split({4, 8, 15}, 3, 1);
  std::set<int> folds;
  for (const auto& [s, k] : f.fold_of) folds.insert(k);
  EXPECT_EQ(folds.size(), 3u);
}

TEST(Folds, FortyOneSubjects) {
  std::vector<int> ids(41);
  for (int i = 0; i < 41; ++i) ids[static_cast<std::size_t>(i)] = 100 + i;
  const auto f = subject_kfold_split(ids, 3, 9);
  std::multiset<std::size_t> sizes;
  std::set<int> seen;
  for (int k = 0; k < 3; ++k) {
    const auto in = f.subjects_in(k);
    sizes.insert(in.size());
    for (int s : in) EXPECT_TRUE(seen.insert(s).second) << "subject " << s << " in two folds";
    EXPECT_EQ(in.size() + f.subjects_outside(k).size(), 41u);
  }
  EXPECT_EQ(seen.size(), 41u);
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{13, 14, 14}));
}

TEST(Folds, SeedDeterminesAssignment) {
  std::vector<int> ids{1, 2, 3, 4, 5, 6, 7};
  EXPECT_EQ(subject_kfold_split(ids, 3, 5).fold_of, subject_kfold_split(ids, 3, 5).fold_of);
}

TEST(Folds, TooManyFoldsRejected) {
  EXPECT_THROW(subject_kfold_split({1, 2}, 3, 0), std::invalid_argument);
  EXPECT_THROW(subject_kfold_split({1, 1, 2}, 2, 0), std::invalid_argument);
}

TEST(Intensity, BinarizedAtThreshold) {
  EXPECT_EQ(binarize_intensity(3, 2), 1);
  EXPECT_EQ(binarize_intensity(2, 2), 1);
  EXPECT_EQ(binarize_intensity(1, 2), 0);
}
