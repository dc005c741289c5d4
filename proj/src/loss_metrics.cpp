#include "aunet/loss_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

namespace aunet {

namespace {

void check_loss_inputs(const Eigen::Ref<const ProbMatrix>& probs, const LabelMatrix& labels) {
  if (probs.rows() != labels.rows() || probs.cols() != labels.cols()) {
    throw std::invalid_argument("multilabel_loss: probabilities are " + std::to_string(probs.rows()) + "x" +
                                std::to_string(probs.cols()) + " but labels are " + std::to_string(labels.rows()) +
                                "x" + std::to_string(labels.cols()));
  }
  for (Index i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("multilabel_loss: probability " + std::to_string(p) + " outside [0,1]");
    }
  }
}

double entry_loss(double p, std::uint8_t l) {
  const double scale = 1.0 + kLossOffset;
  return l ? -std::log((p + kLossOffset) / scale) : -std::log((scale - p) / scale);
}

}  // namespace

double multilabel_loss(const ProbMatrix& probs, const LabelMatrix& labels) {
  check_loss_inputs(probs, labels);
  double total = 0;
  for (Index i = 0; i < probs.size(); ++i) total += entry_loss(probs.data()[i], labels.data()[i]);
  return total;
}

Tensor multilabel_loss(const Tensor& probs, const LabelMatrix& labels) {
  if (probs.rank() != 2) throw ShapeError("multilabel_loss: probabilities must be [frames, aus]");
  const Index rows = probs.dim(0), cols = probs.dim(1);
  check_loss_inputs(probs.as_matrix(rows, cols), labels);
  Tensor::Array v(1);
  v[0] = 0;
  for (Index i = 0; i < probs.size(); ++i) v[0] += entry_loss(probs.value()[i], labels.data()[i]);
  LabelMatrix l = labels;
  return Tensor::make_result({1}, std::move(v), "multilabel_loss", {probs}, [l](Node<double>& self) {
    auto& pn = *self.inputs[0];
    if (!pn.requires_grad) return;
    auto& g = pn.grad_buffer();
    const double scale = 1.0 + kLossOffset;
    for (Index i = 0; i < g.size(); ++i) {
      const double p = pn.value[i];
      const double d = l.data()[i] ? -1.0 / (p + kLossOffset) : 1.0 / (scale - p);
      g[i] += self.grad[0] * d;
    }
  });
}

ConfusionCounts confusion_counts(const ProbMatrix& probs, const LabelMatrix& labels, double threshold) {
  if (probs.rows() != labels.rows() || probs.cols() != labels.cols()) {
    throw std::invalid_argument("confusion_counts: shape mismatch");
  }
  const auto n = static_cast<std::size_t>(probs.cols());
  ConfusionCounts c{std::vector<std::int64_t>(n), std::vector<std::int64_t>(n), std::vector<std::int64_t>(n),
                    std::vector<std::int64_t>(n)};
  for (Index r = 0; r < probs.rows(); ++r) {
    for (Index a = 0; a < probs.cols(); ++a) {
      const bool pred = probs(r, a) >= threshold;
      const bool truth = labels(r, a) != 0;
      auto i = static_cast<std::size_t>(a);
      if (pred && truth) ++c.tp[i];
      else if (pred) ++c.fp[i];
      else if (truth) ++c.fn[i];
      else ++c.tn[i];
    }
  }
  return c;
}

double f1_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp + fp + fn == 0) return 1.0;
  // Harmonic mean of precision and recall, in a single rounding step.
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

F1Scores f1_per_label(const ProbMatrix& probs, const LabelMatrix& labels, double threshold) {
  F1Scores s;
  s.counts = confusion_counts(probs, labels, threshold);
  s.per_au.resize(s.counts.tp.size());
  for (std::size_t a = 0; a < s.per_au.size(); ++a) {
    s.per_au[a] = f1_from_counts(s.counts.tp[a], s.counts.fp[a], s.counts.fn[a]);
  }
  double total = 0;
  for (double f : s.per_au) total += f;
  s.average = s.per_au.empty() ? 0.0 : total / static_cast<double>(s.per_au.size());
  return s;
}

std::vector<int> FoldAssignment::subjects_in(int fold) const {
  std::vector<int> out;
  for (const auto& [subject, f] : fold_of)
    if (f == fold) out.push_back(subject);
  return out;
}

std::vector<int> FoldAssignment::subjects_outside(int fold) const {
  std::vector<int> out;
  for (const auto& [subject, f] : fold_of)
    if (f != fold) out.push_back(subject);
  return out;
}

FoldAssignment subject_kfold_split(std::vector<int> subject_ids, int k, std::uint64_t seed) {
  std::sort(subject_ids.begin(), subject_ids.end());
  if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) != subject_ids.end()) {
    throw std::invalid_argument("subject_kfold_split: duplicate subject id");
  }
  if (k < 1 || static_cast<std::size_t>(k) > subject_ids.size()) {
    throw std::invalid_argument("subject_kfold_split: k=" + std::to_string(k) + " with " +
                                std::to_string(subject_ids.size()) + " subjects");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(subject_ids.begin(), subject_ids.end(), rng);
  FoldAssignment out;
  out.k = k;
  for (std::size_t i = 0; i < subject_ids.size(); ++i) out.fold_of[subject_ids[i]] = static_cast<int>(i % k);
  return out;
}

}  // namespace aunet
