#pragma once

#include "aunet/tensor.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <vector>

namespace aunet {

using LabelMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ProbMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Offset that keeps the log terms finite at p = 0 and p = 1.
inline constexpr double kLossOffset = 0.05;

// -sum( l*log((p+0.05)/1.05) + (1-l)*log((1.05-p)/1.05) ) over every entry.
// probs is [frames, aus]; throws if any p is outside [0,1] or shapes differ.
Tensor multilabel_loss(const Tensor& probs, const LabelMatrix& labels);
double multilabel_loss(const ProbMatrix& probs, const LabelMatrix& labels);

struct ConfusionCounts {
  std::vector<std::int64_t> tp, fp, fn, tn;
};

struct F1Scores {
  std::vector<double> per_au;  // in [0,1]
  double average = 0;          // unweighted mean over AUs
  ConfusionCounts counts;
};

ConfusionCounts confusion_counts(const ProbMatrix& probs, const LabelMatrix& labels, double threshold = 0.5);

// F1 from counts. No positives anywhere (tp+fp+fn == 0) scores 1; tp == 0
// otherwise scores 0.
double f1_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn);

// Predictions are p >= threshold.
F1Scores f1_per_label(const ProbMatrix& probs, const LabelMatrix& labels, double threshold = 0.5);

struct FoldAssignment {
  int k = 0;
  std::map<int, int> fold_of;  // subject id -> fold

  std::vector<int> subjects_in(int fold) const;
  std::vector<int> subjects_outside(int fold) const;
};

// Seeded shuffle of the subject ids followed by round-robin assignment.
FoldAssignment subject_kfold_split(std::vector<int> subject_ids, int k, std::uint64_t seed);

// Intensity codes (0-5) become positive at or above `threshold`.
inline std::uint8_t binarize_intensity(int intensity, int threshold = 2) {
  return intensity >= threshold ? 1 : 0;
}

}  // namespace aunet
