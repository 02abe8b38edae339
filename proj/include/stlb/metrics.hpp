#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stlb/training.hpp"

namespace stlb {

/// counts(true, predicted).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(Index classes);

  Index classes() const { return classes_; }
  std::uint64_t operator()(Index truth, Index predicted) const { return counts_[index(truth, predicted)]; }
  void add(Index truth, Index predicted, std::uint64_t count = 1);
  std::uint64_t total() const;
  std::uint64_t row_sum(Index truth) const;
  std::uint64_t col_sum(Index predicted) const;

  /// Elementwise sum, for merging shards.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t index(Index t, Index p) const;
  Index classes_;
  std::vector<std::uint64_t> counts_;
};

/// Builds the confusion matrix from (classes x count) logits: argmax per
/// example, ties resolved to the lowest class id.
ConfusionMatrix confusion_from_logits(const Tensor4d& logits, std::span<const int> labels);

/// Eval-mode predictions of `net` over `data`.
ConfusionMatrix evaluate(const Network& net, const Dataset& data);

struct Summary {
  double accuracy = 0.0;
  double precision = 0.0;  // macro average
  double recall = 0.0;     // macro average
  double f1 = 0.0;         // macro mean of per-class F1
  /// Classes without any true example; excluded from the macro averages.
  std::vector<Index> excluded_classes;
};

/// Accuracy plus macro-averaged precision, recall and F1. A class with no
/// predictions has precision 0; a class with no true examples is excluded
/// from the averages and reported in excluded_classes.
Summary summarize(const ConfusionMatrix& cm);

/// Least-squares line value = slope * r + intercept.
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual_rms = 0.0;
};

SlopeFit fit_slope(std::span<const std::pair<double, double>> points);

/// Indices of `slopes` ordered by increasing absolute value (the most robust
/// process first). Ties keep input order.
std::vector<std::size_t> rank_by_robustness(std::span<const double> slopes);

}  // namespace stlb
