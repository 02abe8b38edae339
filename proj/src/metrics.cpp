#include "stlb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace stlb {

ConfusionMatrix::ConfusionMatrix(Index classes) : classes_(classes) {
  if (classes < 1) throw UsageError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(classes * classes), 0);
}

std::size_t ConfusionMatrix::index(Index t, Index p) const {
  if (t < 0 || t >= classes_ || p < 0 || p >= classes_) throw DataError("class id out of range");
  return static_cast<std::size_t>(t * classes_ + p);
}

void ConfusionMatrix::add(Index truth, Index predicted, std::uint64_t count) { counts_[index(truth, predicted)] += count; }

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(Index truth) const {
  std::uint64_t s = 0;
  for (Index p = 0; p < classes_; ++p) s += (*this)(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(Index predicted) const {
  std::uint64_t s = 0;
  for (Index t = 0; t < classes_; ++t) s += (*this)(t, predicted);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw UsageError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion_from_logits(const Tensor4d& logits, std::span<const int> labels) {
  const auto z = logits.item_matrix();
  if (static_cast<std::size_t>(z.cols()) != labels.size()) throw DataError("label count does not match logits");
  ConfusionMatrix cm(z.rows());
  for (Index n = 0; n < z.cols(); ++n) {
    Index best = 0;
    for (Index k = 1; k < z.rows(); ++k) {
      if (z(k, n) > z(best, n)) best = k;
    }
    cm.add(labels[static_cast<std::size_t>(n)], best);
  }
  return cm;
}

ConfusionMatrix evaluate(const Network& net, const Dataset& data) {
  const Tensor4d logits = predict_logits(net, data);
  std::vector<int> labels;
  labels.reserve(data.size());
  for (const auto& e : data) labels.push_back(e.label);
  return confusion_from_logits(logits, labels);
}

Summary summarize(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw UsageError("cannot summarize an empty confusion matrix");
  Summary s;
  std::uint64_t diag = 0;
  double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0;
  Index counted = 0;
  for (Index c = 0; c < cm.classes(); ++c) {
    diag += cm(c, c);
    const std::uint64_t row = cm.row_sum(c);
    if (row == 0) {
      s.excluded_classes.push_back(c);
      continue;
    }
    const std::uint64_t col = cm.col_sum(c);
    const double precision = col == 0 ? 0.0 : static_cast<double>(cm(c, c)) / static_cast<double>(col);
    const double recall = static_cast<double>(cm(c, c)) / static_cast<double>(row);
    const double f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    p_sum += precision;
    r_sum += recall;
    f_sum += f1;
    ++counted;
  }
  if (!s.excluded_classes.empty()) {
    std::cerr << "warning: " << s.excluded_classes.size() << " class(es) have no true examples; excluded from macro averages\n";
  }
  s.accuracy = static_cast<double>(diag) / static_cast<double>(total);
  if (counted > 0) {
    s.precision = p_sum / static_cast<double>(counted);
    s.recall = r_sum / static_cast<double>(counted);
    s.f1 = f_sum / static_cast<double>(counted);
  }
  return s;
}

SlopeFit fit_slope(std::span<const std::pair<double, double>> points) {
  if (points.size() < 2) throw UsageError("slope fit needs at least two points");
  const double n = static_cast<double>(points.size());
  double mean_r = 0.0, mean_v = 0.0;
  for (const auto& [r, v] : points) {
    mean_r += r;
    mean_v += v;
  }
  mean_r /= n;
  mean_v /= n;
  double srr = 0.0, srv = 0.0;
  for (const auto& [r, v] : points) {
    srr += (r - mean_r) * (r - mean_r);
    srv += (r - mean_r) * (v - mean_v);
  }
  if (srr == 0.0) throw UsageError("slope fit is degenerate: all r values are identical");
  SlopeFit fit;
  fit.slope = srv / srr;
  fit.intercept = mean_v - fit.slope * mean_r;
  double sse = 0.0;
  for (const auto& [r, v] : points) {
    const double e = v - (fit.slope * r + fit.intercept);
    sse += e * e;
  }
  fit.residual_rms = std::sqrt(sse / n);
  return fit;
}

std::vector<std::size_t> rank_by_robustness(std::span<const double> slopes) {
  std::vector<std::size_t> order(slopes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(slopes[a]) < std::abs(slopes[b]); });
  return order;
}

}  // namespace stlb
