#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "dnt/error.hpp"
#include "dnt/tensor.hpp"

namespace dnt {

/// Per-epoch validation accuracies, each in [0, 1].
class AccuracySeries {
 public:
  AccuracySeries() = default;
  explicit AccuracySeries(std::vector<double> values) : values_(std::move(values)) {
    for (double v : values_) check(v);
  }

  void push_back(double v) {
    check(v);
    values_.push_back(v);
  }

  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  double operator[](std::size_t i) const { return values_[i]; }

  double max() const {
    if (values_.empty()) fail(ErrorKind::empty_batch, "empty accuracy series");
    return *std::max_element(values_.begin(), values_.end());
  }

  std::size_t argmax() const {
    if (values_.empty()) fail(ErrorKind::empty_batch, "empty accuracy series");
    return static_cast<std::size_t>(std::max_element(values_.begin(), values_.end()) - values_.begin());
  }

 private:
  static void check(double v) {
    if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::invalid_metric, "accuracy outside [0,1]");
  }
  std::vector<double> values_;
};

/// Argmax per row, ties to the lowest class index.
template <typename T>
std::vector<std::int32_t> predictions(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) fail(ErrorKind::shape_mismatch, "logits must be [N,K]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::int32_t> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = logits.data() + b * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[b] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename T>
std::size_t count_correct(const BasicTensor<T>& logits, std::span<const std::int32_t> labels) {
  const auto pred = predictions(logits);
  if (pred.size() != labels.size()) fail(ErrorKind::shape_mismatch, "label count does not match logits");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  return correct;
}

template <typename T>
double accuracy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) == 0 || labels.empty()) fail(ErrorKind::empty_batch, "accuracy of an empty batch");
  return static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size());
}

enum class ConvergenceRule {
  multiplicative,  ///< threshold = frac * max
  additive,        ///< threshold = max - (1 - frac)
};

/// First epoch whose accuracy reaches the threshold derived from the series
/// maximum. The argmax always qualifies, so the result is within bounds.
inline std::size_t convergence_epoch(const AccuracySeries& series, double frac = 0.99,
                                     ConvergenceRule rule = ConvergenceRule::multiplicative) {
  if (series.empty()) fail(ErrorKind::empty_batch, "empty accuracy series");
  if (!(frac > 0.0 && frac <= 1.0)) fail(ErrorKind::invalid_metric, "convergence fraction must be in (0,1]");
  const double mx = series.max();
  const double threshold = rule == ConvergenceRule::multiplicative ? frac * mx : mx - (1.0 - frac);
  for (std::size_t e = 0; e < series.size(); ++e)
    if (series[e] >= threshold) return e;
  return series.argmax();
}

}  // namespace dnt
