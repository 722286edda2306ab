#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvfuse/tensor.hpp"
#include "mvfuse/views.hpp"

namespace mvfuse {

/// C x C counts; rows are the true class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ConfigError("confusion matrix: zero classes");
  }

  static ConfusionMatrix from_predictions(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                          std::size_t classes) {
    if (truth.size() != predicted.size()) throw DimensionError("confusion matrix: prediction count differs from truth");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
    return cm;
  }

  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1) {
    if (truth >= classes_ || predicted >= classes_) throw IndexError("confusion matrix: class index out of range");
    counts_[truth * classes_ + predicted] += n;
  }

  std::uint64_t operator()(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::size_t classes() const { return classes_; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Mean per-class recall over classes with at least one true sample.
inline double average_accuracy(const ConfusionMatrix& cm) {
  double acc = 0.0;
  std::size_t supported = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    std::uint64_t row = 0;
    for (std::size_t p = 0; p < cm.classes(); ++p) row += cm(c, p);
    if (row == 0) continue;
    acc += static_cast<double>(cm(c, c)) / static_cast<double>(row);
    ++supported;
  }
  if (supported == 0) throw ContractError("average_accuracy: confusion matrix is empty");
  return acc / static_cast<double>(supported);
}

/// 1 - SS_res / SS_tot. Unbounded below.
inline double r2_score(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw DimensionError("r2_score: length mismatch");
  if (target.size() < 2) throw ContractError("r2_score: need at least two samples");
  double mu = 0.0;
  for (double t : target) mu += t;
  mu /= static_cast<double>(target.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
    ss_tot += (target[i] - mu) * (target[i] - mu);
  }
  if (ss_tot == 0.0) throw ContractError("r2_score: target has zero variance");
  return 1.0 - ss_res / ss_tot;
}

inline double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) throw DimensionError("mean_squared_error: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

/// Row-wise argmax of a [B x C] score matrix.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw DimensionError("argmax_rows: expected [B x C]");
  std::vector<std::size_t> out(scores.extent(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.extent(1); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    out[i] = best;
  }
  return out;
}

/// Predictive quality: AA for classification (scores [B x C]), R^2 for
/// regression (predictions [B]).
inline double quality(const Task& task, const Tensor& predictions, std::span<const double> targets) {
  if (task.classification()) {
    std::vector<std::size_t> truth(targets.size());
    for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = static_cast<std::size_t>(targets[i]);
    return average_accuracy(ConfusionMatrix::from_predictions(truth, argmax_rows(predictions), task.classes));
  }
  return r2_score(predictions.data(), targets);
}

/// E = 1 - AA (classification) or MSE (regression).
inline double prediction_error(const Task& task, const Tensor& predictions, std::span<const double> targets) {
  if (task.classification()) return 1.0 - quality(task, predictions, targets);
  return mean_squared_error(predictions.data(), targets);
}

/// Prediction robustness score: 1 when the missing-view error is no worse than
/// the full-view error, otherwise E_full / E_miss.
inline double prs(double e_full, double e_miss) {
  if (!std::isfinite(e_full) || !std::isfinite(e_miss) || e_full < 0.0 || e_miss < 0.0) {
    throw ContractError("prs: errors must be finite and non-negative");
  }
  if (e_miss <= e_full) return 1.0;
  return e_full / e_miss;
}

/// One evaluated (method, scenario, fold) cell.
struct MetricsReport {
  std::string method;
  std::string technique;
  std::string scenario;
  std::string degree;
  std::size_t fold = 0;
  TaskKind task = TaskKind::binary;
  double quality = 0.0;
  double error = 0.0;
  std::optional<double> prs;  // absent for the no-miss scenario
};

}  // namespace mvfuse
