#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/model.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

using Confusion = std::vector<std::vector<long>>;

/// Rows are true classes, columns predictions.
struct MetricsReport {
  double overall_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  Confusion confusion;
};

inline Confusion confusion_matrix(std::span<const int> labels, std::span<const int> predictions, int num_classes) {
  if (labels.size() != predictions.size()) throw DimensionError("labels and predictions differ in length");
  if (num_classes < 1) throw InputError("num_classes must be positive");
  const auto K = static_cast<std::size_t>(num_classes);
  Confusion c(K, std::vector<long>(K, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes) {
      throw InputError("class index out of range at sample " + std::to_string(i));
    }
    ++c[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return c;
}

/// Per-class precision/recall/F1 averaged without weights. A class nobody predicted has
/// precision 0; a class with no samples has recall 0; F1 is 0 when P + R = 0.
inline MetricsReport metrics_from_confusion(const Confusion& c) {
  const std::size_t K = c.size();
  MetricsReport r;
  r.confusion = c;
  if (K == 0) return r;
  long total = 0, correct = 0;
  double sp = 0.0, sr = 0.0, sf = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (c[k].size() != K) throw DimensionError("confusion matrix is not square");
    long row = 0, col = 0;
    for (std::size_t j = 0; j < K; ++j) {
      row += c[k][j];
      col += c[j][k];
    }
    total += row;
    correct += c[k][k];
    const double tp = static_cast<double>(c[k][k]);
    const double p = col > 0 ? tp / static_cast<double>(col) : 0.0;
    const double rc = row > 0 ? tp / static_cast<double>(row) : 0.0;
    sp += p;
    sr += rc;
    sf += (p + rc) > 0.0 ? 2.0 * p * rc / (p + rc) : 0.0;
  }
  const double kd = static_cast<double>(K);
  r.overall_accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  r.macro_precision = sp / kd;
  r.macro_recall = sr / kd;
  r.macro_f1 = sf / kd;
  return r;
}

inline MetricsReport compute_metrics(std::span<const int> labels, std::span<const int> predictions, int num_classes) {
  return metrics_from_confusion(confusion_matrix(labels, predictions, num_classes));
}

/// Eval-mode predictions in batches of `batch_size` samples.
inline std::vector<int> predict_batched(const RepKanModel& model, const Tensor& images, std::size_t batch_size = 64) {
  images.require_rank(4, "predict input");
  const std::size_t N = images.dim(0);
  const std::size_t per = images.size() / std::max<std::size_t>(N, 1);
  std::vector<int> out;
  out.reserve(N);
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t b = 0; b < N; b += batch_size) {
    const std::size_t n = std::min(batch_size, N - b);
    Shape s = images.shape();
    s[0] = n;
    std::vector<double> chunk(images.data().begin() + static_cast<long>(b * per),
                              images.data().begin() + static_cast<long>((b + n) * per));
    auto p = predict(model, Tensor(s, std::move(chunk)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline MetricsReport evaluate(const RepKanModel& model, const Tensor& images, std::span<const int> labels,
                              std::size_t batch_size = 64) {
  if (images.rank() != 4 || images.dim(0) != labels.size()) throw DimensionError("images and labels disagree in count");
  const auto preds = predict_batched(model, images, batch_size);
  return compute_metrics(labels, preds, model.config().num_classes);
}

}  // namespace repkan
