#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "repkan/data.hpp"
#include "repkan/error.hpp"
#include "repkan/metrics.hpp"
#include "repkan/model.hpp"
#include "repkan/optim.hpp"
#include "repkan/rng.hpp"

namespace repkan {

struct TrainOptions {
  Schedule schedule;
  AdamWConfig optimizer;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentOptions augmentation;

  void validate() const {
    schedule.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  bool has_val = false;
  MetricsReport val;
};

inline constexpr const char* kTrainLogHeader = "epoch,lr,train_loss,val_oa,val_macro_p,val_macro_r,val_macro_f1";

inline void write_log_row(std::ostream& out, const EpochLog& e) {
  char buf[256];
  if (e.has_val) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.6f,%.6f,%.6f,%.6f", e.epoch, e.lr, e.train_loss, e.val.overall_accuracy,
                  e.val.macro_precision, e.val.macro_recall, e.val.macro_f1);
  } else {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,,,,", e.epoch, e.lr, e.train_loss);
  }
  out << buf << '\n';
}

/// Mini-batch training with AdamW and the per-epoch schedule. Images must already be
/// normalized. `val_images` may be empty. `on_epoch` sees each log row as it completes.
/// Deterministic given options.seed: shuffling uses Rng(seed, 10), augmentation Rng(seed, 11).
inline std::vector<EpochLog> train_epochs(RepKanModel& model, const Tensor& images, std::span<const int> labels,
                                          const Tensor& val_images, std::span<const int> val_labels,
                                          const TrainOptions& opt,
                                          const std::function<void(const EpochLog&)>& on_epoch = {}) {
  opt.validate();
  if (images.empty() || labels.empty()) throw InputError("training set is empty");
  if (images.dim(0) != labels.size()) throw DimensionError("training images and labels differ in count");
  if (opt.batch_size > labels.size()) {
    throw ConfigError("batch_size " + std::to_string(opt.batch_size) + " exceeds training set size " + std::to_string(labels.size()));
  }
  model.check_images(images);

  const std::size_t N = labels.size();
  auto params_named = model.parameters();
  std::vector<GradPair*> params;
  for (auto& p : params_named) params.push_back(p.param);
  AdamW optim(opt.optimizer);
  Rng shuffle_rng(opt.seed, 10);
  Rng aug_rng(opt.seed, 11);
  std::vector<std::size_t> order(N);
  std::vector<EpochLog> log;

  for (int epoch = 0; epoch < opt.schedule.total_epochs; ++epoch) {
    const double lr = lr_at(opt.schedule, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < N; b += opt.batch_size) {
      const std::size_t n = std::min(opt.batch_size, N - b);
      const std::span<const std::size_t> idx(order.data() + b, n);
      Tensor batch = gather_samples(images, idx);
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = labels[idx[i]];
      if (opt.augment) augment(batch, aug_rng, opt.augmentation);

      ModelCache cache;
      Tensor logits = model.forward(batch, BnMode::kTrain, &cache);
      LossResult lr_res = softmax_cross_entropy(logits, y);
      if (!std::isfinite(lr_res.loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " + std::to_string(b) +
                           " (lr " + std::to_string(lr) + ")");
      }
      model.zero_grad();
      model.backward(cache, lr_res.grad_logits);
      optim.step(params, lr);
      loss_sum += lr_res.loss * static_cast<double>(n);
    }
    EpochLog e{epoch, lr, loss_sum / static_cast<double>(N), false, {}};
    if (!val_images.empty()) {
      e.has_val = true;
      e.val = evaluate(model, val_images, val_labels, opt.batch_size);
    }
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

}  // namespace repkan
