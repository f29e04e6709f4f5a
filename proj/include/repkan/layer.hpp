#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/ops.hpp"
#include "repkan/rng.hpp"
#include "repkan/spline.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

/// Per-channel batch normalization parameters and running statistics.
struct BatchNorm {
  GradPair gamma;
  GradPair beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = kBnEps;
  double momentum = kBnMomentum;
  /// Set by a train-mode forward or by explicitly loading statistics. Folding requires it.
  bool stats_ready = false;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor({channels}, 1.0)),
        beta(Tensor({channels}, 0.0)),
        running_mean(Tensor({channels}, 0.0)),
        running_var(Tensor({channels}, 1.0)) {}

  std::size_t channels() const { return gamma.value.size(); }

  void set_running_stats(Tensor mean, Tensor var) {
    mean.require_same_shape(running_mean, "BatchNorm running mean");
    var.require_same_shape(running_var, "BatchNorm running var");
    running_mean = std::move(mean);
    running_var = std::move(var);
    stats_ready = true;
  }

  Tensor forward(const Tensor& x, BnMode mode, BnCache* cache) {
    if (mode == BnMode::kTrain) {
      Tensor y = batchnorm2d_train(x, gamma.value, beta.value, running_mean, running_var, eps, momentum, cache);
      stats_ready = true;
      return y;
    }
    return batchnorm2d_eval(x, gamma.value, beta.value, running_mean, running_var, eps, cache);
  }

  Tensor eval(const Tensor& x) const {
    return batchnorm2d_eval(x, gamma.value, beta.value, running_mean, running_var, eps);
  }

  /// Accumulates gamma/beta gradients; returns the input gradient.
  Tensor backward(const BnCache& cache, const Tensor& grad_out) {
    BnGrads g = batchnorm2d_backward(cache, gamma.value, grad_out);
    gamma.grad += g.gamma;
    beta.grad += g.beta;
    return std::move(g.input);
  }

  /// Per-channel (scale, shift) of the eval-mode affine map.
  std::pair<std::vector<double>, std::vector<double>> affine() const {
    std::vector<double> scale(channels()), shift(channels());
    for (std::size_t c = 0; c < channels(); ++c) {
      const double inv = 1.0 / std::sqrt(running_var[c] + eps);
      scale[c] = gamma.value[c] * inv;
      shift[c] = beta.value[c] - gamma.value[c] * running_mean[c] * inv;
    }
    return {std::move(scale), std::move(shift)};
  }
};

/// A convolution with bias, the deploy-time form of one or more conv+BN branches.
struct FusedConv {
  Tensor kernel;
  Tensor bias;
  int stride = 1;
  int padding = 1;

  Tensor forward(const Tensor& x) const { return conv2d(x, kernel, bias, stride, padding); }
};

struct ConvBnCache {
  Tensor input;
  BnCache bn;
};

/// Bias-free convolution followed by batch normalization.
struct ConvBn {
  GradPair kernel;
  BatchNorm bn;
  int stride = 1;
  int padding = 0;

  ConvBn() = default;
  ConvBn(std::size_t in_channels, std::size_t out_channels, std::size_t ksize, int stride_, int padding_)
      : kernel(Tensor({out_channels, in_channels, ksize, ksize})), bn(out_channels), stride(stride_), padding(padding_) {}

  std::size_t in_channels() const { return kernel.value.dim(1); }
  std::size_t out_channels() const { return kernel.value.dim(0); }
  std::size_t ksize() const { return kernel.value.dim(2); }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels() * ksize() * ksize()));
    for (auto& v : kernel.value.data()) v = rng.uniform(-bound, bound);
  }

  Tensor forward(const Tensor& x, BnMode mode, ConvBnCache* cache) {
    Tensor y = conv2d(x, kernel.value, Tensor(), stride, padding);
    if (cache) cache->input = x;
    return bn.forward(y, mode, cache ? &cache->bn : nullptr);
  }

  Tensor eval(const Tensor& x) const { return bn.eval(conv2d(x, kernel.value, Tensor(), stride, padding)); }

  Tensor backward(const ConvBnCache& cache, const Tensor& grad_out) {
    Tensor g_conv = bn.backward(cache.bn, grad_out);
    ConvGrads g = conv2d_backward(cache.input, kernel.value, g_conv, stride, padding);
    kernel.grad += g.kernel;
    return std::move(g.input);
  }

  /// K' = K * gamma / sqrt(var + eps), b' = beta - gamma * mean / sqrt(var + eps).
  FusedConv fold() const {
    if (!bn.stats_ready) throw StateError("cannot fold batch norm without running statistics");
    auto [scale, shift] = bn.affine();
    FusedConv f{kernel.value, Tensor(Shape{out_channels()}, std::move(shift)), stride, padding};
    const std::size_t per_out = in_channels() * ksize() * ksize();
    for (std::size_t o = 0; o < out_channels(); ++o) {
      for (std::size_t i = 0; i < per_out; ++i) f.kernel[o * per_out + i] *= scale[o];
    }
    return f;
  }

  void zero_grad() {
    kernel.zero_grad();
    bn.gamma.zero_grad();
    bn.beta.zero_grad();
  }
};

/// Places a 1x1 kernel at the centre of a zero 3x3 kernel.
inline Tensor pad_1x1_to_3x3(const Tensor& k1) {
  k1.require_rank(4, "pad_1x1_to_3x3");
  if (k1.dim(2) != 1 || k1.dim(3) != 1) throw DimensionError("pad_1x1_to_3x3 expects a 1x1 kernel");
  Tensor k3({k1.dim(0), k1.dim(1), 3, 3});
  for (std::size_t i = 0; i < k1.dim(0) * k1.dim(1); ++i) k3[i * 9 + 4] = k1[i];
  return k3;
}

enum class LayerMode { kTrain, kDeploy };

struct LayerCache {
  Tensor input;
  ConvBnCache branch1x1;
  ConvBnCache branch3x3;
};

/// Dual-path block: Y = BN(conv1x1(X)) + BN(conv3x3(X)) + spline_bank(X).
/// After fuse() the two spatial branches collapse to one 3x3 convolution with bias:
/// Y = conv3x3(X; W_deploy, B) + spline_bank(X).
class RepKanLayer {
 public:
  RepKanLayer() = default;

  RepKanLayer(std::size_t in_channels, std::size_t out_channels, const SplineGrid& grid)
      : branch1x1_(in_channels, out_channels, 1, 1, 0),
        branch3x3_(in_channels, out_channels, 3, 1, 1),
        bank_(in_channels, out_channels, grid) {}

  void init(Rng& rng) {
    branch1x1_.init(rng);
    branch3x3_.init(rng);
    bank_.init(rng);
  }

  LayerMode mode() const noexcept { return fused_ ? LayerMode::kDeploy : LayerMode::kTrain; }
  std::size_t in_channels() const noexcept { return bank_.in_channels(); }
  std::size_t out_channels() const noexcept { return bank_.out_channels(); }

  ConvBn& branch1x1() {
    require_train();
    return branch1x1_;
  }
  ConvBn& branch3x3() {
    require_train();
    return branch3x3_;
  }
  const ConvBn& branch1x1() const {
    require_train();
    return branch1x1_;
  }
  const ConvBn& branch3x3() const {
    require_train();
    return branch3x3_;
  }
  SplineBank& bank() noexcept { return bank_; }
  const SplineBank& bank() const noexcept { return bank_; }
  const FusedConv& fused() const {
    if (!fused_) throw StateError("layer is not fused");
    return *fused_;
  }
  FusedConv& fused() {
    if (!fused_) throw StateError("layer is not fused");
    return *fused_;
  }

  /// Output of the spatial path alone (eval semantics in train mode).
  Tensor spatial_forward(const Tensor& x) const {
    if (fused_) return fused_->forward(x);
    return branch1x1_.eval(x) + branch3x3_.eval(x);
  }

  Tensor spectral_forward(const Tensor& x) const { return bank_.forward(x); }

  Tensor forward(const Tensor& x, BnMode bn_mode, LayerCache* cache = nullptr) {
    if (fused_) {
      if (bn_mode == BnMode::kTrain) throw StateError("deploy-mode layer cannot run batch-norm train mode");
      return eval(x);
    }
    if (cache) cache->input = x;
    Tensor y = branch1x1_.forward(x, bn_mode, cache ? &cache->branch1x1 : nullptr);
    y += branch3x3_.forward(x, bn_mode, cache ? &cache->branch3x3 : nullptr);
    y += bank_.forward(x);
    return y;
  }

  Tensor eval(const Tensor& x) const {
    Tensor y = spatial_forward(x);
    y += bank_.forward(x);
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dX.
  Tensor backward(const LayerCache& cache, const Tensor& grad_out) {
    if (fused_) throw StateError("deploy-mode layer has no backward pass");
    Tensor gx = branch1x1_.backward(cache.branch1x1, grad_out);
    gx += branch3x3_.backward(cache.branch3x3, grad_out);
    gx += bank_.backward(cache.input, grad_out);
    return gx;
  }

  /// Folds each branch's BN into its kernel, centre-pads the 1x1 kernel and sums both branches.
  /// The spline bank is copied unchanged.
  RepKanLayer fuse() const {
    if (fused_) throw StateError("layer is already fused");
    FusedConv f1 = branch1x1_.fold();
    FusedConv f3 = branch3x3_.fold();
    FusedConv deploy{pad_1x1_to_3x3(f1.kernel) + f3.kernel, f1.bias + f3.bias, 1, 1};
    return RepKanLayer(std::move(deploy), bank_);
  }

  /// Builds a deploy-mode layer from its parts.
  static RepKanLayer deployed(FusedConv conv, SplineBank bank) {
    if (conv.kernel.dim(0) != bank.out_channels() || conv.kernel.dim(1) != bank.in_channels()) {
      throw DimensionError("fused kernel " + shape_str(conv.kernel.shape()) + " disagrees with spline bank");
    }
    return RepKanLayer(std::move(conv), std::move(bank));
  }

  /// Conv-kernel and BN values read by the spatial path: train 10*Cout*Cin + 2 * 4*Cout
  /// (gamma, beta, mean, var per branch); deploy 9*Cout*Cin + Cout.
  std::size_t spatial_parameter_count() const {
    const std::size_t io = in_channels() * out_channels();
    if (fused_) return 9 * io + out_channels();
    return 10 * io + 8 * out_channels();
  }

  void zero_grad() {
    if (!fused_) {
      branch1x1_.zero_grad();
      branch3x3_.zero_grad();
    }
    bank_.zero_grad();
  }

 private:
  RepKanLayer(FusedConv conv, SplineBank bank) : bank_(std::move(bank)), fused_(std::move(conv)) {}

  void require_train() const {
    if (fused_) throw StateError("deploy-mode layer has no separate branches");
  }

  ConvBn branch1x1_;
  ConvBn branch3x3_;
  SplineBank bank_;
  std::optional<FusedConv> fused_;
};

}  // namespace repkan
