#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/matrix.hpp"
#include "repkan/parallel.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding, kernels 1x1 or 3x3.
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t out_height, out_width;
  std::size_t stride, padding;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  input.require_rank(4, "conv2d input");
  kernel.require_rank(4, "conv2d kernel");
  if (stride < 1) throw ConfigError("conv2d stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv2d padding must be non-negative, got " + std::to_string(padding));
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = kernel.dim(0);
  g.kernel_h = kernel.dim(2);
  g.kernel_w = kernel.dim(3);
  g.stride = static_cast<std::size_t>(stride);
  g.padding = static_cast<std::size_t>(padding);
  if (kernel.dim(1) != g.in_channels) {
    throw DimensionError("conv2d kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                         std::to_string(g.in_channels));
  }
  auto valid_k = [](std::size_t k) { return k == 1 || k == 3; };
  if (!valid_k(g.kernel_h) || !valid_k(g.kernel_w)) {
    throw ConfigError("conv2d supports 1x1 and 3x3 kernels, got " + shape_str(kernel.shape()));
  }
  std::size_t span_h = g.height + 2 * g.padding;
  std::size_t span_w = g.width + 2 * g.padding;
  if (span_h < g.kernel_h || span_w < g.kernel_w) {
    throw ConfigError("conv2d output size would be empty for input " + shape_str(input.shape()));
  }
  g.out_height = (span_h - g.kernel_h) / g.stride + 1;
  g.out_width = (span_w - g.kernel_w) / g.stride + 1;
  return g;
}

namespace detail {

// Output columns [lo, hi) whose input column ow*stride - padding + k lies inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_out_range(std::size_t k, std::size_t extent, std::size_t out_extent,
                                                          std::size_t stride, std::size_t padding) {
  long s = static_cast<long>(stride);
  long off = static_cast<long>(k) - static_cast<long>(padding);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long last = static_cast<long>(extent) - 1 - off;
  if (last < 0) return {0, 0};
  long hi = std::min<long>(static_cast<long>(out_extent), last / s + 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// Direct convolution, the reference semantics. `bias` may be an empty tensor (no bias).
inline Tensor conv2d_direct(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw DimensionError("conv2d bias shape " + shape_str(bias.shape()) + " for " + std::to_string(g.out_channels) +
                         " output channels");
  }
  Tensor out({g.batch, g.out_channels, g.out_height, g.out_width});
  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_height * g.out_width;
  const double* x = input.data().data();
  const double* k = kernel.data().data();
  double* y = out.data().data();

  parallel_for(g.batch, [&](std::size_t n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      double* yp = y + (n * g.out_channels + o) * out_plane;
      std::fill(yp, yp + out_plane, bias.empty() ? 0.0 : bias[o]);
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        const double* xp = x + (n * g.in_channels + c) * in_plane;
        const double* kp = k + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
          auto [oh_lo, oh_hi] = detail::valid_out_range(kh, g.height, g.out_height, g.stride, g.padding);
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const double* xrow = xp + (oh * g.stride + kh - g.padding) * g.width;
            double* yrow = yp + oh * g.out_width;
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
              const double wv = kp[kh * g.kernel_w + kw];
              auto [ow_lo, ow_hi] = detail::valid_out_range(kw, g.width, g.out_width, g.stride, g.padding);
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow * g.stride + kw - g.padding];
            }
          }
        }
      }
    }
  });
  return out;
}

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

/// Gradients of sum(grad_out * conv2d(input, kernel, bias)), direct loops.
inline ConvGrads conv2d_direct_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                                 int padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.out_channels, g.out_height, g.out_width}) {
    throw DimensionError("conv2d_backward grad_out shape " + shape_str(grad_out.shape()));
  }
  ConvGrads grads{Tensor::zeros_like(input), Tensor::zeros_like(kernel), Tensor({g.out_channels})};
  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_height * g.out_width;
  const std::size_t ksize = g.kernel_h * g.kernel_w;
  const double* x = input.data().data();
  const double* k = kernel.data().data();
  const double* dy = grad_out.data().data();
  double* dx = grads.input.data().data();

  const auto chunks = fixed_chunks(g.batch);
  std::vector<std::vector<double>> dk_part(chunks.size(), std::vector<double>(kernel.size(), 0.0));
  std::vector<std::vector<double>> db_part(chunks.size(), std::vector<double>(g.out_channels, 0.0));

  parallel_for(chunks.size(), [&](std::size_t ci) {
    double* dk = dk_part[ci].data();
    double* db = db_part[ci].data();
    for (std::size_t n = chunks[ci].begin; n < chunks[ci].end; ++n) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const double* gp = dy + (n * g.out_channels + o) * out_plane;
        double bsum = 0.0;
        for (std::size_t i = 0; i < out_plane; ++i) bsum += gp[i];
        db[o] += bsum;
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          const double* xp = x + (n * g.in_channels + c) * in_plane;
          double* dxp = dx + (n * g.in_channels + c) * in_plane;
          const double* kp = k + (o * g.in_channels + c) * ksize;
          double* dkp = dk + (o * g.in_channels + c) * ksize;
          for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            auto [oh_lo, oh_hi] = detail::valid_out_range(kh, g.height, g.out_height, g.stride, g.padding);
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
              auto [ow_lo, ow_hi] = detail::valid_out_range(kw, g.width, g.out_width, g.stride, g.padding);
              const double wv = kp[kh * g.kernel_w + kw];
              double acc = 0.0;
              for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                const std::size_t row = (oh * g.stride + kh - g.padding) * g.width;
                const double* grow = gp + oh * g.out_width;
                const double* xs = xp + row;
                double* dxs = dxp + row;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                  const std::size_t iw = ow * g.stride + kw - g.padding;
                  acc += grow[ow] * xs[iw];
                  dxs[iw] += grow[ow] * wv;
                }
              }
              dkp[kh * g.kernel_w + kw] += acc;
            }
          }
        }
      }
    }
  });

  for (std::size_t ci = 0; ci < chunks.size(); ++ci) {
    for (std::size_t i = 0; i < kernel.size(); ++i) grads.kernel[i] += dk_part[ci][i];
    for (std::size_t o = 0; o < g.out_channels; ++o) grads.bias[o] += db_part[ci][o];
  }
  return grads;
}

namespace detail {

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

// Column matrix [Cin*kh*kw, Ho*Wo] of one sample.
inline void im2col(const double* xp, const ConvGeometry& g, double* col) {
  const std::size_t out_plane = g.out_height * g.out_width;
  std::fill(col, col + g.in_channels * g.kernel_h * g.kernel_w * out_plane, 0.0);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* plane = xp + c * g.height * g.width;
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      auto [oh_lo, oh_hi] = valid_out_range(kh, g.height, g.out_height, g.stride, g.padding);
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        auto [ow_lo, ow_hi] = valid_out_range(kw, g.width, g.out_width, g.stride, g.padding);
        double* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * out_plane;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const double* xrow = plane + (oh * g.stride + kh - g.padding) * g.width;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) row[oh * g.out_width + ow] = xrow[ow * g.stride + kw - g.padding];
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* dxp) {
  const std::size_t out_plane = g.out_height * g.out_width;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* plane = dxp + c * g.height * g.width;
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      auto [oh_lo, oh_hi] = valid_out_range(kh, g.height, g.out_height, g.stride, g.padding);
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        auto [ow_lo, ow_hi] = valid_out_range(kw, g.width, g.out_width, g.stride, g.padding);
        const double* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * out_plane;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          double* xrow = plane + (oh * g.stride + kh - g.padding) * g.width;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) xrow[ow * g.stride + kw - g.padding] += row[oh * g.out_width + ow];
        }
      }
    }
  }
}

}  // namespace detail

/// Convolution lowered to one matrix product per sample. Agrees with conv2d_direct up to
/// summation order.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw DimensionError("conv2d bias shape " + shape_str(bias.shape()) + " for " + std::to_string(g.out_channels) +
                         " output channels");
  }
  Tensor out({g.batch, g.out_channels, g.out_height, g.out_width});
  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_height * g.out_width;
  const std::size_t rows = g.in_channels * g.kernel_h * g.kernel_w;
  const auto K = detail::ConstRowMap(kernel.data().data(), static_cast<long>(g.out_channels), static_cast<long>(rows));
  const auto chunks = fixed_chunks(g.batch);
  parallel_for(chunks.size(), [&](std::size_t ci) {
    std::vector<double> col(detail::is_pointwise(g) ? 0 : rows * out_plane);
    for (std::size_t n = chunks[ci].begin; n < chunks[ci].end; ++n) {
      const double* xp = input.data().data() + n * g.in_channels * in_plane;
      if (!col.empty()) detail::im2col(xp, g, col.data());
      const double* cp = col.empty() ? xp : col.data();
      detail::RowMap Y(out.data().data() + n * g.out_channels * out_plane, static_cast<long>(g.out_channels),
                       static_cast<long>(out_plane));
      Y.noalias() = K * detail::ConstRowMap(cp, static_cast<long>(rows), static_cast<long>(out_plane));
      if (!bias.empty()) {
        for (std::size_t o = 0; o < g.out_channels; ++o) Y.row(static_cast<long>(o)).array() += bias[o];
      }
    }
  });
  return out;
}

/// Gradients of sum(grad_out * conv2d(input, kernel, bias)).
inline ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                                 int padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.out_channels, g.out_height, g.out_width}) {
    throw DimensionError("conv2d_backward grad_out shape " + shape_str(grad_out.shape()));
  }
  ConvGrads grads{Tensor::zeros_like(input), Tensor::zeros_like(kernel), Tensor({g.out_channels})};
  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_height * g.out_width;
  const std::size_t rows = g.in_channels * g.kernel_h * g.kernel_w;
  const auto K = detail::ConstRowMap(kernel.data().data(), static_cast<long>(g.out_channels), static_cast<long>(rows));

  const auto chunks = fixed_chunks(g.batch);
  std::vector<detail::RowMatrix> dk_part(chunks.size(), detail::RowMatrix::Zero(static_cast<long>(g.out_channels),
                                                                                static_cast<long>(rows)));
  std::vector<std::vector<double>> db_part(chunks.size(), std::vector<double>(g.out_channels, 0.0));
  parallel_for(chunks.size(), [&](std::size_t ci) {
    const bool pointwise = detail::is_pointwise(g);
    std::vector<double> col(pointwise ? 0 : rows * out_plane);
    detail::RowMatrix dcol(static_cast<long>(rows), static_cast<long>(out_plane));
    for (std::size_t n = chunks[ci].begin; n < chunks[ci].end; ++n) {
      const double* xp = input.data().data() + n * g.in_channels * in_plane;
      if (!pointwise) detail::im2col(xp, g, col.data());
      const auto C = detail::ConstRowMap(pointwise ? xp : col.data(), static_cast<long>(rows), static_cast<long>(out_plane));
      const auto dY = detail::ConstRowMap(grad_out.data().data() + n * g.out_channels * out_plane,
                                          static_cast<long>(g.out_channels), static_cast<long>(out_plane));
      dk_part[ci].noalias() += dY * C.transpose();
      for (std::size_t o = 0; o < g.out_channels; ++o) db_part[ci][o] += dY.row(static_cast<long>(o)).sum();
      double* dxp = grads.input.data().data() + n * g.in_channels * in_plane;
      if (pointwise) {
        detail::RowMap(dxp, static_cast<long>(rows), static_cast<long>(out_plane)).noalias() = K.transpose() * dY;
      } else {
        dcol.noalias() = K.transpose() * dY;
        detail::col2im_add(dcol.data(), g, dxp);
      }
    }
  });
  for (std::size_t ci = 0; ci < chunks.size(); ++ci) {
    for (std::size_t i = 0; i < kernel.size(); ++i) grads.kernel[i] += dk_part[ci].data()[i];
    for (std::size_t o = 0; o < g.out_channels; ++o) grads.bias[o] += db_part[ci][o];
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.
// ---------------------------------------------------------------------------

enum class BnMode { kTrain, kEval };

inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;

struct BnCache {
  BnMode mode = BnMode::kEval;
  Tensor x_hat;
  std::vector<double> inv_std;
};

namespace detail {

inline void check_bn_args(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                          const Tensor& var, double eps) {
  x.require_rank(4, "batchnorm2d input");
  const std::size_t c = x.dim(1);
  for (const Tensor* t : {&gamma, &beta, &mean, &var}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw DimensionError("batchnorm2d parameter shape " + shape_str(t->shape()) + " for " + std::to_string(c) +
                           " channels");
    }
  }
  if (!(eps > 0.0)) throw ConfigError("batchnorm2d eps must be positive");
}

inline Tensor bn_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::span<const double> mean,
                       std::span<const double> inv_std, BnCache* cache) {
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  Tensor x_hat = cache ? Tensor(x.shape()) : Tensor();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* xp = x.data().data() + (n * C + c) * plane;
      double* yp = y.data().data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        double xh = (xp[i] - mean[c]) * inv_std[c];
        yp[i] = gamma[c] * xh + beta[c];
        if (cache) x_hat[(n * C + c) * plane + i] = xh;
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std.assign(inv_std.begin(), inv_std.end());
  }
  return y;
}

}  // namespace detail

/// Eval mode: y = gamma * (x - running_mean) / sqrt(running_var + eps) + beta.
inline Tensor batchnorm2d_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                               const Tensor& running_var, double eps = kBnEps, BnCache* cache = nullptr) {
  detail::check_bn_args(x, gamma, beta, running_mean, running_var, eps);
  std::vector<double> inv_std(x.dim(1));
  for (std::size_t c = 0; c < inv_std.size(); ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  if (cache) cache->mode = BnMode::kEval;
  return detail::bn_apply(x, gamma, beta, running_mean.data(), inv_std, cache);
}

/// Train mode: normalizes with biased batch statistics, then updates running statistics
/// with `momentum` (running variance receives the unbiased batch variance).
inline Tensor batchnorm2d_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                                Tensor& running_var, double eps = kBnEps, double momentum = kBnMomentum,
                                BnCache* cache = nullptr) {
  detail::check_bn_args(x, gamma, beta, running_mean, running_var, eps);
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t count = N * plane;
  if (count < 2) throw InputError("batchnorm2d train mode needs at least 2 values per channel");
  std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* xp = x.data().data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += xp[i];
    }
    mean[c] = s / static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* xp = x.data().data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) ss += (xp[i] - mean[c]) * (xp[i] - mean[c]);
    }
    var[c] = ss / static_cast<double>(count);
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    const double unbiased = ss / static_cast<double>(count - 1);
    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
  }
  if (cache) cache->mode = BnMode::kTrain;
  return detail::bn_apply(x, gamma, beta, mean, inv_std, cache);
}

inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, double eps, BnMode mode, BnCache* cache = nullptr) {
  if (mode == BnMode::kTrain) return batchnorm2d_train(x, gamma, beta, running_mean, running_var, eps, kBnMomentum, cache);
  return batchnorm2d_eval(x, gamma, beta, running_mean, running_var, eps, cache);
}

struct BnGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

inline BnGrads batchnorm2d_backward(const BnCache& cache, const Tensor& gamma, const Tensor& grad_out) {
  grad_out.require_same_shape(cache.x_hat, "batchnorm2d_backward");
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), plane = grad_out.dim(2) * grad_out.dim(3);
  const double count = static_cast<double>(N * plane);
  BnGrads g{Tensor(grad_out.shape()), Tensor({C}), Tensor({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xh += grad_out[base + i] * cache.x_hat[base + i];
      }
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xh;
    const double scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (cache.mode == BnMode::kEval) {
          g.input[base + i] = scale * grad_out[base + i];
        } else {
          g.input[base + i] =
              scale * (grad_out[base + i] - sum_dy / count - cache.x_hat[base + i] * sum_dy_xh / count);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling, affine head, loss.
// ---------------------------------------------------------------------------

inline Tensor global_avg_pool(const Tensor& x) {
  x.require_rank(4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += x[i * plane + p];
    out[i] = s / static_cast<double>(plane);
  }
  return out;
}

inline Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  Tensor gx(input_shape);
  const std::size_t plane = input_shape[2] * input_shape[3];
  if (grad_out.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw DimensionError("global_avg_pool_backward grad shape " + shape_str(grad_out.shape()));
  }
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const double v = grad_out[i] / static_cast<double>(plane);
    std::fill_n(gx.data().data() + i * plane, plane, v);
  }
  return gx;
}

/// out[n,k] = bias[k] + sum_d weight[k,d] * input[n,d]
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  input.require_rank(2, "linear input");
  weight.require_rank(2, "linear weight");
  const std::size_t N = input.dim(0), D = input.dim(1), K = weight.dim(0);
  if (weight.dim(1) != D) {
    throw DimensionError("linear weight " + shape_str(weight.shape()) + " vs input " + shape_str(input.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != K) throw DimensionError("linear bias shape " + shape_str(bias.shape()));
  Tensor out({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = bias[k];
      for (std::size_t d = 0; d < D; ++d) s += weight.at(k, d) * input.at(n, d);
      out.at(n, k) = s;
    }
  }
  return out;
}

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline LinearGrads linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out) {
  const std::size_t N = input.dim(0), D = input.dim(1), K = weight.dim(0);
  if (grad_out.shape() != Shape{N, K}) throw DimensionError("linear_backward grad shape " + shape_str(grad_out.shape()));
  LinearGrads g{Tensor(input.shape()), Tensor(weight.shape()), Tensor({K})};
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      const double go = grad_out.at(n, k);
      g.bias[k] += go;
      for (std::size_t d = 0; d < D; ++d) {
        g.weight.at(k, d) += go * input.at(n, d);
        g.input.at(n, d) += go * weight.at(k, d);
      }
    }
  }
  return g;
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  logits.require_rank(2, "softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    double mx = logits.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(n, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (p.at(n, k) = std::exp(logits.at(n, k) - mx));
    for (std::size_t k = 0; k < K; ++k) p.at(n, k) /= z;
  }
  return p;
}

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean cross-entropy over the batch; grad = (softmax - onehot) / N.
inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  logits.require_rank(2, "softmax_cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw DimensionError("softmax_cross_entropy: label count does not match batch");
  LossResult r{0.0, Tensor(logits.shape())};
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw InputError("label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
    }
    double mx = logits.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(n, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, k) - mx);
    const double log_z = std::log(z) + mx;
    r.loss += log_z - logits.at(n, static_cast<std::size_t>(y));
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits.at(n, k) - log_z);
      r.grad_logits.at(n, k) = (p - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) / static_cast<double>(N);
    }
  }
  r.loss /= static_cast<double>(N);
  return r;
}

}  // namespace repkan
