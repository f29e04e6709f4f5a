#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/matrix.hpp"
#include "repkan/parallel.hpp"
#include "repkan/rng.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

inline constexpr int kMaxSplineOrder = 5;

/// Uniform knot grid: G interior intervals on [lo, hi], extended by `order` knots on each side.
///
/// knot(j) = lo + (j - order) * h for j in [0, G + 2*order], h = (hi - lo) / G.
/// A degree-p basis over these knots has (G + 2*order) - p functions; the spline uses p = order,
/// giving G + order functions.
class SplineGrid {
 public:
  SplineGrid() = default;

  SplineGrid(int grid_size, int order, double lo = -1.0, double hi = 1.0)
      : grid_size_(grid_size), order_(order), lo_(lo), hi_(hi) {
    if (grid_size < 1) throw ConfigError("spline grid_size must be positive, got " + std::to_string(grid_size));
    if (order < 1 || order > kMaxSplineOrder) {
      throw ConfigError("spline order must be in [1," + std::to_string(kMaxSplineOrder) + "], got " +
                        std::to_string(order));
    }
    if (!(hi > lo)) throw ConfigError("spline domain requires hi > lo");
    h_ = (hi - lo) / grid_size;
    knots_.resize(static_cast<std::size_t>(grid_size + 2 * order + 1));
    for (std::size_t j = 0; j < knots_.size(); ++j) knots_[j] = knot(static_cast<long>(j));
  }

  int grid_size() const noexcept { return grid_size_; }
  int order() const noexcept { return order_; }
  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }
  double spacing() const noexcept { return h_; }
  const std::vector<double>& knots() const noexcept { return knots_; }

  /// Number of spline basis functions (degree = order).
  std::size_t basis_count() const noexcept { return static_cast<std::size_t>(grid_size_ + order_); }

  /// Number of basis functions of `degree` over the knot vector.
  std::size_t basis_count(int degree) const noexcept {
    return static_cast<std::size_t>(grid_size_ + 2 * order_ - degree);
  }

  /// Knot position for any integer index (the uniform pattern continued past the stored knots).
  double knot(long j) const noexcept { return lo_ + static_cast<double>(j - order_) * h_; }

  friend bool operator==(const SplineGrid& a, const SplineGrid& b) {
    return a.grid_size_ == b.grid_size_ && a.order_ == b.order_ && a.lo_ == b.lo_ && a.hi_ == b.hi_;
  }

 private:
  int grid_size_ = 0;
  int order_ = 0;
  double lo_ = -1.0;
  double hi_ = 1.0;
  double h_ = 0.0;
  std::vector<double> knots_;
};

/// Nonzero basis values at one point: functions first .. first+count-1 of the requested degree.
struct BasisSpan {
  long first = 0;
  int count = 0;
  std::array<double, kMaxSplineOrder + 1> values{};
};

/// Cox-de Boor evaluation restricted to the degree+1 functions that can be nonzero at x
/// (half-open knot intervals). Functions whose index falls outside the basis are dropped,
/// so outside [knot(0), knot(last)) the span is empty.
inline BasisSpan basis_span(const SplineGrid& grid, double x, int degree) {
  BasisSpan out;
  const auto& t = grid.knots();
  const long last_interval = static_cast<long>(t.size()) - 2;
  if (!(x >= t.front()) || !(x < t.back())) return out;
  long j = static_cast<long>(std::floor((x - t.front()) / grid.spacing()));
  j = std::clamp(j, 0L, last_interval);
  while (j > 0 && t[static_cast<std::size_t>(j)] > x) --j;
  while (j < last_interval && t[static_cast<std::size_t>(j + 1)] <= x) ++j;

  // Triangular recursion over N_{j-p..j, p}; knot(i) extends past the stored vector.
  std::array<double, kMaxSplineOrder + 1> n{}, left{}, right{};
  n[0] = 1.0;
  for (int p = 1; p <= degree; ++p) {
    left[static_cast<std::size_t>(p)] = x - grid.knot(j + 1 - p);
    right[static_cast<std::size_t>(p)] = grid.knot(j + p) - x;
    double saved = 0.0;
    for (int r = 0; r < p; ++r) {
      const double temp = n[static_cast<std::size_t>(r)] /
                          (right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(p - r)]);
      n[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r + 1)] * temp;
      saved = left[static_cast<std::size_t>(p - r)] * temp;
    }
    n[static_cast<std::size_t>(p)] = saved;
  }

  const long count = static_cast<long>(grid.basis_count(degree));
  const long lo = std::max(0L, j - degree);
  const long hi = std::min(count - 1, j);
  out.first = lo;
  for (long i = lo; i <= hi; ++i) out.values[static_cast<std::size_t>(out.count++)] = n[static_cast<std::size_t>(i - (j - degree))];
  return out;
}

/// All G + k spline basis values B_i(x).
inline std::vector<double> bspline_basis(double x, const SplineGrid& grid) {
  std::vector<double> b(grid.basis_count(), 0.0);
  const BasisSpan s = basis_span(grid, x, grid.order());
  for (int r = 0; r < s.count; ++r) b[static_cast<std::size_t>(s.first + r)] = s.values[static_cast<std::size_t>(r)];
  return b;
}

/// dB_i/dx for the spline basis: k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}.
/// Returned over the same index window as basis_span(grid, x, order).
inline BasisSpan basis_derivative_span(const SplineGrid& grid, double x) {
  const int k = grid.order();
  BasisSpan lower = basis_span(grid, x, k - 1);
  BasisSpan out;
  if (lower.count == 0) return out;
  auto lower_at = [&](long i) {
    const long r = i - lower.first;
    return (r >= 0 && r < lower.count) ? lower.values[static_cast<std::size_t>(r)] : 0.0;
  };
  const long count = static_cast<long>(grid.basis_count());
  const long lo = std::max(0L, lower.first - 1);
  const long hi = std::min(count - 1, lower.first + lower.count - 1);
  out.first = lo;
  for (long i = lo; i <= hi; ++i) {
    const double a = static_cast<double>(k) / (grid.knot(i + k) - grid.knot(i));
    const double b = static_cast<double>(k) / (grid.knot(i + k + 1) - grid.knot(i + 1));
    out.values[static_cast<std::size_t>(out.count++)] = a * lower_at(i) - b * lower_at(i + 1);
  }
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

/// One learnable univariate edge: phi(x) = w_b * silu(x) + w_s * sum_i c_i B_i(x).
struct SplineEdge {
  SplineGrid grid;
  std::vector<double> coeffs;
  double base_weight = 1.0;
  double spline_weight = 1.0;

  SplineEdge() = default;
  SplineEdge(SplineGrid g, std::vector<double> c, double wb, double ws)
      : grid(std::move(g)), coeffs(std::move(c)), base_weight(wb), spline_weight(ws) {
    if (coeffs.size() != grid.basis_count()) {
      throw DimensionError("spline edge has " + std::to_string(coeffs.size()) + " coefficients, grid needs " +
                           std::to_string(grid.basis_count()));
    }
  }
};

/// s(x) over a precomputed basis span.
inline double spline_sum(std::span<const double> coeffs, const BasisSpan& b) {
  double s = 0.0;
  for (int r = 0; r < b.count; ++r) s += coeffs[static_cast<std::size_t>(b.first + r)] * b.values[static_cast<std::size_t>(r)];
  return s;
}

inline double spline_value(const SplineEdge& edge, double x) {
  return spline_sum(edge.coeffs, basis_span(edge.grid, x, edge.grid.order()));
}

inline double edge_forward(const SplineEdge& edge, double x) {
  const double s = spline_value(edge, x);
  return edge.base_weight * silu(x) + edge.spline_weight * s;
}

struct EdgeGrads {
  double x = 0.0;
  std::vector<double> coeffs;
  double base_weight = 0.0;
  double spline_weight = 0.0;
};

inline EdgeGrads edge_backward(const SplineEdge& edge, double x, double grad_out) {
  EdgeGrads g;
  g.coeffs.assign(edge.coeffs.size(), 0.0);
  const BasisSpan b = basis_span(edge.grid, x, edge.grid.order());
  const BasisSpan db = basis_derivative_span(edge.grid, x);
  const double s = spline_sum(edge.coeffs, b);
  const double ds = spline_sum(edge.coeffs, db);
  g.x = grad_out * (edge.base_weight * silu_grad(x) + edge.spline_weight * ds);
  g.base_weight = grad_out * silu(x);
  g.spline_weight = grad_out * s;
  for (int r = 0; r < b.count; ++r) {
    g.coeffs[static_cast<std::size_t>(b.first + r)] = grad_out * edge.spline_weight * b.values[static_cast<std::size_t>(r)];
  }
  return g;
}

inline std::vector<double> sample_edge(const SplineEdge& edge, std::span<const double> xs) {
  std::vector<double> ys;
  ys.reserve(xs.size());
  for (double x : xs) ys.push_back(edge_forward(edge, x));
  return ys;
}

/// n evenly spaced points covering [lo, hi] inclusive.
inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> xs(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  if (n > 1) xs.back() = hi;
  return xs;
}

/// Cout x Cin edges over one shared grid, applied position-wise along the channel axis:
/// out[n,o,h,w] = sum_c phi_{o,c}(in[n,c,h,w]).
///
/// Parameters per edge: G + k coefficients, w_b, w_s.
class SplineBank {
 public:
  SplineBank() = default;

  SplineBank(std::size_t in_channels, std::size_t out_channels, SplineGrid grid)
      : grid_(std::move(grid)),
        in_(in_channels),
        out_(out_channels),
        coeffs_(Tensor({out_channels, in_channels, grid_.basis_count()})),
        base_weight_(Tensor({out_channels, in_channels}, 1.0)),
        spline_weight_(Tensor({out_channels, in_channels}, 1.0)) {}

  /// Base weights and coefficients uniform in +-1/sqrt(in_channels), spline weights 1.
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (auto& v : coeffs_.value.data()) v = rng.uniform(-bound, bound);
    for (auto& v : base_weight_.value.data()) v = rng.uniform(-bound, bound);
    spline_weight_.value.fill(1.0);
  }

  const SplineGrid& grid() const noexcept { return grid_; }
  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  std::size_t parameter_count() const noexcept { return in_ * out_ * (grid_.basis_count() + 2); }

  GradPair& coeffs() noexcept { return coeffs_; }
  GradPair& base_weight() noexcept { return base_weight_; }
  GradPair& spline_weight() noexcept { return spline_weight_; }
  const GradPair& coeffs() const noexcept { return coeffs_; }
  const GradPair& base_weight() const noexcept { return base_weight_; }
  const GradPair& spline_weight() const noexcept { return spline_weight_; }

  SplineEdge edge(std::size_t o, std::size_t c) const {
    const std::size_t nb = grid_.basis_count();
    const auto cs = coeffs_.value.data().subspan((o * in_ + c) * nb, nb);
    return SplineEdge(grid_, std::vector<double>(cs.begin(), cs.end()), base_weight_.value.at(o, c),
                      spline_weight_.value.at(o, c));
  }

  void set_edge(std::size_t o, std::size_t c, const SplineEdge& e) {
    if (!(e.grid == grid_)) throw DimensionError("edge grid differs from bank grid");
    const std::size_t nb = grid_.basis_count();
    std::copy(e.coeffs.begin(), e.coeffs.end(), coeffs_.value.data().begin() + static_cast<long>((o * in_ + c) * nb));
    base_weight_.value.at(o, c) = e.base_weight;
    spline_weight_.value.at(o, c) = e.spline_weight;
  }

  void zero() {
    coeffs_.value.fill(0.0);
    base_weight_.value.fill(0.0);
    spline_weight_.value.fill(0.0);
  }

  void zero_grad() {
    coeffs_.zero_grad();
    base_weight_.zero_grad();
    spline_weight_.zero_grad();
  }

  /// Per sample the bank is one matrix product: Y[Cout, HW] = W[Cout, Cin*(G+k+1)] * F, where
  /// F holds silu(x_c) and the basis values B_j(x_c) of every input channel at every pixel,
  /// and W holds w_b and w_s * c_j.
  Tensor forward(const Tensor& input) const {
    check_input(input);
    const std::size_t N = input.dim(0), plane = input.dim(2) * input.dim(3);
    Tensor out({N, out_, input.dim(2), input.dim(3)});
    const detail::RowMatrix W = effective_weights();
    const auto chunks = fixed_chunks(N);
    parallel_for(chunks.size(), [&](std::size_t ci) {
      detail::RowMatrix F(static_cast<long>(feature_rows()), static_cast<long>(plane));
      for (std::size_t n = chunks[ci].begin; n < chunks[ci].end; ++n) {
        fill_features(input, n, F, nullptr);
        detail::RowMap(out.data().data() + n * out_ * plane, static_cast<long>(out_), static_cast<long>(plane))
            .noalias() = W * F;
      }
    });
    return out;
  }

  /// Accumulates parameter gradients into the bank; returns the input gradient.
  Tensor backward(const Tensor& input, const Tensor& grad_out) {
    check_input(input);
    const std::size_t N = input.dim(0), plane = input.dim(2) * input.dim(3);
    if (grad_out.shape() != Shape{N, out_, input.dim(2), input.dim(3)}) {
      throw DimensionError("spline bank grad shape " + shape_str(grad_out.shape()));
    }
    const std::size_t nb = grid_.basis_count();
    const std::size_t rows = feature_rows();
    Tensor grad_in(input.shape());
    const detail::RowMatrix W = effective_weights();

    // Weight gradients are partial per fixed chunk, then summed in chunk order.
    const auto chunks = fixed_chunks(N);
    std::vector<detail::RowMatrix> dw(chunks.size(), detail::RowMatrix::Zero(static_cast<long>(out_), static_cast<long>(rows)));
    parallel_for(chunks.size(), [&](std::size_t ci) {
      detail::RowMatrix F(static_cast<long>(rows), static_cast<long>(plane));
      detail::RowMatrix dF(static_cast<long>(rows), static_cast<long>(plane));
      std::vector<BasisSpan> deriv(in_ * plane);
      for (std::size_t n = chunks[ci].begin; n < chunks[ci].end; ++n) {
        fill_features(input, n, F, &deriv);
        const auto dY = detail::ConstRowMap(grad_out.data().data() + n * out_ * plane, static_cast<long>(out_),
                                            static_cast<long>(plane));
        dw[ci].noalias() += dY * F.transpose();
        dF.noalias() = W.transpose() * dY;
        for (std::size_t c = 0; c < in_; ++c) {
          const double* xp = input.data().data() + (n * in_ + c) * plane;
          double* gxp = grad_in.data().data() + (n * in_ + c) * plane;
          const std::size_t r0 = c * (nb + 1);
          for (std::size_t p = 0; p < plane; ++p) {
            const BasisSpan& db = deriv[c * plane + p];
            double gx = dF(static_cast<long>(r0), static_cast<long>(p)) * silu_grad(xp[p]);
            for (int r = 0; r < db.count; ++r) {
              gx += dF(static_cast<long>(r0 + 1 + static_cast<std::size_t>(db.first + r)), static_cast<long>(p)) *
                    db.values[static_cast<std::size_t>(r)];
            }
            gxp[p] = gx;
          }
        }
      }
    });
    for (std::size_t ci = 1; ci < chunks.size(); ++ci) dw[0] += dw[ci];
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t c = 0; c < in_; ++c) {
        const std::size_t e = o * in_ + c;
        const double* g = dw[0].data() + o * rows + c * (nb + 1);
        const double* cf = coeffs_.value.data().data() + e * nb;
        base_weight_.grad[e] += g[0];
        double gs = 0.0;
        for (std::size_t j = 0; j < nb; ++j) {
          coeffs_.grad[e * nb + j] += spline_weight_.value[e] * g[1 + j];
          gs += cf[j] * g[1 + j];
        }
        spline_weight_.grad[e] += gs;
      }
    }
    return grad_in;
  }

 private:
  std::size_t feature_rows() const noexcept { return in_ * (grid_.basis_count() + 1); }

  detail::RowMatrix effective_weights() const {
    const std::size_t nb = grid_.basis_count();
    detail::RowMatrix W(static_cast<long>(out_), static_cast<long>(feature_rows()));
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t c = 0; c < in_; ++c) {
        const std::size_t e = o * in_ + c;
        double* w = W.data() + o * feature_rows() + c * (nb + 1);
        w[0] = base_weight_.value[e];
        for (std::size_t j = 0; j < nb; ++j) w[1 + j] = spline_weight_.value[e] * coeffs_.value[e * nb + j];
      }
    }
    return W;
  }

  void fill_features(const Tensor& input, std::size_t n, detail::RowMatrix& F, std::vector<BasisSpan>* deriv) const {
    const std::size_t nb = grid_.basis_count();
    const std::size_t plane = static_cast<std::size_t>(F.cols());
    F.setZero();
    for (std::size_t c = 0; c < in_; ++c) {
      const double* xp = input.data().data() + (n * in_ + c) * plane;
      const std::size_t r0 = c * (nb + 1);
      for (std::size_t p = 0; p < plane; ++p) {
        const double x = xp[p];
        F(static_cast<long>(r0), static_cast<long>(p)) = silu(x);
        const BasisSpan b = basis_span(grid_, x, grid_.order());
        for (int r = 0; r < b.count; ++r) {
          F(static_cast<long>(r0 + 1 + static_cast<std::size_t>(b.first + r)), static_cast<long>(p)) =
              b.values[static_cast<std::size_t>(r)];
        }
        if (deriv) (*deriv)[c * plane + p] = basis_derivative_span(grid_, x);
      }
    }
  }

  void check_input(const Tensor& input) const {
    input.require_rank(4, "spline bank input");
    if (input.dim(1) != in_) {
      throw DimensionError("spline bank expects " + std::to_string(in_) + " channels, got " +
                           std::to_string(input.dim(1)));
    }
  }

  SplineGrid grid_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  GradPair coeffs_;
  GradPair base_weight_;
  GradPair spline_weight_;
};

}  // namespace repkan
