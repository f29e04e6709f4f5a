#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/interpret.hpp"
#include "repkan/model.hpp"
#include "repkan/spline.hpp"

namespace repkan {

/// Weighted least-squares polynomial, coefficients highest degree first. The abscissa is
/// mapped affinely to [-1, 1] before solving the normal equations; coefficients are mapped
/// back to x. Empty `weights` means all ones.
inline std::vector<double> polyfit(std::span<const double> xs, std::span<const double> ys, int degree,
                                   std::span<const double> weights = {}) {
  if (degree < 0) throw InputError("polynomial degree must be non-negative");
  if (xs.size() != ys.size()) throw DimensionError("polyfit xs and ys differ in length");
  if (!weights.empty() && weights.size() != xs.size()) throw DimensionError("polyfit weights differ in length");
  const auto m = static_cast<std::size_t>(degree) + 1;
  if (xs.size() < m) throw InputError("polyfit needs at least degree+1 points");
  const auto [mn, mx] = std::minmax_element(xs.begin(), xs.end());
  if (!(*mx > *mn)) throw NumericError("singular fit: all abscissae identical");
  const double c = 0.5 * (*mx + *mn), s = 0.5 * (*mx - *mn);

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  std::vector<double> pw(2 * m - 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    const double t = (xs[i] - c) / s;
    pw[0] = 1.0;
    for (std::size_t p = 1; p < pw.size(); ++p) pw[p] = pw[p - 1] * t;
    for (std::size_t r = 0; r < m; ++r) {
      b(static_cast<Eigen::Index>(r)) += w * pw[r] * ys[i];
      for (std::size_t q = 0; q < m; ++q) A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) += w * pw[r + q];
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-12);
  if (qr.rank() < static_cast<Eigen::Index>(m)) throw NumericError("singular fit: normal equations are rank deficient");
  const Eigen::VectorXd a = qr.solve(b);  // ascending powers of t

  // sum_j a_j ((x - c) / s)^j expanded binomially into ascending powers of x.
  std::vector<double> asc(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const double scale = a(static_cast<Eigen::Index>(j)) / std::pow(s, static_cast<double>(j));
    double binom = 1.0;
    for (std::size_t i = 0; i <= j; ++i) {
      asc[i] += scale * binom * std::pow(-c, static_cast<double>(j - i));
      binom = binom * static_cast<double>(j - i) / static_cast<double>(i + 1);
    }
  }
  return {asc.rbegin(), asc.rend()};
}

/// Horner evaluation, coefficients highest degree first.
inline double polyval(std::span<const double> coeffs, double x) {
  double y = 0.0;
  for (double c : coeffs) y = y * x + c;
  return y;
}

inline std::vector<double> polyval(std::span<const double> coeffs, std::span<const double> xs) {
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = polyval(coeffs, xs[i]);
  return out;
}

/// 1 - SS_res / SS_tot, optionally weighted.
inline double r_squared(std::span<const double> ys, std::span<const double> fitted, std::span<const double> weights = {}) {
  if (ys.size() != fitted.size()) throw DimensionError("r_squared inputs differ in length");
  if (!weights.empty() && weights.size() != ys.size()) throw DimensionError("r_squared weights differ in length");
  if (ys.size() < 2) throw InputError("r_squared needs at least 2 values");
  double wsum = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    wsum += w;
    mean += w * ys[i];
  }
  if (!(wsum > 0.0)) throw NumericError("r_squared weights sum to zero");
  mean /= wsum;
  double res = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    res += w * (ys[i] - fitted[i]) * (ys[i] - fitted[i]);
    tot += w * (ys[i] - mean) * (ys[i] - mean);
  }
  if (!(tot > 0.0)) throw NumericError("r_squared undefined: target values have zero variance");
  return 1.0 - res / tot;
}

/// "-0.0181x^3 - 0.0245x^2 + 0.1349x + 0.1166"; coefficients highest degree first.
inline std::string format_equation(std::span<const double> coeffs) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < coeffs.size(); ++i) {
    const std::size_t p = coeffs.size() - 1 - i;
    const double c = coeffs[i];
    const bool neg = std::signbit(c) && std::abs(c) >= 0.00005;
    if (i == 0) {
      std::snprintf(buf, sizeof buf, "%s%.4f", neg ? "-" : "", std::abs(c));
    } else {
      std::snprintf(buf, sizeof buf, " %c %.4f", neg ? '-' : '+', std::abs(c));
    }
    out += buf;
    if (p == 1) out += "x";
    if (p > 1) out += "x^" + std::to_string(p);
  }
  return out;
}

inline constexpr int kMaxFitDegree = 3;
inline constexpr std::size_t kDefaultDistillSamples = 200;

struct SymbolicFit {
  int class_id = 0;
  std::size_t band = 0;
  std::size_t n_samples = 0;
  double lo = 0.0, hi = 0.0;
  bool density_weighted = false;
  std::array<std::vector<double>, kMaxFitDegree> coeffs;  // [d-1]: degree d, highest first
  std::array<double, kMaxFitDegree> r2{};
  std::string equation;                                   // degree-3 fit
};

/// Fits degrees 1..3 to phi sampled uniformly over the spline domain. With `weights`
/// (one per sample) the fits and R^2 values are weighted.
inline SymbolicFit fit_edge(const SplineEdge& edge, std::size_t n_samples, std::span<const double> weights = {}) {
  if (n_samples < 8) throw InputError("distillation needs at least 8 samples");
  SymbolicFit f;
  f.n_samples = n_samples;
  f.lo = edge.grid.lo();
  f.hi = edge.grid.hi();
  f.density_weighted = !weights.empty();
  const auto xs = linspace(f.lo, f.hi, n_samples);
  const auto ys = sample_edge(edge, xs);
  for (int d = 1; d <= kMaxFitDegree; ++d) {
    auto& c = f.coeffs[static_cast<std::size_t>(d - 1)];
    c = polyfit(xs, ys, d, weights);
    f.r2[static_cast<std::size_t>(d - 1)] = r_squared(ys, polyval(c, xs), weights);
  }
  f.equation = format_equation(f.coeffs[kMaxFitDegree - 1]);
  return f;
}

/// Per-sample weights proportional to how often the band's values (as seen by the filter's
/// stage layer) fall in each of the 64 histogram bins.
inline std::vector<double> density_weights(const RepKanModel& model, const Tensor& images, std::span<const int> labels, int classes,
                                           const ExpertFilter& filter, std::size_t band, std::size_t n_samples) {
  const CurveData d = sample_curve_with_distribution(model, images, labels, classes, band, filter, n_samples);
  std::vector<double> bins(kHistogramBins, 0.0);
  double total = 0.0;
  for (const auto& row : d.counts) {
    for (std::size_t b = 0; b < kHistogramBins; ++b) bins[b] += static_cast<double>(row[b]);
  }
  for (double v : bins) total += v;
  if (!(total > 0.0)) throw DataError("no pixel values available for density weighting");
  const double lo = d.bin_edges.front(), width = (d.bin_edges.back() - lo) / static_cast<double>(kHistogramBins);
  std::vector<double> w(d.xs.size());
  for (std::size_t i = 0; i < d.xs.size(); ++i) {
    const auto b = static_cast<std::size_t>(std::clamp(std::floor((d.xs[i] - lo) / width), 0.0, static_cast<double>(kHistogramBins - 1)));
    w[i] = bins[b] / total;
  }
  return w;
}

inline SymbolicFit distill_edge(const RepKanModel& model, const ExpertFilter& filter, std::size_t band,
                                std::size_t n_samples = kDefaultDistillSamples, std::span<const double> weights = {}) {
  SymbolicFit f = fit_edge(expert_edge(model, filter, band), n_samples, weights);
  f.class_id = filter.class_id;
  f.band = band;
  return f;
}

struct AblationRow {
  int class_id = 0;
  std::size_t band = 0;
  bool ok = false;
  SymbolicFit fit;
  std::string error;
};

struct AblationOptions {
  std::size_t stage = 1;
  std::size_t n_samples = kDefaultDistillSamples;
  bool density_weighted = false;
};

/// One row per (class with an expert filter, band), classes ascending then bands in the
/// given order. Per-row failures are recorded in `error`.
inline std::vector<AblationRow> ablation_table(const RepKanModel& model, const Tensor& images, std::span<const int> labels, int classes,
                                               std::span<const std::size_t> bands, const AblationOptions& opt = {}) {
  const ExpertSelection sel = select_expert_filters(model, images, labels, classes, opt.stage);
  std::vector<AblationRow> rows;
  for (const auto& f : sel.filters) {
    for (std::size_t band : bands) {
      AblationRow r;
      r.class_id = f.class_id;
      r.band = band;
      try {
        std::vector<double> w;
        if (opt.density_weighted) w = density_weights(model, images, labels, classes, f, band, opt.n_samples);
        r.fit = distill_edge(model, f, band, opt.n_samples, w);
        r.ok = true;
      } catch (const Error& e) {
        r.error = e.what();
      }
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

/// Columns class,band,r2_d1,r2_d2,r2_d3,equation,error. Band cells hold band names when
/// available; failed rows leave the numeric cells empty.
inline void write_ablation_csv(std::span<const AblationRow> rows, const std::vector<std::string>& class_names,
                               const std::vector<std::string>& band_names, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "class,band,r2_d1,r2_d2,r2_d3,equation,error\n";
  auto clean = [](std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  char buf[128];
  for (const auto& r : rows) {
    const auto k = static_cast<std::size_t>(r.class_id);
    out << (k < class_names.size() ? class_names[k] : std::to_string(r.class_id)) << ','
        << (r.band < band_names.size() ? band_names[r.band] : std::to_string(r.band)) << ',';
    if (r.ok) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,", r.fit.r2[0], r.fit.r2[1], r.fit.r2[2]);
      out << buf << r.fit.equation << ",\n";
    } else {
      out << ",,,," << clean(r.error) << '\n';
    }
  }
}

}  // namespace repkan
