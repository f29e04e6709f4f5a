#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "repkan/data.hpp"
#include "repkan/error.hpp"
#include "repkan/model.hpp"
#include "repkan/spline.hpp"

namespace repkan {

enum class EnergyMetric { kL1, kL2 };

inline const char* energy_metric_name(EnergyMetric m) { return m == EnergyMetric::kL1 ? "l1" : "l2"; }

inline EnergyMetric parse_energy_metric(const std::string& s) {
  if (s == "l1") return EnergyMetric::kL1;
  if (s == "l2") return EnergyMetric::kL2;
  throw ConfigError("energy metric must be l1 or l2, got " + s);
}

/// Mean |activation| (L1) or mean squared activation (L2) of each path at one stage layer.
struct EnergyReport {
  int class_id = 0;
  std::size_t stage = 1;
  std::size_t samples = 0;
  double spline_energy = 0.0;
  double spatial_energy = 0.0;
  double spline_ratio = 0.0;
};

struct EnergyProfile {
  EnergyMetric metric = EnergyMetric::kL1;
  std::vector<EnergyReport> rows;
  std::vector<std::string> warnings;
};

struct ExpertFilter {
  int class_id = 0;
  std::size_t stage = 1;
  std::size_t channel = 0;
  double mean_activation = 0.0;
};

struct ExpertSelection {
  std::vector<ExpertFilter> filters;
  std::vector<std::string> warnings;
};

namespace detail {

inline constexpr std::size_t kInterpretBatch = 32;

/// Calls fn(first_sample, layer_input) for consecutive batches of the stage layer's eval input.
template <typename Fn>
void for_stage_batches(const RepKanModel& model, const Tensor& images, std::size_t stage, Fn&& fn) {
  model.check_images(images);
  const std::size_t N = images.dim(0);
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < N; b += kInterpretBatch) {
    idx.resize(std::min(kInterpretBatch, N - b));
    std::iota(idx.begin(), idx.end(), b);
    fn(b, model.stage_layer_input(gather_samples(images, idx), stage));
  }
}

/// Sum of values after sorting, so the result does not depend on input order.
inline double order_free_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline double energy_of(std::span<const double> v, EnergyMetric m) {
  double s = 0.0;
  for (double x : v) s += m == EnergyMetric::kL1 ? std::abs(x) : x * x;
  return s / static_cast<double>(v.size());
}

inline void check_labels(const Tensor& images, std::span<const int> labels, int classes) {
  if (images.rank() != 4 || images.dim(0) != labels.size()) throw DimensionError("images and labels differ in count");
  for (int l : labels) {
    if (l < 0 || l >= classes) throw InputError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
  }
}

}  // namespace detail

/// Per class: energy of the spline path and of the spatial path of stage_layer(stage),
/// averaged over the class's samples and all (o, h, w). Classes without samples are omitted
/// with a warning.
inline EnergyProfile energy_profile(const RepKanModel& model, const Tensor& images, std::span<const int> labels, int classes,
                                    std::size_t stage, EnergyMetric metric = EnergyMetric::kL1) {
  detail::check_labels(images, labels, classes);
  const RepKanLayer& layer = model.stage_layer(stage);
  std::vector<double> spline(labels.size()), spatial(labels.size());
  detail::for_stage_batches(model, images, stage, [&](std::size_t first, const Tensor& x) {
    const Tensor sp = layer.spectral_forward(x);
    const Tensor sa = layer.spatial_forward(x);
    const std::size_t per = sp.size() / sp.dim(0);
    for (std::size_t i = 0; i < sp.dim(0); ++i) {
      spline[first + i] = detail::energy_of(sp.data().subspan(i * per, per), metric);
      spatial[first + i] = detail::energy_of(sa.data().subspan(i * per, per), metric);
    }
  });
  EnergyProfile out;
  out.metric = metric;
  for (int k = 0; k < classes; ++k) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == k) {
        a.push_back(spline[i]);
        b.push_back(spatial[i]);
      }
    }
    if (a.empty()) {
      out.warnings.push_back("class " + std::to_string(k) + " has no samples; omitted from energy report");
      continue;
    }
    EnergyReport r;
    r.class_id = k;
    r.stage = stage;
    r.samples = a.size();
    r.spline_energy = detail::order_free_sum(a) / static_cast<double>(a.size());
    r.spatial_energy = detail::order_free_sum(b) / static_cast<double>(b.size());
    const double total = r.spline_energy + r.spatial_energy;
    if (!(total > 0.0)) throw NumericError("class " + std::to_string(k) + " has zero energy in both paths");
    r.spline_ratio = r.spline_energy / total;
    out.rows.push_back(r);
  }
  return out;
}

inline void write_energy_csv(const EnergyProfile& p, const std::vector<std::string>& class_names, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "class,class_name,stage,metric,samples,spline_energy,spatial_energy,spline_ratio\n";
  char buf[256];
  for (const auto& r : p.rows) {
    const std::string name = static_cast<std::size_t>(r.class_id) < class_names.size() ? class_names[static_cast<std::size_t>(r.class_id)] : "";
    std::snprintf(buf, sizeof buf, "%d,%s,%zu,%s,%zu,%.10g,%.10g,%.10g", r.class_id, name.c_str(), r.stage, energy_metric_name(p.metric),
                  r.samples, r.spline_energy, r.spatial_energy, r.spline_ratio);
    out << buf << '\n';
  }
}

/// Mean spline-path activation of every output channel of stage_layer(stage), per sample.
/// Returns [N][Cout].
inline std::vector<std::vector<double>> spline_channel_means(const RepKanModel& model, const Tensor& images, std::size_t stage) {
  const RepKanLayer& layer = model.stage_layer(stage);
  std::vector<std::vector<double>> out(images.dim(0));
  detail::for_stage_batches(model, images, stage, [&](std::size_t first, const Tensor& x) {
    const Tensor sp = layer.spectral_forward(x);
    const std::size_t C = sp.dim(1), plane = sp.dim(2) * sp.dim(3);
    for (std::size_t i = 0; i < sp.dim(0); ++i) {
      out[first + i].resize(C);
      for (std::size_t o = 0; o < C; ++o) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += sp[(i * C + o) * plane + p];
        out[first + i][o] = s / static_cast<double>(plane);
      }
    }
  });
  return out;
}

/// Per class, the output channel with the highest class-mean spline-path activation
/// (ties to the lowest index). Classes without samples are skipped with a warning.
inline ExpertSelection select_expert_filters(const RepKanModel& model, const Tensor& images, std::span<const int> labels, int classes,
                                             std::size_t stage) {
  detail::check_labels(images, labels, classes);
  const auto means = spline_channel_means(model, images, stage);
  const std::size_t C = model.stage_layer(stage).out_channels();
  ExpertSelection out;
  for (int k = 0; k < classes; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == k) members.push_back(i);
    }
    if (members.empty()) {
      out.warnings.push_back("class " + std::to_string(k) + " has no samples; no expert filter selected");
      continue;
    }
    ExpertFilter best{k, stage, 0, 0.0};
    for (std::size_t o = 0; o < C; ++o) {
      std::vector<double> v;
      for (std::size_t i : members) v.push_back(means[i][o]);
      const double m = detail::order_free_sum(v) / static_cast<double>(v.size());
      if (o == 0 || m > best.mean_activation) {
        best.channel = o;
        best.mean_activation = m;
      }
    }
    out.filters.push_back(best);
  }
  return out;
}

/// phi_{o*, band} of the expert filter's stage layer.
inline SplineEdge expert_edge(const RepKanModel& model, const ExpertFilter& f, std::size_t band) {
  const RepKanLayer& layer = model.stage_layer(f.stage);
  if (band >= layer.in_channels()) {
    throw InputError("band " + std::to_string(band) + " outside [0, " + std::to_string(layer.in_channels()) + ") at stage " + std::to_string(f.stage));
  }
  if (f.channel >= layer.out_channels()) throw InputError("expert channel out of range");
  return layer.bank().edge(f.channel, band);
}

inline constexpr std::size_t kHistogramBins = 64;

struct CurveData {
  ExpertFilter filter;
  std::size_t band = 0;
  std::vector<double> xs, ys;
  std::vector<double> bin_edges;            // kHistogramBins + 1 edges over the spline domain
  std::vector<int> hist_classes;
  std::vector<std::vector<long>> counts;    // per hist class; values beyond the domain land in the end bins
};

/// The expert edge sampled at n_points over the spline domain, plus per-class histograms of
/// the band's values as seen by the stage layer (normalized pixels at stage 1).
inline CurveData sample_curve_with_distribution(const RepKanModel& model, const Tensor& images, std::span<const int> labels, int classes,
                                                std::size_t band, const ExpertFilter& filter, std::size_t n_points,
                                                std::vector<int> hist_classes = {}) {
  detail::check_labels(images, labels, classes);
  if (n_points < 2) throw InputError("curve needs at least 2 points");
  const SplineEdge edge = expert_edge(model, filter, band);
  CurveData d;
  d.filter = filter;
  d.band = band;
  const double lo = edge.grid.lo(), hi = edge.grid.hi();
  d.xs = linspace(lo, hi, n_points);
  d.ys = sample_edge(edge, d.xs);
  d.bin_edges = linspace(lo, hi, kHistogramBins + 1);
  if (hist_classes.empty()) {
    hist_classes.resize(static_cast<std::size_t>(classes));
    std::iota(hist_classes.begin(), hist_classes.end(), 0);
  }
  for (int k : hist_classes) {
    if (k < 0 || k >= classes) throw InputError("histogram class " + std::to_string(k) + " out of range");
  }
  d.hist_classes = hist_classes;
  d.counts.assign(hist_classes.size(), std::vector<long>(kHistogramBins, 0));
  const double width = (hi - lo) / static_cast<double>(kHistogramBins);
  detail::for_stage_batches(model, images, filter.stage, [&](std::size_t first, const Tensor& x) {
    const std::size_t C = x.dim(1), plane = x.dim(2) * x.dim(3);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const int label = labels[first + i];
      for (std::size_t h = 0; h < hist_classes.size(); ++h) {
        if (hist_classes[h] != label) continue;
        for (std::size_t p = 0; p < plane; ++p) {
          const double v = x[(i * C + band) * plane + p];
          const double pos = std::floor((v - lo) / width);
          const long bin = std::isfinite(pos) ? static_cast<long>(std::clamp(pos, 0.0, static_cast<double>(kHistogramBins - 1))) : 0;
          ++d.counts[h][static_cast<std::size_t>(bin)];
        }
      }
    }
  });
  return d;
}

/// Long format: series,x,value. Series "phi" holds the curve; "hist_<class name>" holds bin
/// counts at bin centres.
inline void write_curve_csv(const CurveData& d, const std::vector<std::string>& class_names, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "series,x,value\n";
  char buf[128];
  for (std::size_t i = 0; i < d.xs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "phi,%.10g,%.10g", d.xs[i], d.ys[i]);
    out << buf << '\n';
  }
  for (std::size_t h = 0; h < d.hist_classes.size(); ++h) {
    const auto k = static_cast<std::size_t>(d.hist_classes[h]);
    const std::string name = k < class_names.size() ? class_names[k] : "class" + std::to_string(k);
    for (std::size_t b = 0; b < kHistogramBins; ++b) {
      std::snprintf(buf, sizeof buf, "%.10g,%ld", 0.5 * (d.bin_edges[b] + d.bin_edges[b + 1]), d.counts[h][b]);
      out << "hist_" << name << ',' << buf << '\n';
    }
  }
}

struct Landscape {
  ExpertFilter filter;
  std::size_t band_x = 0, band_y = 0;
  std::vector<double> xs, ys;
  std::vector<double> row_terms, col_terms;  // phi_x(x_i), phi_y(y_j)
  Tensor z;                                  // [resolution, resolution], z[i][j] = phi_x(x_i) + phi_y(y_j)
};

/// Additive surface of two expert edges over the spline domain. It is separable by
/// construction: the two bands never interact inside one edge.
inline Landscape interaction_landscape(const RepKanModel& model, const ExpertFilter& filter, std::size_t band_x, std::size_t band_y,
                                       std::size_t resolution) {
  if (band_x == band_y) throw InputError("landscape bands must differ");
  if (resolution < 2) throw InputError("landscape resolution must be at least 2");
  const SplineEdge ex = expert_edge(model, filter, band_x);
  const SplineEdge ey = expert_edge(model, filter, band_y);
  Landscape l;
  l.filter = filter;
  l.band_x = band_x;
  l.band_y = band_y;
  l.xs = linspace(ex.grid.lo(), ex.grid.hi(), resolution);
  l.ys = linspace(ey.grid.lo(), ey.grid.hi(), resolution);
  l.row_terms = sample_edge(ex, l.xs);
  l.col_terms = sample_edge(ey, l.ys);
  l.z = Tensor({resolution, resolution});
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) l.z.at(i, j) = l.row_terms[i] + l.col_terms[j];
  }
  return l;
}

inline void write_landscape_csv(const Landscape& l, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "class,x,y,z\n";
  char buf[160];
  for (std::size_t i = 0; i < l.xs.size(); ++i) {
    for (std::size_t j = 0; j < l.ys.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g", l.filter.class_id, l.xs[i], l.ys[j], l.z.at(i, j));
      out << buf << '\n';
    }
  }
}

/// Signed map in [-1, 1] (divided by its max-abs; an all-zero map stays zero).
struct ReasoningMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;
  double scale = 0.0;  // max-abs before normalization
};

/// Spline-path output of the expert channel at the filter's stage for sample n,
/// nearest-neighbour upsampled to input resolution.
inline ReasoningMap reasoning_map(const RepKanModel& model, const Tensor& images, std::size_t n, const ExpertFilter& filter) {
  model.check_images(images);
  if (n >= images.dim(0)) throw InputError("sample index out of range");
  const RepKanLayer& layer = model.stage_layer(filter.stage);
  if (filter.channel >= layer.out_channels()) throw InputError("expert channel out of range");
  const std::size_t one[] = {n};
  const Tensor x = model.stage_layer_input(gather_samples(images, one), filter.stage);
  const Tensor sp = layer.spectral_forward(x);
  const std::size_t h = sp.dim(2), w = sp.dim(3);
  ReasoningMap m;
  m.height = images.dim(2);
  m.width = images.dim(3);
  m.values.resize(m.height * m.width);
  const std::size_t fy = m.height / h, fx = m.width / w;
  for (std::size_t i = 0; i < m.height; ++i) {
    for (std::size_t j = 0; j < m.width; ++j) m.values[i * m.width + j] = sp.at(0, filter.channel, i / fy, j / fx);
  }
  for (double v : m.values) m.scale = std::max(m.scale, std::abs(v));
  if (m.scale > 0.0) {
    for (double& v : m.values) v /= m.scale;
  }
  return m;
}

/// Binary PGM (P5); value v in [-1, 1] maps to round((v + 1) / 2 * 255).
inline void write_pgm(const ReasoningMap& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << "P5\n" << m.width << ' ' << m.height << "\n255\n";
  for (double v : m.values) {
    const double g = std::clamp((v + 1.0) * 0.5 * 255.0, 0.0, 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(g))));
  }
}

/// Raw little-endian f32 values, row-major.
inline void write_f32(const ReasoningMap& m, const std::filesystem::path& path) {
  ByteWriter w;
  for (double v : m.values) w.f32(static_cast<float>(v));
  write_file_bytes(path, w.data());
}

}  // namespace repkan
