#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "repkan/interpret.hpp"
#include "test_util.hpp"

using namespace repkan;
using namespace repkan::testing;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 3;
  c.stage_widths = {4, 6};
  c.blocks_per_stage = {1, 1};
  c.num_classes = 3;
  c.input_height = c.input_width = 4;
  return c;
}

struct Fixture {
  RepKanModel model = RepKanModel::create(tiny_config(), 3);
  Tensor images;
  std::vector<int> labels{0, 1, 2, 0, 1, 2};

  Fixture() {
    Rng rng(4);
    images = random_tensor({6, 3, 4, 4}, rng, -1.2, 1.2);
    model.forward(images, BnMode::kTrain);
  }
};

void silence_spatial(RepKanLayer& layer) {
  for (ConvBn* b : {&layer.branch1x1(), &layer.branch3x3()}) {
    b->bn.gamma.value.fill(0.0);
    b->bn.beta.value.fill(0.0);
  }
}

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(EnergyProfile, SilentSpatialPathGivesRatioOne) {
  Fixture f;
  for (std::size_t stage : {1u, 2u}) {
    silence_spatial(f.model.stage_layer(stage));
    const EnergyProfile p = energy_profile(f.model, f.images, f.labels, 3, stage);
    ASSERT_EQ(p.rows.size(), 3u);
    for (const auto& r : p.rows) {
      EXPECT_EQ(r.spatial_energy, 0.0);
      EXPECT_EQ(r.spline_ratio, 1.0);
      EXPECT_EQ(r.stage, stage);
    }
  }
}

TEST(EnergyProfile, SilentSplinePathGivesRatioZero) {
  Fixture f;
  f.model.stage_layer(1).bank().zero();
  for (EnergyMetric m : {EnergyMetric::kL1, EnergyMetric::kL2}) {
    const EnergyProfile p = energy_profile(f.model, f.images, f.labels, 3, 1, m);
    for (const auto& r : p.rows) {
      EXPECT_EQ(r.spline_energy, 0.0);
      EXPECT_EQ(r.spline_ratio, 0.0);
    }
  }
}

TEST(EnergyProfile, BothPathsSilentIsNumericError) {
  Fixture f;
  silence_spatial(f.model.stage_layer(1));
  f.model.stage_layer(1).bank().zero();
  EXPECT_THROW(energy_profile(f.model, f.images, f.labels, 3, 1), NumericError);
}

TEST(EnergyProfile, MatchesExplicitLoops) {
  Fixture f;
  const RepKanLayer& layer = f.model.stage_layer(1);
  const Tensor sp = layer.spectral_forward(f.images);
  const Tensor sa = layer.spatial_forward(f.images);
  for (EnergyMetric m : {EnergyMetric::kL1, EnergyMetric::kL2}) {
    const EnergyProfile p = energy_profile(f.model, f.images, f.labels, 3, 1, m);
    for (int k = 0; k < 3; ++k) {
      double es = 0.0, ea = 0.0;
      int count = 0;
      for (std::size_t n = 0; n < 6; ++n) {
        if (f.labels[n] != k) continue;
        ++count;
        double s = 0.0, a = 0.0;
        for (std::size_t o = 0; o < 4; ++o) {
          for (std::size_t h = 0; h < 4; ++h) {
            for (std::size_t w = 0; w < 4; ++w) {
              const double u = sp.at(n, o, h, w), v = sa.at(n, o, h, w);
              s += m == EnergyMetric::kL1 ? std::abs(u) : u * u;
              a += m == EnergyMetric::kL1 ? std::abs(v) : v * v;
            }
          }
        }
        es += s / 64.0;
        ea += a / 64.0;
      }
      const auto& r = p.rows[static_cast<std::size_t>(k)];
      EXPECT_EQ(r.samples, 2u);
      EXPECT_NEAR(r.spline_energy, es / count, 1e-12);
      EXPECT_NEAR(r.spatial_energy, ea / count, 1e-12);
      EXPECT_NEAR(r.spline_ratio, es / (es + ea), 1e-12);
    }
  }
}

TEST(EnergyProfile, InvariantToSampleOrder) {
  Fixture f;
  const std::vector<std::size_t> perm{5, 2, 0, 4, 1, 3};
  const Tensor shuffled = gather_samples(f.images, perm);
  std::vector<int> labels;
  for (std::size_t i : perm) labels.push_back(f.labels[i]);
  const EnergyProfile a = energy_profile(f.model, f.images, f.labels, 3, 2);
  const EnergyProfile b = energy_profile(f.model, shuffled, labels, 3, 2);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.rows[k].spline_energy, b.rows[k].spline_energy);
    EXPECT_EQ(a.rows[k].spatial_energy, b.rows[k].spatial_energy);
  }
}

TEST(EnergyProfile, EmptyClassIsOmittedWithWarning) {
  Fixture f;
  const std::vector<int> labels{0, 0, 2, 0, 2, 2};
  const EnergyProfile p = energy_profile(f.model, f.images, labels, 3, 1);
  ASSERT_EQ(p.rows.size(), 2u);
  EXPECT_EQ(p.rows[0].class_id, 0);
  EXPECT_EQ(p.rows[1].class_id, 2);
  ASSERT_EQ(p.warnings.size(), 1u);
  EXPECT_NE(p.warnings[0].find("class 1"), std::string::npos);
}

TEST(EnergyProfile, RejectsBadLabelsAndStage) {
  Fixture f;
  const std::vector<int> bad{0, 1, 3, 0, 1, 2};
  EXPECT_THROW(energy_profile(f.model, f.images, bad, 3, 1), InputError);
  const std::vector<int> short_labels{0, 1};
  EXPECT_THROW(energy_profile(f.model, f.images, short_labels, 3, 1), DimensionError);
  EXPECT_THROW(energy_profile(f.model, f.images, f.labels, 3, 3), InputError);
  EXPECT_THROW(parse_energy_metric("l3"), ConfigError);
}

TEST(EnergyProfile, CsvLayout) {
  Fixture f;
  const auto path = temp_path("repkan_energy.csv");
  write_energy_csv(energy_profile(f.model, f.images, f.labels, 3, 1), {"a", "b", "c"}, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "class,class_name,stage,metric,samples,spline_energy,spatial_energy,spline_ratio");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("0,a,1,l1,2,", 0), 0u) << line;
  std::filesystem::remove(path);
}

TEST(ExpertSelection, SingleLiveChannelIsChosen) {
  Fixture f;
  SplineBank& bank = f.model.stage_layer(1).bank();
  bank.zero();
  SplineEdge e = bank.edge(3, 1);
  e.base_weight = 1.0;
  bank.set_edge(3, 1, e);
  Tensor positive = f.images;
  for (auto& v : positive.data()) v = std::abs(v) + 0.1;
  const ExpertSelection s = select_expert_filters(f.model, positive, f.labels, 3, 1);
  ASSERT_EQ(s.filters.size(), 3u);
  for (const auto& x : s.filters) {
    EXPECT_EQ(x.channel, 3u);
    EXPECT_GT(x.mean_activation, 0.0);
  }
}

TEST(ExpertSelection, TiesGoToLowestIndex) {
  Fixture f;
  SplineBank& bank = f.model.stage_layer(1).bank();
  bank.zero();
  for (const auto& x : select_expert_filters(f.model, f.images, f.labels, 3, 1).filters) EXPECT_EQ(x.channel, 0u);
  SplineEdge e = bank.edge(1, 0);
  e.spline_weight = 1.0;
  std::fill(e.coeffs.begin(), e.coeffs.end(), 0.5);  // constant 0.5 on the domain by partition of unity
  bank.set_edge(1, 0, e);
  bank.set_edge(2, 0, e);
  Tensor inside = f.images;
  for (auto& v : inside.data()) v = std::clamp(v, -1.0, 1.0);
  for (const auto& x : select_expert_filters(f.model, inside, f.labels, 3, 1).filters) {
    EXPECT_EQ(x.channel, 1u);
    EXPECT_NEAR(x.mean_activation, 0.5, 1e-12);
  }
}

TEST(ExpertSelection, MatchesBruteForce) {
  Fixture f;
  for (std::size_t stage : {1u, 2u}) {
    const Tensor x = f.model.stage_layer_input(f.images, stage);
    const Tensor sp = f.model.stage_layer(stage).spectral_forward(x);
    const std::size_t C = sp.dim(1), H = sp.dim(2), W = sp.dim(3);
    const ExpertSelection s = select_expert_filters(f.model, f.images, f.labels, 3, stage);
    for (int k = 0; k < 3; ++k) {
      std::vector<double> means(C, 0.0);
      for (std::size_t n = 0; n < 6; ++n) {
        if (f.labels[n] != k) continue;
        for (std::size_t o = 0; o < C; ++o) {
          double m = 0.0;
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) m += sp.at(n, o, h, w);
          }
          means[o] += m / static_cast<double>(H * W) / 2.0;
        }
      }
      const auto best = static_cast<std::size_t>(std::max_element(means.begin(), means.end()) - means.begin());
      EXPECT_EQ(s.filters[static_cast<std::size_t>(k)].channel, best);
      EXPECT_NEAR(s.filters[static_cast<std::size_t>(k)].mean_activation, means[best], 1e-12);
    }
  }
}

TEST(ExpertSelection, EmptyClassWarns) {
  Fixture f;
  const std::vector<int> labels{0, 0, 0, 2, 2, 2};
  const ExpertSelection s = select_expert_filters(f.model, f.images, labels, 3, 1);
  EXPECT_EQ(s.filters.size(), 2u);
  EXPECT_EQ(s.warnings.size(), 1u);
}

TEST(Curve, MatchesEdgeForward) {
  Fixture f;
  const ExpertFilter filt{0, 1, 2, 0.0};
  const CurveData d = sample_curve_with_distribution(f.model, f.images, f.labels, 3, 1, filt, 50);
  const SplineEdge e = f.model.stage_layer(1).bank().edge(2, 1);
  ASSERT_EQ(d.xs.size(), 50u);
  EXPECT_EQ(d.xs.front(), -1.0);
  EXPECT_EQ(d.xs.back(), 1.0);
  for (std::size_t i = 0; i < d.xs.size(); ++i) EXPECT_EQ(d.ys[i], edge_forward(e, d.xs[i]));
}

TEST(Curve, ZeroEdgeIsFlat) {
  Fixture f;
  f.model.stage_layer(1).bank().zero();
  const CurveData d = sample_curve_with_distribution(f.model, f.images, f.labels, 3, 0, {0, 1, 0, 0.0}, 20);
  for (double y : d.ys) EXPECT_EQ(y, 0.0);
}

TEST(Curve, HistogramConservesPixelsAndClampsOutliers) {
  Fixture f;
  f.images.at(0, 1, 0, 0) = 5.0;
  f.images.at(3, 1, 2, 2) = -7.0;
  const CurveData d = sample_curve_with_distribution(f.model, f.images, f.labels, 3, 1, {0, 1, 0, 0.0}, 10);
  ASSERT_EQ(d.counts.size(), 3u);
  ASSERT_EQ(d.bin_edges.size(), kHistogramBins + 1);
  for (const auto& row : d.counts) {
    ASSERT_EQ(row.size(), kHistogramBins);
    EXPECT_EQ(std::accumulate(row.begin(), row.end(), 0L), 2L * 16L);
  }
  EXPECT_GE(d.counts[0].back(), 1);
  EXPECT_GE(d.counts[0].front(), 1);
  const CurveData one = sample_curve_with_distribution(f.model, f.images, f.labels, 3, 1, {0, 1, 0, 0.0}, 10, {2});
  ASSERT_EQ(one.counts.size(), 1u);
  EXPECT_EQ(one.counts[0], d.counts[2]);
}

TEST(Curve, BandOutOfRange) {
  Fixture f;
  try {
    sample_curve_with_distribution(f.model, f.images, f.labels, 3, 3, {0, 1, 0, 0.0}, 10);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("band 3"), std::string::npos);
  }
  EXPECT_THROW(sample_curve_with_distribution(f.model, f.images, f.labels, 3, 0, {0, 1, 9, 0.0}, 10), InputError);
}

TEST(Curve, CsvSeries) {
  Fixture f;
  const CurveData d = sample_curve_with_distribution(f.model, f.images, f.labels, 3, 1, {0, 1, 0, 0.0}, 5, {1});
  const auto path = temp_path("repkan_curve.csv");
  write_curve_csv(d, {"a", "b", "c"}, path);
  std::ifstream in(path);
  std::string line;
  int phi = 0, hist = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "series,x,value");
  while (std::getline(in, line)) {
    if (line.rfind("phi,", 0) == 0) ++phi;
    if (line.rfind("hist_b,", 0) == 0) ++hist;
  }
  EXPECT_EQ(phi, 5);
  EXPECT_EQ(hist, static_cast<int>(kHistogramBins));
  std::filesystem::remove(path);
}

TEST(Landscape, SeparableAndPointwise) {
  Fixture f;
  const ExpertFilter filt{1, 1, 3, 0.0};
  const Landscape l = interaction_landscape(f.model, filt, 0, 2, 9);
  const SplineEdge ex = f.model.stage_layer(1).bank().edge(3, 0);
  const SplineEdge ey = f.model.stage_layer(1).bank().edge(3, 2);
  for (std::size_t i = 0; i < 9; ++i) {
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_EQ(l.z.at(i, j), edge_forward(ex, l.xs[i]) + edge_forward(ey, l.ys[j]));
      EXPECT_NEAR(l.z.at(i, j) - l.z.at(i, 0) - l.z.at(0, j) + l.z.at(0, 0), 0.0, 1e-12);
    }
  }
}

TEST(Landscape, ZeroBankAndErrors) {
  Fixture f;
  f.model.stage_layer(1).bank().zero();
  const Landscape l = interaction_landscape(f.model, {0, 1, 0, 0.0}, 0, 1, 4);
  for (double v : l.z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(interaction_landscape(f.model, {0, 1, 0, 0.0}, 1, 1, 4), InputError);
  EXPECT_THROW(interaction_landscape(f.model, {0, 1, 0, 0.0}, 0, 1, 1), InputError);
  EXPECT_THROW(interaction_landscape(f.model, {0, 1, 0, 0.0}, 0, 3, 4), InputError);
}

TEST(ReasoningMap, ZeroBankGivesZeroMap) {
  Fixture f;
  f.model.stage_layer(1).bank().zero();
  const ReasoningMap m = reasoning_map(f.model, f.images, 0, {0, 1, 1, 0.0});
  EXPECT_EQ(m.scale, 0.0);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(ReasoningMap, IsTheNormalizedBankSlice) {
  Fixture f;
  const ExpertFilter filt{0, 1, 2, 0.0};
  const ReasoningMap m = reasoning_map(f.model, f.images, 4, filt);
  const Tensor sp = f.model.stage_layer(1).spectral_forward(f.images);
  ASSERT_EQ(m.height, 4u);
  ASSERT_EQ(m.width, 4u);
  double scale = 0.0;
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t w = 0; w < 4; ++w) scale = std::max(scale, std::abs(sp.at(4, 2, h, w)));
  }
  EXPECT_NEAR(m.scale, scale, 1e-12);
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t w = 0; w < 4; ++w) EXPECT_NEAR(m.values[h * 4 + w], sp.at(4, 2, h, w) / scale, 1e-12);
  }
}

TEST(ReasoningMap, ConstantImageGivesConstantMap) {
  Fixture f;
  Tensor img({1, 3, 4, 4});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 16; ++p) img[c * 16 + p] = 0.3 * static_cast<double>(c) - 0.4;
  }
  const ReasoningMap m = reasoning_map(f.model, img, 0, {0, 1, 1, 0.0});
  for (double v : m.values) EXPECT_EQ(std::abs(v), 1.0);
  for (double v : m.values) EXPECT_EQ(v, m.values[0]);
}

TEST(ReasoningMap, FollowsSpatialPermutation) {
  Fixture f;
  Tensor flipped = f.images;
  for (std::size_t n = 0; n < 6; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t h = 0; h < 4; ++h) {
        for (std::size_t w = 0; w < 4; ++w) flipped.at(n, c, h, w) = f.images.at(n, c, w, 3 - h);
      }
    }
  }
  const ExpertFilter filt{0, 1, 1, 0.0};
  const ReasoningMap a = reasoning_map(f.model, f.images, 2, filt);
  const ReasoningMap b = reasoning_map(f.model, flipped, 2, filt);
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t w = 0; w < 4; ++w) EXPECT_NEAR(b.values[h * 4 + w], a.values[w * 4 + (3 - h)], 1e-12);
  }
}

TEST(ReasoningMap, DeeperStageUpsamplesToInput) {
  Fixture f;
  const ReasoningMap m = reasoning_map(f.model, f.images, 1, {0, 2, 5, 0.0});
  ASSERT_EQ(m.values.size(), 16u);
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(m.values[h * 4 + w], m.values[(h / 2 * 2) * 4 + w / 2 * 2]);
  }
  EXPECT_THROW(reasoning_map(f.model, f.images, 6, {0, 2, 5, 0.0}), InputError);
  EXPECT_THROW(reasoning_map(f.model, f.images, 0, {0, 2, 6, 0.0}), InputError);
}

TEST(ReasoningMap, PgmBytes) {
  const ReasoningMap m{2, 2, {-1.0, 0.0, 0.5, 1.0}, 3.0};
  const auto path = temp_path("repkan_map.pgm");
  write_pgm(m, path);
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 4);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const auto px = [&](std::size_t i) { return static_cast<unsigned char>(bytes[header.size() + i]); };
  EXPECT_EQ(px(0), 0);
  EXPECT_EQ(px(1), 128);
  EXPECT_EQ(px(2), 191);
  EXPECT_EQ(px(3), 255);
  std::filesystem::remove(path);
}
