#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "repkan/data.hpp"
#include "test_util.hpp"

using namespace repkan;
using namespace repkan::testing;

namespace {

// N=6, C=1, H=1, W=1, K=2; classes "a","b"; band "x"; labels 0 1 0 1 1 0;
// pixels 0.5 -1 2 0.25 0 1.5.
const std::vector<unsigned char> kSixSampleFile = {
    0x4d, 0x53, 0x54, 0x44, 0x31, 0x00,                          // "MSTD1\0"
    0x06, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,              // N, C
    0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,              // H, W
    0x02, 0x00, 0x00, 0x00,                                      // K
    0x01, 0x00, 0x00, 0x00, 0x61,                                // "a"
    0x01, 0x00, 0x00, 0x00, 0x62,                                // "b"
    0x01, 0x00, 0x00, 0x00, 0x78,                                // "x"
    0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x01, 0x00, 0x00, 0x00,  // labels @41
    0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x80, 0xbf, 0x00, 0x00, 0x00, 0x40,  // pixels @53
    0x00, 0x00, 0x80, 0x3e, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xc0, 0x3f,
};

std::string format_message(const std::vector<unsigned char>& bytes) {
  try {
    mstd_decode(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

MstdDataset random_dataset(Rng& rng) {
  MstdDataset ds;
  ds.images = random_tensor({5, 3, 4, 2}, rng, -3.0, 3.0);
  for (auto& v : ds.images.data()) v = static_cast<float>(v);
  ds.labels = {0, 2, 1, 2, 0};
  ds.class_names = {"water", "", "forest"};
  ds.band_names = {"B1", "B2", "B3"};
  return ds;
}

}  // namespace

TEST(Mstd, SixSampleHexOracle) {
  const MstdDataset ds = mstd_decode(kSixSampleFile);
  EXPECT_EQ(ds.images.shape(), (Shape{6, 1, 1, 1}));
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 0, 1, 1, 0}));
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.band_names, (std::vector<std::string>{"x"}));
  EXPECT_EQ(ds.images.vec(), (std::vector<double>{0.5, -1.0, 2.0, 0.25, 0.0, 1.5}));
  EXPECT_EQ(mstd_encode(ds), kSixSampleFile);
}

TEST(Mstd, RoundTripIsBitwise) {
  Rng rng(3);
  const MstdDataset ds = random_dataset(rng);
  const auto bytes = mstd_encode(ds);
  const MstdDataset back = mstd_decode(bytes);
  EXPECT_EQ(back, ds);
  EXPECT_EQ(mstd_encode(back), bytes);
  const auto path = std::filesystem::temp_directory_path() / "repkan_roundtrip.mstd";
  mstd_write(ds, path);
  EXPECT_EQ(mstd_read(path), ds);
  std::filesystem::remove(path);
}

TEST(Mstd, ErrorsReportByteOffsets) {
  auto bad_magic = kSixSampleFile;
  bad_magic[0] = 'X';
  EXPECT_EQ(format_message(bad_magic), "format error: bad MSTD magic at byte offset 0");

  auto big_label = kSixSampleFile;
  big_label[43] = 0x02;
  EXPECT_EQ(format_message(big_label), "format error: label 2 >= class count 2 at byte offset 43");

  auto truncated = kSixSampleFile;
  truncated.pop_back();
  EXPECT_NE(format_message(truncated).find("truncated image data"), std::string::npos);
  EXPECT_NE(format_message(truncated).find("at byte offset 53"), std::string::npos);

  auto zero_k = kSixSampleFile;
  zero_k[22] = 0x00;
  EXPECT_EQ(format_message(zero_k), "format error: zero class count at byte offset 22");

  auto trailing = kSixSampleFile;
  trailing.push_back(0);
  EXPECT_EQ(format_message(trailing), "format error: 1 trailing bytes at byte offset 77");

  const std::vector<unsigned char> short_header(kSixSampleFile.begin(), kSixSampleFile.begin() + 12);
  EXPECT_NE(format_message(short_header).find("truncated while reading C"), std::string::npos);
}

TEST(Mstd, EncodeRejectsInconsistentDataset) {
  Rng rng(4);
  MstdDataset ds = random_dataset(rng);
  ds.labels[0] = 3;
  EXPECT_THROW(mstd_encode(ds), FormatError);
  ds = random_dataset(rng);
  ds.class_names.clear();
  EXPECT_THROW(mstd_encode(ds), FormatError);
}

TEST(Synthetic, CountsAndDeterminism) {
  SyntheticSpec spec;
  spec.per_class = 30;
  const MstdDataset a = generate_synthetic(spec);
  std::vector<int> counts(4, 0);
  for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
  EXPECT_EQ(counts, (std::vector<int>{30, 30, 30, 30}));
  EXPECT_EQ(a.images.shape(), (Shape{120, 13, 16, 16}));
  EXPECT_EQ(mstd_encode(a), mstd_encode(generate_synthetic(spec)));
  spec.seed = 8;
  EXPECT_NE(mstd_encode(a), mstd_encode(generate_synthetic(spec)));
}

TEST(Synthetic, NoiseFreePixelsLieInClassInterval) {
  SyntheticSpec spec;
  spec.per_class = 10;
  spec.noise = 0.0;
  spec.height = spec.width = 4;
  const MstdDataset ds = generate_synthetic(spec);
  const auto intervals = class_intervals(4);
  const std::size_t plane = 16;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    const auto [lo, hi] = intervals[static_cast<std::size_t>(ds.labels[n])];
    for (std::size_t p = 0; p < plane; ++p) {
      const double d = planted_index(ds.images[(n * 13 + 3) * plane + p], ds.images[(n * 13 + 7) * plane + p]);
      EXPECT_GE(d, lo);
      EXPECT_LT(d, hi);
    }
  }
  EXPECT_EQ(certificate_accuracy(ds, 3, 7), 1.0);
}

TEST(Synthetic, CertificateAtDefaultNoise) {
  const MstdDataset ds = generate_synthetic(SyntheticSpec{});
  EXPECT_GE(certificate_accuracy(ds, 3, 7), 0.98);
}

TEST(Synthetic, IntervalPartition) {
  const auto four = class_intervals(4);
  EXPECT_NEAR(four[0].first, -0.8, 1e-15);
  EXPECT_NEAR(four[1].first, -0.4, 1e-15);
  EXPECT_NEAR(four[2].first, 0.0, 1e-15);
  EXPECT_NEAR(four[3].first, 0.4, 1e-15);
  EXPECT_EQ(four[3].second, 0.8);
  EXPECT_THROW(class_intervals(9), ConfigError);
  SyntheticSpec spec;
  spec.classes = 9;
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
}

TEST(Synthetic, BandNamesAndCustomBands) {
  SyntheticSpec spec;
  spec.channels = 4;
  spec.per_class = 2;
  spec.height = spec.width = 2;
  const MstdDataset ds = generate_synthetic(spec);
  EXPECT_EQ(ds.band_names, (std::vector<std::string>{"B0_Red", "B1_NIR", "B2", "B3"}));
  EXPECT_EQ(generate_synthetic(SyntheticSpec{}).band_names[7], "B08_NIR");
  spec.red_band = spec.nir_band = 2;
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
}

TEST(Normalize, MomentsAfterNormalization) {
  Rng rng(5);
  Tensor t = random_tensor({6, 3, 4, 4}, rng, -2.0, 7.0);
  normalize(t, compute_band_stats(t));
  const BandStats s = compute_band_stats(t);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_LT(std::abs(s.mean[c]), 1e-10);
    EXPECT_NEAR(s.std[c], 1.0, 1e-10);
  }
}

TEST(Normalize, IdentityStatsLeaveDataUnchanged) {
  Rng rng(6);
  Tensor t = random_tensor({2, 2, 3, 3}, rng);
  const Tensor before = t;
  normalize(t, BandStats{{0.0, 0.0}, {1.0, 1.0}});
  EXPECT_EQ(t.vec(), before.vec());
}

TEST(Normalize, ConstantBandNamesTheBand) {
  Tensor t({2, 2, 2, 2}, 1.0);
  t[0] = 2.0;  // band 0 varies, band 1 is constant
  try {
    normalize(t, compute_band_stats(t), {"B04_Red", "B08_NIR"});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("B08_NIR"), std::string::npos);
  }
}

TEST(Normalize, SyntheticBulkWithinThreeSigma) {
  MstdDataset ds = generate_synthetic(SyntheticSpec{});
  normalize(ds.images, compute_band_stats(ds.images));
  EXPECT_GE(fraction_within(ds.images, 3.0), 0.95);
}

TEST(Split, StratifiedAndDisjoint) {
  std::vector<int> labels;
  for (int k = 0; k < 3; ++k) labels.insert(labels.end(), 10, k);
  const auto [train, val] = stratified_split(labels, 3, 0.2, 9);
  EXPECT_EQ(train.size(), 24u);
  EXPECT_EQ(val.size(), 6u);
  std::vector<int> per(3, 0);
  for (auto i : val) ++per[static_cast<std::size_t>(labels[i])];
  EXPECT_EQ(per, (std::vector<int>{2, 2, 2}));
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(val.begin(), val.end());
  EXPECT_EQ(all.size(), 30u);
  EXPECT_EQ(stratified_split(labels, 3, 0.2, 9), std::make_pair(train, val));
  EXPECT_THROW(stratified_split(labels, 3, 1.0, 9), ConfigError);
}

TEST(Augment, FlipTwiceIsIdentity) {
  Rng rng(7);
  Tensor t = random_tensor({2, 3, 4, 5}, rng);
  const Tensor before = t;
  Rng a(1);
  AugmentOptions opt{1.0, 0};
  augment(t, a, opt);
  EXPECT_NE(t.vec(), before.vec());
  augment(t, a, opt);
  EXPECT_EQ(t.vec(), before.vec());
}

TEST(Augment, SymmetricImageIsFlipInvariant) {
  Tensor t({1, 1, 2, 4});
  const double row[] = {1.0, 2.0, 2.0, 1.0};
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t w = 0; w < 4; ++w) t.at(0, 0, h, w) = row[w] * static_cast<double>(h + 1);
  }
  const Tensor before = t;
  hflip_sample(t, 0);
  EXPECT_EQ(t.vec(), before.vec());
}

TEST(Augment, SeededReplayAndShape) {
  Rng rng(8);
  const Tensor src = random_tensor({4, 2, 6, 6}, rng);
  Tensor a = src, b = src;
  Rng ra(42), rb(42);
  augment(a, ra);
  augment(b, rb);
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_EQ(a.shape(), src.shape());
}

TEST(Augment, CropShiftsContentAndZeroFills) {
  Tensor t({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) t[i] = static_cast<double>(i + 1);
  // Search seeds for a pure crop with a known shift; verify against a direct shift.
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng probe(seed);
    probe.uniform();  // the flip draw
    const long dy = static_cast<long>(probe.below(3)) - 1;
    const long dx = static_cast<long>(probe.below(3)) - 1;
    if (dy == 0 && dx == 0) continue;
    Tensor a = t;
    Rng r(seed);
    augment(a, r, AugmentOptions{0.0, 1});
    for (long h = 0; h < 3; ++h) {
      for (long w = 0; w < 3; ++w) {
        const long sh = h + dy, sw = w + dx;
        const double expect = (sh >= 0 && sw >= 0 && sh < 3 && sw < 3) ? t[static_cast<std::size_t>(sh * 3 + sw)] : 0.0;
        EXPECT_EQ(a[static_cast<std::size_t>(h * 3 + w)], expect);
      }
    }
    return;
  }
  FAIL() << "no shifted crop found";
}

TEST(Import, ManifestOfRawFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "repkan_import_test";
  std::filesystem::create_directories(dir);
  const std::vector<std::pair<std::string, std::string>> rows{{"a.f32", "river"}, {"b.f32", "forest"}, {"c.f32", "river"}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<float> px(2 * 2 * 3);
    for (std::size_t j = 0; j < px.size(); ++j) px[j] = static_cast<float>(i * 100 + j);
    std::ofstream(dir / rows[i].first, std::ios::binary).write(reinterpret_cast<const char*>(px.data()), static_cast<long>(px.size() * 4));
  }
  {
    std::ofstream m(dir / "manifest.csv");
    m << "path,label\n";
    for (const auto& r : rows) m << r.first << ',' << r.second << '\n';
  }
  const MstdDataset ds = mstd_import(dir / "manifest.csv", 2, 2, 3);
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"forest", "river"}));
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(ds.images.at(2, 1, 1, 2), 211.0);

  {
    std::ofstream m(dir / "bad.csv");
    m << "a.f32,river,extra\n";
  }
  EXPECT_THROW(mstd_import(dir / "bad.csv", 2, 2, 3), FormatError);
  EXPECT_THROW(mstd_import(dir / "manifest.csv", 2, 2, 2), FormatError);
  std::filesystem::remove_all(dir);
}
