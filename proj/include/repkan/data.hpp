#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/tokenizer.hpp>

#include "repkan/error.hpp"
#include "repkan/rng.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Labeled multispectral images. Images are held in double precision and stored as f32.
struct MstdDataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> band_names;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  void validate() const {
    images.require_rank(4, "dataset images");
    if (images.dim(0) != labels.size()) throw DimensionError("dataset has " + std::to_string(images.dim(0)) + " images but " + std::to_string(labels.size()) + " labels");
    if (class_names.empty()) throw FormatError("dataset has no classes");
    if (band_names.size() != images.dim(1)) throw DimensionError("band name count differs from channel count");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes()) throw FormatError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) + " outside [0, K)");
    }
  }

  friend bool operator==(const MstdDataset&, const MstdDataset&) = default;
};

// ---------------------------------------------------------------------------
// Little-endian byte buffers.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<unsigned char>& data() const noexcept { return buf_; }
  std::vector<unsigned char> take() { return std::move(buf_); }

 private:
  std::vector<unsigned char> buf_;
};

/// Bounds-checked reader; every failure reports the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> data) : data_(data) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void bytes(void* out, std::size_t n, const char* what) {
    if (remaining() < n) fail(std::string("truncated while reading ") + what);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint16_t u16(const char* what) {
    std::uint16_t v;
    bytes(&v, 2, what);
    return v;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  float f32(const char* what) {
    float v;
    bytes(&v, 4, what);
    return v;
  }
  std::string str(const char* what) {
    const std::size_t at = pos_;
    const std::uint32_t n = u32(what);
    if (remaining() < n) fail_at(at, std::string("string length ") + std::to_string(n) + " exceeds file for " + what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const { fail_at(pos_, what); }
  [[noreturn]] static void fail_at(std::size_t at, const std::string& what) {
    throw FormatError(what + " at byte offset " + std::to_string(at));
  }

 private:
  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// MSTD container: magic "MSTD1\0", u32 N C H W K, u32-length-prefixed class names then
// band names, u16 labels[N], f32 images (NCHW).
// ---------------------------------------------------------------------------

inline constexpr char kMstdMagic[6] = {'M', 'S', 'T', 'D', '1', '\0'};

inline std::vector<unsigned char> mstd_encode(const MstdDataset& ds) {
  ds.validate();
  if (ds.class_names.size() > 65536) throw FormatError("MSTD stores labels as u16; too many classes");
  ByteWriter w;
  w.bytes(kMstdMagic, sizeof kMstdMagic);
  for (std::size_t d : ds.images.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(ds.class_names.size()));
  for (const auto& s : ds.class_names) w.str(s);
  for (const auto& s : ds.band_names) w.str(s);
  for (int l : ds.labels) w.u16(static_cast<std::uint16_t>(l));
  for (double v : ds.images.data()) w.f32(static_cast<float>(v));
  return w.take();
}

inline MstdDataset mstd_decode(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  char magic[sizeof kMstdMagic];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMstdMagic, sizeof magic) != 0) ByteReader::fail_at(0, "bad MSTD magic");
  Shape shape(4);
  const char* names[] = {"N", "C", "H", "W"};
  for (int i = 0; i < 4; ++i) {
    const std::size_t at = r.offset();
    shape[static_cast<std::size_t>(i)] = r.u32(names[i]);
    if (shape[static_cast<std::size_t>(i)] == 0) ByteReader::fail_at(at, std::string("zero ") + names[i]);
  }
  const std::size_t kat = r.offset();
  const std::uint32_t K = r.u32("K");
  if (K == 0) ByteReader::fail_at(kat, "zero class count");
  MstdDataset ds;
  for (std::uint32_t k = 0; k < K; ++k) ds.class_names.push_back(r.str("class name"));
  for (std::size_t c = 0; c < shape[1]; ++c) ds.band_names.push_back(r.str("band name"));
  ds.labels.resize(shape[0]);
  for (auto& l : ds.labels) {
    const std::size_t at = r.offset();
    l = r.u16("label");
    if (static_cast<std::uint32_t>(l) >= K) {
      ByteReader::fail_at(at, "label " + std::to_string(l) + " >= class count " + std::to_string(K));
    }
  }
  const std::size_t n = shape_numel(shape);
  if (r.remaining() / 4 < n) r.fail("truncated image data: need " + std::to_string(n * 4) + " bytes, have " + std::to_string(r.remaining()));
  std::vector<double> data(n);
  for (auto& v : data) v = r.f32("image data");
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  ds.images = Tensor(shape, std::move(data));
  return ds;
}

inline void mstd_write(const MstdDataset& ds, const std::filesystem::path& path) { write_file_bytes(path, mstd_encode(ds)); }

inline MstdDataset mstd_read(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return mstd_decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail());
  }
}

// ---------------------------------------------------------------------------
// Synthetic planted-index data.
// ---------------------------------------------------------------------------

inline constexpr double kIndexEps = 1e-6;
inline constexpr int kMaxSyntheticClasses = 8;

inline const std::vector<std::string>& sentinel2_band_names() {
  static const std::vector<std::string> names{"B01", "B02", "B03", "B04_Red", "B05", "B06", "B07",
                                              "B08_NIR", "B08A", "B09", "B10", "B11", "B12"};
  return names;
}

struct SyntheticSpec {
  int classes = 4;
  int per_class = 100;
  int channels = 13;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 7;
  double noise = 0.05;
  int red_band = -1;  // -1: band 3 for 13 channels, else 0
  int nir_band = -1;  // -1: band 7 for 13 channels, else 1

  int red() const { return red_band >= 0 ? red_band : (channels == 13 ? 3 : 0); }
  int nir() const { return nir_band >= 0 ? nir_band : (channels == 13 ? 7 : 1); }

  void validate() const {
    if (classes < 1 || classes > kMaxSyntheticClasses) {
      throw ConfigError("synthetic class count must lie in [1, " + std::to_string(kMaxSyntheticClasses) + "], got " + std::to_string(classes));
    }
    if (per_class < 1) throw ConfigError("per_class must be positive");
    if (channels < 2) throw ConfigError("synthetic data needs at least 2 channels");
    if (height < 1 || width < 1) throw ConfigError("image size must be positive");
    if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
    if (red() >= channels || nir() >= channels || red() == nir()) throw ConfigError("red and nir bands must be distinct channels");
  }
};

/// Normalized difference (nir - red) / (nir + red + eps).
inline double planted_index(double red, double nir) { return (nir - red) / (nir + red + kIndexEps); }

/// K equal intervals partitioning [-0.8, 0.8].
inline std::vector<std::pair<double, double>> class_intervals(int classes) {
  if (classes < 1 || classes > kMaxSyntheticClasses) throw ConfigError("no interval partition for " + std::to_string(classes) + " classes");
  std::vector<std::pair<double, double>> out;
  const double w = 1.6 / classes;
  for (int k = 0; k < classes; ++k) out.emplace_back(-0.8 + k * w, k + 1 == classes ? 0.8 : -0.8 + (k + 1) * w);
  return out;
}

/// Per image: red ~ U[0.2, 0.4], d drawn inside the class interval (10% margin each side),
/// nir solved from d; other bands take one class-independent mean vector. Pixels are the
/// image constants plus N(0, noise^2), rounded to f32.
inline MstdDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto intervals = class_intervals(spec.classes);
  const auto C = static_cast<std::size_t>(spec.channels);
  const auto H = static_cast<std::size_t>(spec.height), W = static_cast<std::size_t>(spec.width);
  const std::size_t N = static_cast<std::size_t>(spec.classes) * static_cast<std::size_t>(spec.per_class);

  MstdDataset ds;
  for (int k = 0; k < spec.classes; ++k) ds.class_names.push_back("class" + std::to_string(k));
  if (C == 13) {
    ds.band_names = sentinel2_band_names();
  } else {
    for (std::size_t c = 0; c < C; ++c) ds.band_names.push_back("B" + std::to_string(c));
  }
  if (spec.red() != 3 || spec.nir() != 7 || C != 13) {
    ds.band_names[static_cast<std::size_t>(spec.red())] += "_Red";
    ds.band_names[static_cast<std::size_t>(spec.nir())] += "_NIR";
  }

  Rng order_rng(spec.seed, 3);
  for (int k = 0; k < spec.classes; ++k) ds.labels.insert(ds.labels.end(), static_cast<std::size_t>(spec.per_class), k);
  order_rng.shuffle(ds.labels);

  Rng band_rng(spec.seed, 2);
  std::vector<double> band_mean(C);
  for (auto& m : band_mean) m = band_rng.uniform(0.1, 0.5);

  Rng rng(spec.seed, 1);
  ds.images = Tensor({N, C, H, W});
  std::vector<double> level = band_mean;
  for (std::size_t n = 0; n < N; ++n) {
    const auto [a, b] = intervals[static_cast<std::size_t>(ds.labels[n])];
    const double margin = 0.1 * (b - a);
    const double d = rng.uniform(a + margin, b - margin);
    const double red = rng.uniform(0.2, 0.4);
    const double nir = (red * (1.0 + d) + d * kIndexEps) / (1.0 - d);
    level[static_cast<std::size_t>(spec.red())] = red;
    level[static_cast<std::size_t>(spec.nir())] = nir;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t p = 0; p < H * W; ++p) {
        const double v = spec.noise > 0.0 ? level[c] + rng.normal(0.0, spec.noise) : level[c];
        ds.images[((n * C + c) * H * W) + p] = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return ds;
}

/// Closed-form rule: d of the image-mean red/nir values, mapped to the containing class
/// interval (values beyond the partition go to the nearest end interval).
inline std::vector<int> index_rule_predict(const Tensor& images, int red_band, int nir_band, int classes) {
  images.require_rank(4, "index rule input");
  const auto intervals = class_intervals(classes);
  const std::size_t C = images.dim(1), plane = images.dim(2) * images.dim(3);
  std::vector<int> out(images.dim(0));
  for (std::size_t n = 0; n < images.dim(0); ++n) {
    double r = 0.0, v = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      r += images[(n * C + static_cast<std::size_t>(red_band)) * plane + p];
      v += images[(n * C + static_cast<std::size_t>(nir_band)) * plane + p];
    }
    const double d = planted_index(r / static_cast<double>(plane), v / static_cast<double>(plane));
    int k = 0;
    while (k + 1 < classes && d >= intervals[static_cast<std::size_t>(k)].second) ++k;
    out[n] = k;
  }
  return out;
}

inline double certificate_accuracy(const MstdDataset& ds, int red_band, int nir_band) {
  const auto pred = index_rule_predict(ds.images, red_band, nir_band, ds.num_classes());
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ds.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

struct BandStats {
  std::vector<double> mean;
  std::vector<double> std;

  friend bool operator==(const BandStats&, const BandStats&) = default;
};

/// Per-band mean and population standard deviation over N, H, W.
inline BandStats compute_band_stats(const Tensor& images) {
  images.require_rank(4, "band statistics input");
  const std::size_t N = images.dim(0), C = images.dim(1), plane = images.dim(2) * images.dim(3);
  BandStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  const double count = static_cast<double>(N * plane);
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t p = 0; p < plane; ++p) sum += images[(n * C + c) * plane + p];
    }
    const double mean = sum / count;
    double ss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = images[(n * C + c) * plane + p] - mean;
        ss += d * d;
      }
    }
    s.mean[c] = mean;
    s.std[c] = std::sqrt(ss / count);
  }
  return s;
}

/// (x - mean) / std per band, in place. `band_names` (optional) is used in error messages.
inline void normalize(Tensor& images, const BandStats& stats, const std::vector<std::string>& band_names = {}) {
  images.require_rank(4, "normalize input");
  const std::size_t N = images.dim(0), C = images.dim(1), plane = images.dim(2) * images.dim(3);
  if (stats.mean.size() != C || stats.std.size() != C) throw DimensionError("band statistics have wrong channel count");
  for (std::size_t c = 0; c < C; ++c) {
    if (!(stats.std[c] > 0.0) || !std::isfinite(stats.std[c])) {
      const std::string name = c < band_names.size() ? band_names[c] : "band " + std::to_string(c);
      throw DataError("degenerate band " + name + ": standard deviation " + std::to_string(stats.std[c]));
    }
  }
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double* p = images.data().data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - stats.mean[c]) / stats.std[c];
    }
  }
}

/// Fraction of values inside [-bound, bound].
inline double fraction_within(const Tensor& t, double bound) {
  std::size_t k = 0;
  for (double v : t.data()) k += std::abs(v) <= bound;
  return t.empty() ? 0.0 : static_cast<double>(k) / static_cast<double>(t.size());
}

// ---------------------------------------------------------------------------
// Sample selection and augmentation.
// ---------------------------------------------------------------------------

inline Tensor gather_samples(const Tensor& images, std::span<const std::size_t> idx) {
  images.require_rank(4, "gather input");
  if (idx.empty()) throw InputError("cannot gather an empty sample set");
  const std::size_t per = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= images.dim(0)) throw InputError("sample index out of range");
    std::copy_n(images.data().begin() + static_cast<long>(idx[i] * per), per, out.data().begin() + static_cast<long>(i * per));
  }
  return out;
}

inline MstdDataset subset(const MstdDataset& ds, std::span<const std::size_t> idx) {
  MstdDataset out{gather_samples(ds.images, idx), {}, ds.class_names, ds.band_names};
  for (std::size_t i : idx) out.labels.push_back(ds.labels[i]);
  return out;
}

/// Per class, a seeded shuffle sends round(n_k * val_fraction) samples to validation.
/// Both index lists are returned in ascending order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(std::span<const int> labels, int classes,
                                                                                      double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  Rng rng(seed, 4);
  std::vector<std::size_t> train, val;
  for (int k = 0; k < classes; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == k) members.push_back(i);
    }
    rng.shuffle(members);
    const auto nv = static_cast<std::size_t>(std::llround(static_cast<double>(members.size()) * val_fraction));
    val.insert(val.end(), members.begin(), members.begin() + static_cast<long>(nv));
    train.insert(train.end(), members.begin() + static_cast<long>(nv), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

/// Mirrors sample n of a batch left-right, in place.
inline void hflip_sample(Tensor& batch, std::size_t n) {
  const std::size_t C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t h = 0; h < H; ++h) {
      double* row = batch.data().data() + ((n * C + c) * H + h) * W;
      std::reverse(row, row + W);
    }
  }
}

struct AugmentOptions {
  double flip_probability = 0.5;
  int pad = 4;
};

/// Independent per-sample horizontal flip, then a random crop of the zero-padded image back
/// to H x W. Every sample draws its flip and both offsets, so the stream is fixed by N.
inline void augment(Tensor& batch, Rng& rng, const AugmentOptions& opt = {}) {
  batch.require_rank(4, "augment input");
  const std::size_t C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  const auto pad = static_cast<long>(opt.pad);
  if (pad < 0) throw ConfigError("crop padding must be non-negative");
  std::vector<double> src(C * H * W);
  for (std::size_t n = 0; n < batch.dim(0); ++n) {
    const bool flip = rng.bernoulli(opt.flip_probability);
    const long dy = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    const long dx = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    if (flip) hflip_sample(batch, n);
    if (dy == 0 && dx == 0) continue;
    double* img = batch.data().data() + n * C * H * W;
    std::copy_n(img, C * H * W, src.begin());
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
          const long sh = static_cast<long>(h) + dy, sw = static_cast<long>(w) + dx;
          const bool inside = sh >= 0 && sw >= 0 && sh < static_cast<long>(H) && sw < static_cast<long>(W);
          img[(c * H + h) * W + w] = inside ? src[(c * H + static_cast<std::size_t>(sh)) * W + static_cast<std::size_t>(sw)] : 0.0;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Manifest import: CSV with columns path,label; each path names a flat little-endian f32
// file of C*H*W values (band-major), relative to the manifest's directory.
// ---------------------------------------------------------------------------

inline MstdDataset mstd_import(const std::filesystem::path& manifest, std::size_t channels, std::size_t height,
                               std::size_t width, std::vector<std::string> band_names = {}) {
  std::ifstream in(manifest);
  if (!in) throw InputError("cannot open manifest " + manifest.string());
  if (band_names.empty()) {
    for (std::size_t c = 0; c < channels; ++c) band_names.push_back(channels == 13 ? sentinel2_band_names()[c] : "B" + std::to_string(c));
  }
  if (band_names.size() != channels) throw ConfigError("band name count differs from channel count");
  using Tok = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    try {
      Tok tok(line);
      cells.assign(tok.begin(), tok.end());
    } catch (const boost::escaped_list_error& e) {
      throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (cells.size() != 2) throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": expected 2 columns");
    if (lineno == 1 && cells[0] == "path" && cells[1] == "label") continue;
    rows.emplace_back(cells[0], cells[1]);
  }
  if (rows.empty()) throw FormatError(manifest.string() + ": no samples");
  std::map<std::string, int> class_ids;
  for (const auto& r : rows) class_ids.emplace(r.second, 0);
  MstdDataset ds;
  for (auto& [name, id] : class_ids) {
    id = static_cast<int>(ds.class_names.size());
    ds.class_names.push_back(name);
  }
  ds.band_names = std::move(band_names);
  const std::size_t per = channels * height * width;
  ds.images = Tensor({rows.size(), channels, height, width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto path = manifest.parent_path() / rows[i].first;
    const auto bytes = read_file_bytes(path);
    if (bytes.size() != per * 4) {
      throw FormatError(path.string() + ": expected " + std::to_string(per * 4) + " bytes, found " + std::to_string(bytes.size()));
    }
    for (std::size_t j = 0; j < per; ++j) {
      float v;
      std::memcpy(&v, bytes.data() + j * 4, 4);
      ds.images[i * per + j] = v;
    }
    ds.labels.push_back(class_ids.at(rows[i].second));
  }
  return ds;
}

}  // namespace repkan
