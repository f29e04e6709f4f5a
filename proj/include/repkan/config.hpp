#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "repkan/data.hpp"
#include "repkan/error.hpp"
#include "repkan/interpret.hpp"
#include "repkan/model.hpp"
#include "repkan/symbolic.hpp"
#include "repkan/train.hpp"

namespace repkan {

struct ConfigKey {
  const char* section;
  const char* key;
  const char* default_value;
  const char* doc;
};

/// Every recognised key. Unknown keys in a file or override are rejected.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"model", "in_channels", "0", "input bands; 0 = take from the dataset"},
      {"model", "num_classes", "0", "output classes; 0 = take from the dataset"},
      {"model", "input_height", "0", "image height; 0 = take from the dataset"},
      {"model", "input_width", "0", "image width; 0 = take from the dataset"},
      {"model", "stage_widths", "32,64,128", "channels per stage"},
      {"model", "blocks_per_stage", "1,1,1", "residual RepKAN blocks per stage"},
      {"model", "grid_size", "3", "spline grid intervals G"},
      {"model", "spline_order", "3", "spline order k"},
      {"model", "spline_lo", "-1", "lower end of the spline domain"},
      {"model", "spline_hi", "1", "upper end of the spline domain"},
      {"train", "epochs", "50", "training epochs"},
      {"train", "lr", "5e-4", "peak learning rate"},
      {"train", "weight_decay", "0.05", "AdamW decoupled weight decay"},
      {"train", "warmup_epochs", "5", "linear warmup epochs"},
      {"train", "min_lr", "1e-6", "learning rate at the final epoch"},
      {"train", "batch_size", "64", "mini-batch size"},
      {"train", "seed", "0", "seed for init, split, shuffling and augmentation"},
      {"train", "augment", "true", "random flip and padded crop"},
      {"train", "flip_probability", "0.5", "horizontal flip probability"},
      {"train", "crop_pad", "4", "zero padding before the random crop"},
      {"train", "val_fraction", "0.2", "stratified validation fraction"},
      {"data", "classes", "4", "synthetic classes (1..8)"},
      {"data", "per_class", "100", "synthetic images per class"},
      {"data", "channels", "13", "synthetic bands"},
      {"data", "height", "16", "synthetic image height"},
      {"data", "width", "16", "synthetic image width"},
      {"data", "seed", "7", "generator seed"},
      {"data", "noise", "0.05", "per-pixel Gaussian noise sigma"},
      {"data", "red_band", "-1", "red band index; -1 = 3 for 13 bands, else 0"},
      {"data", "nir_band", "-1", "NIR band index; -1 = 7 for 13 bands, else 1"},
      {"explain", "stage", "1", "stage whose first RepKAN layer is profiled"},
      {"explain", "bands", "", "bands for curves and distillation; empty = red,nir of the dataset"},
      {"explain", "energy_metric", "l1", "path energy: l1 (mean |a|) or l2 (mean a^2)"},
      {"explain", "curve_points", "200", "points per spline curve"},
      {"explain", "landscape_resolution", "64", "landscape grid size per axis"},
      {"explain", "distill_samples", "200", "uniform samples per distilled edge"},
      {"explain", "density_weighted", "false", "weight distillation fits by pixel density"},
      {"explain", "max_maps", "4", "reasoning maps written per class"},
  };
  return keys;
}

inline std::string config_help() {
  std::ostringstream os;
  os << "Configuration keys (INI sections; override with --set section.key=value):\n";
  const char* section = "";
  for (const auto& k : config_keys()) {
    if (std::string(section) != k.section) {
      section = k.section;
      os << "  [" << section << "]\n";
    }
    os << "    " << k.key << " = " << k.default_value << "    " << k.doc << '\n';
  }
  return os.str();
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[full(k.section, k.key)] = k.default_value;
  }

  static RunConfig from_string(const std::string& text, const std::string& origin = "<config>") {
    RunConfig c;
    c.merge_ini(text, origin);
    return c;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str(), path.string());
  }

  void merge_ini(const std::string& text, const std::string& origin) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
      boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError(origin + ": key " + section + " appears outside a section");
      for (const auto& [key, value] : body) {
        const std::string name = full(section, key);
        if (!values_.count(name)) throw ConfigError(origin + ":" + std::to_string(line_of(text, section, key)) + ": unknown key " + name);
        values_[name] = value.data();
      }
    }
  }

  /// "section.key=value".
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like section.key=value, got " + assignment);
    const std::string name = trim(assignment.substr(0, eq));
    if (!values_.count(name)) throw ConfigError("unknown key " + name);
    values_[name] = trim(assignment.substr(eq + 1));
  }

  const std::string& get(const std::string& name) const {
    const auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown key " + name);
    return it->second;
  }

  long get_int(const std::string& name) const {
    const std::string& v = get(name);
    long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(name + " must be an integer, got '" + v + "'");
    return out;
  }

  double get_double(const std::string& name) const {
    const std::string& v = get(name);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError(name + " must be a number, got '" + v + "'");
  }

  bool get_bool(const std::string& name) const {
    const std::string& v = get(name);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(name + " must be true or false, got '" + v + "'");
  }

  std::vector<long> get_int_list(const std::string& name) const {
    std::vector<long> out;
    std::istringstream in(get(name));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      long x = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
      if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
        throw ConfigError(name + " must be a comma-separated integer list, got '" + get(name) + "'");
      }
      out.push_back(x);
    }
    return out;
  }

  /// Model settings; zero-valued shape keys are filled from the dataset.
  ModelConfig model_config(const MstdDataset& ds) const {
    ModelConfig m;
    auto pick = [](long v, std::size_t from_data) { return v > 0 ? static_cast<int>(v) : static_cast<int>(from_data); };
    m.in_channels = pick(get_int("model.in_channels"), ds.images.dim(1));
    m.num_classes = pick(get_int("model.num_classes"), ds.class_names.size());
    m.input_height = pick(get_int("model.input_height"), ds.images.dim(2));
    m.input_width = pick(get_int("model.input_width"), ds.images.dim(3));
    m.stage_widths.clear();
    for (long w : get_int_list("model.stage_widths")) m.stage_widths.push_back(static_cast<int>(w));
    m.blocks_per_stage.clear();
    for (long b : get_int_list("model.blocks_per_stage")) m.blocks_per_stage.push_back(static_cast<int>(b));
    m.grid_size = static_cast<int>(get_int("model.grid_size"));
    m.spline_order = static_cast<int>(get_int("model.spline_order"));
    m.spline_lo = get_double("model.spline_lo");
    m.spline_hi = get_double("model.spline_hi");
    m.validate();
    if (static_cast<std::size_t>(m.in_channels) != ds.images.dim(1) || static_cast<std::size_t>(m.input_height) != ds.images.dim(2) ||
        static_cast<std::size_t>(m.input_width) != ds.images.dim(3)) {
      throw ConfigError("model input shape " + std::to_string(m.in_channels) + "x" + std::to_string(m.input_height) + "x" +
                        std::to_string(m.input_width) + " does not match dataset " + shape_str(ds.images.shape()));
    }
    if (static_cast<std::size_t>(m.num_classes) < ds.class_names.size()) {
      throw ConfigError("num_classes " + std::to_string(m.num_classes) + " is below the dataset's " + std::to_string(ds.class_names.size()));
    }
    return m;
  }

  TrainOptions train_options() const {
    TrainOptions o;
    const long epochs = get_int("train.epochs");
    const long warmup = get_int("train.warmup_epochs");
    if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
    o.schedule.total_epochs = static_cast<int>(epochs);
    o.schedule.warmup_epochs = static_cast<int>(epochs == 0 ? 0 : warmup);
    if (warmup < 0) throw ConfigError("train.warmup_epochs must be non-negative");
    if (epochs > 0 && warmup >= epochs) throw ConfigError("train.warmup_epochs must be below train.epochs");
    o.schedule.base_lr = get_double("train.lr");
    o.schedule.min_lr = get_double("train.min_lr");
    o.optimizer.weight_decay = get_double("train.weight_decay");
    const long batch = get_int("train.batch_size");
    if (batch < 1) throw ConfigError("train.batch_size must be positive");
    o.batch_size = static_cast<std::size_t>(batch);
    o.seed = seed("train.seed");
    o.augment = get_bool("train.augment");
    o.augmentation.flip_probability = get_double("train.flip_probability");
    o.augmentation.pad = static_cast<int>(get_int("train.crop_pad"));
    if (!(o.augmentation.flip_probability >= 0.0 && o.augmentation.flip_probability <= 1.0)) {
      throw ConfigError("train.flip_probability must lie in [0, 1]");
    }
    if (o.augmentation.pad < 0) throw ConfigError("train.crop_pad must be non-negative");
    if (epochs > 0) o.validate();
    return o;
  }

  double val_fraction() const {
    const double v = get_double("train.val_fraction");
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError("train.val_fraction must lie in [0, 1)");
    return v;
  }

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s;
    s.classes = static_cast<int>(get_int("data.classes"));
    s.per_class = static_cast<int>(get_int("data.per_class"));
    s.channels = static_cast<int>(get_int("data.channels"));
    s.height = static_cast<int>(get_int("data.height"));
    s.width = static_cast<int>(get_int("data.width"));
    s.seed = seed("data.seed");
    s.noise = get_double("data.noise");
    s.red_band = static_cast<int>(get_int("data.red_band"));
    s.nir_band = static_cast<int>(get_int("data.nir_band"));
    s.validate();
    return s;
  }

  std::size_t explain_stage() const {
    const long s = get_int("explain.stage");
    if (s < 1) throw ConfigError("explain.stage must be at least 1");
    return static_cast<std::size_t>(s);
  }

  /// Bands from the config, or the dataset's bands named *_Red and *_NIR.
  std::vector<std::size_t> explain_bands(const std::vector<std::string>& band_names) const {
    std::vector<std::size_t> out;
    if (!get("explain.bands").empty()) {
      for (long b : get_int_list("explain.bands")) {
        if (b < 0 || static_cast<std::size_t>(b) >= band_names.size()) {
          throw ConfigError("explain.bands entry " + std::to_string(b) + " outside [0, " + std::to_string(band_names.size()) + ")");
        }
        out.push_back(static_cast<std::size_t>(b));
      }
      return out;
    }
    for (const char* suffix : {"_Red", "_NIR"}) {
      for (std::size_t i = 0; i < band_names.size(); ++i) {
        if (band_names[i].ends_with(suffix)) {
          out.push_back(i);
          break;
        }
      }
    }
    if (out.size() != 2) throw ConfigError("explain.bands is empty and the dataset has no *_Red/*_NIR band names");
    return out;
  }

  EnergyMetric energy_metric() const { return parse_energy_metric(get("explain.energy_metric")); }

  std::size_t positive(const std::string& name, long min = 1) const {
    const long v = get_int(name);
    if (v < min) throw ConfigError(name + " must be at least " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }

 private:
  static std::string full(const std::string& section, const std::string& key) { return section + "." + key; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
  }

  std::uint64_t seed(const std::string& name) const {
    const long v = get_int(name);
    if (v < 0) throw ConfigError(name + " must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  /// 1-based line of `key` inside `[section]`, or 0 when not found.
  static std::size_t line_of(const std::string& text, const std::string& section, const std::string& key) {
    std::istringstream in(text);
    std::string line, current;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      line = trim(line);
      if (line.size() > 1 && line.front() == '[' && line.back() == ']') {
        current = trim(line.substr(1, line.size() - 2));
      } else if (current == section && trim(line.substr(0, line.find('='))) == key) {
        return n;
      }
    }
    return 0;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace repkan
