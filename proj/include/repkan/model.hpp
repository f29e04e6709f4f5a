#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/layer.hpp"
#include "repkan/ops.hpp"
#include "repkan/rng.hpp"
#include "repkan/spline.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

struct ModelConfig {
  int in_channels = 13;
  std::vector<int> stage_widths{32, 64, 128};
  std::vector<int> blocks_per_stage{1, 1, 1};
  int grid_size = 3;
  int spline_order = 3;
  int num_classes = 10;
  int input_height = 64;
  int input_width = 64;
  double spline_lo = -1.0;
  double spline_hi = 1.0;

  std::size_t stage_count() const { return stage_widths.size(); }

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    if (stage_widths.empty() || stage_widths.size() != blocks_per_stage.size()) {
      throw ConfigError("stage_widths and blocks_per_stage must be non-empty and equally long");
    }
    for (int w : stage_widths) {
      if (w < 1) throw ConfigError("stage widths must be positive");
    }
    for (int b : blocks_per_stage) {
      if (b < 1) throw ConfigError("blocks_per_stage entries must be positive");
    }
    if (input_height < 1 || input_width < 1) throw ConfigError("input size must be positive");
    const int div = 1 << (stage_widths.size() - 1);
    if (input_height % div != 0 || input_width % div != 0) {
      throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                        " must be divisible by " + std::to_string(div));
    }
    (void)SplineGrid(grid_size, spline_order, spline_lo, spline_hi);
  }

  SplineGrid grid() const { return SplineGrid(grid_size, spline_order, spline_lo, spline_hi); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct NamedParam {
  std::string name;
  GradPair* param;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct NamedBatchNorm {
  std::string name;
  BatchNorm* bn;
};

/// A transition between stages: stride-2 3x3 conv + BN, or its folded form.
struct Transition {
  ConvBn conv;
  std::optional<FusedConv> fused;
};

struct Stage {
  std::optional<Transition> transition;  // absent for the first stage
  std::vector<RepKanLayer> blocks;
};

struct StageCache {
  ConvBnCache transition;
  std::vector<LayerCache> blocks;
};

struct ModelCache {
  LayerCache stem;
  std::vector<StageCache> stages;
  Shape final_shape;
  Tensor pooled;
};

/// Hierarchical classifier:
///   T_0 = stem(I)                       RepKAN layer C -> w_0 (its spline bank sees the input bands)
///   per stage s: X = transition_s(X)    stride-2 conv+BN w_{s-1} -> w_s (s > 0)
///                X = block(X) + X       for each block of the stage
///   logits = head(GAP(X))
///
/// "Stage s" in the interpretability tools means the first RepKAN layer that processes stage s,
/// i.e. the stem for s = 1 and the first block for s > 1.
class RepKanModel {
 public:
  RepKanModel() = default;

  /// Deterministic skeleton: zero kernels and head, default BN, bank with zero coefficients
  /// and unit edge weights. Call init() for a random start.
  explicit RepKanModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const SplineGrid grid = config_.grid();
    const auto widths = config_.stage_widths;
    stem_ = RepKanLayer(static_cast<std::size_t>(config_.in_channels), static_cast<std::size_t>(widths[0]), grid);
    for (std::size_t s = 0; s < widths.size(); ++s) {
      Stage st;
      const auto w = static_cast<std::size_t>(widths[s]);
      if (s > 0) st.transition = Transition{ConvBn(static_cast<std::size_t>(widths[s - 1]), w, 3, 2, 1), std::nullopt};
      for (int b = 0; b < config_.blocks_per_stage[s]; ++b) st.blocks.emplace_back(w, w, grid);
      stages_.push_back(std::move(st));
    }
    const auto d = static_cast<std::size_t>(widths.back());
    const auto k = static_cast<std::size_t>(config_.num_classes);
    head_weight_ = GradPair(Tensor({k, d}));
    head_bias_ = GradPair(Tensor({k}));
  }

  static RepKanModel create(const ModelConfig& config, std::uint64_t seed) {
    RepKanModel m(config);
    Rng rng(seed, 0x6d6f64656cULL);
    m.init(rng);
    return m;
  }

  /// Deploy-mode skeleton with the same tensor names and shapes a fused model has.
  static RepKanModel deploy_skeleton(const ModelConfig& config) {
    RepKanModel m(config);
    for (auto& b : m.batchnorms()) b.bn->stats_ready = true;
    return m.fuse();
  }

  void init(Rng& rng) {
    stem_.init(rng);
    for (auto& st : stages_) {
      if (st.transition) st.transition->conv.init(rng);
      for (auto& b : st.blocks) b.init(rng);
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(head_weight_.value.dim(1)));
    for (auto& v : head_weight_.value.data()) v = rng.uniform(-bound, bound);
    for (auto& v : head_bias_.value.data()) v = rng.uniform(-bound, bound);
  }

  const ModelConfig& config() const noexcept { return config_; }
  bool deployed() const noexcept { return stem_.mode() == LayerMode::kDeploy; }

  RepKanLayer& stem() noexcept { return stem_; }
  const RepKanLayer& stem() const noexcept { return stem_; }
  std::vector<Stage>& stages() noexcept { return stages_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }
  GradPair& head_weight() noexcept { return head_weight_; }
  GradPair& head_bias() noexcept { return head_bias_; }
  const GradPair& head_weight() const noexcept { return head_weight_; }
  const GradPair& head_bias() const noexcept { return head_bias_; }

  void check_images(const Tensor& images) const {
    images.require_rank(4, "model input");
    if (images.dim(1) != static_cast<std::size_t>(config_.in_channels)) {
      throw DimensionError("model expects " + std::to_string(config_.in_channels) + " channels, got " +
                           std::to_string(images.dim(1)));
    }
    const std::size_t div = std::size_t{1} << (config_.stage_count() - 1);
    if (images.dim(2) % div != 0 || images.dim(3) % div != 0) {
      throw DimensionError("image size " + shape_str(images.shape()) + " not divisible by " + std::to_string(div));
    }
  }

  /// Training-capable forward. With bn_mode == kTrain, BN uses batch statistics and
  /// updates running statistics. Fill `cache` to call backward() afterwards.
  Tensor forward(const Tensor& images, BnMode bn_mode, ModelCache* cache = nullptr) {
    check_images(images);
    if (deployed() && bn_mode == BnMode::kTrain) throw StateError("deployed model cannot run in train mode");
    if (cache) cache->stages.assign(stages_.size(), {});
    Tensor x = stem_.forward(images, bn_mode, cache ? &cache->stem : nullptr);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      Stage& st = stages_[s];
      StageCache* sc = cache ? &cache->stages[s] : nullptr;
      if (st.transition) {
        x = st.transition->fused ? st.transition->fused->forward(x)
                                 : st.transition->conv.forward(x, bn_mode, sc ? &sc->transition : nullptr);
      }
      if (sc) sc->blocks.assign(st.blocks.size(), {});
      for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        Tensor y = st.blocks[b].forward(x, bn_mode, sc ? &sc->blocks[b] : nullptr);
        y += x;
        x = std::move(y);
      }
    }
    Tensor pooled = global_avg_pool(x);
    if (cache) {
      cache->final_shape = x.shape();
      cache->pooled = pooled;
    }
    return linear(pooled, head_weight_.value, head_bias_.value);
  }

  /// Eval-mode forward (running BN statistics, or the fused deploy path).
  Tensor eval(const Tensor& images) const {
    check_images(images);
    Tensor x = stem_.eval(images);
    for (const auto& st : stages_) {
      if (st.transition) x = transition_eval(*st.transition, x);
      for (const auto& blk : st.blocks) {
        Tensor y = blk.eval(x);
        y += x;
        x = std::move(y);
      }
    }
    return linear(global_avg_pool(x), head_weight_.value, head_bias_.value);
  }

  /// Accumulates gradients of all trainable parameters for dL/dlogits.
  void backward(const ModelCache& cache, const Tensor& grad_logits) {
    if (deployed()) throw StateError("deployed model has no backward pass");
    LinearGrads lg = linear_backward(cache.pooled, head_weight_.value, grad_logits);
    head_weight_.grad += lg.weight;
    head_bias_.grad += lg.bias;
    Tensor g = global_avg_pool_backward(cache.final_shape, lg.input);
    for (std::size_t s = stages_.size(); s-- > 0;) {
      Stage& st = stages_[s];
      const StageCache& sc = cache.stages[s];
      for (std::size_t b = st.blocks.size(); b-- > 0;) {
        Tensor gin = st.blocks[b].backward(sc.blocks[b], g);
        gin += g;
        g = std::move(gin);
      }
      if (st.transition) g = st.transition->conv.backward(sc.transition, g);
    }
    stem_.backward(cache.stem, g);
  }

  /// Deploy copy: every RepKAN layer fused, transitions BN-folded.
  RepKanModel fuse() const {
    if (deployed()) throw StateError("model is already fused");
    RepKanModel out = *this;
    out.stem_ = stem_.fuse();
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      Stage& st = out.stages_[s];
      if (st.transition) {
        st.transition->fused = st.transition->conv.fold();
        st.transition->conv = ConvBn();
      }
      for (auto& b : st.blocks) b = b.fuse();
    }
    return out;
  }

  /// Number of stages (1-based ids accepted by stage_layer()).
  std::size_t stage_count() const noexcept { return stages_.size(); }

  const RepKanLayer& stage_layer(std::size_t stage) const {
    check_stage(stage);
    return stage == 1 ? stem_ : stages_[stage - 1].blocks.front();
  }
  RepKanLayer& stage_layer(std::size_t stage) {
    check_stage(stage);
    return stage == 1 ? stem_ : stages_[stage - 1].blocks.front();
  }

  /// Eval-mode input of stage_layer(stage).
  Tensor stage_layer_input(const Tensor& images, std::size_t stage) const {
    check_stage(stage);
    check_images(images);
    if (stage == 1) return images;
    Tensor x = stem_.eval(images);
    for (std::size_t s = 0; s + 1 < stage; ++s) {
      const Stage& st = stages_[s];
      if (st.transition) x = transition_eval(*st.transition, x);
      for (const auto& blk : st.blocks) {
        Tensor y = blk.eval(x);
        y += x;
        x = std::move(y);
      }
    }
    return transition_eval(*stages_[stage - 1].transition, x);
  }

  /// Trainable parameters in a fixed order (train-mode models only).
  std::vector<NamedParam> parameters() {
    if (deployed()) throw StateError("deployed model has no trainable parameters");
    std::vector<NamedParam> out;
    add_layer_params(out, "stem", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "stages." + std::to_string(s);
      if (stages_[s].transition) {
        out.push_back({p + ".transition.kernel", &stages_[s].transition->conv.kernel});
        out.push_back({p + ".transition.bn.gamma", &stages_[s].transition->conv.bn.gamma});
        out.push_back({p + ".transition.bn.beta", &stages_[s].transition->conv.bn.beta});
      }
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        add_layer_params(out, p + ".blocks." + std::to_string(b), stages_[s].blocks[b]);
      }
    }
    out.push_back({"head.weight", &head_weight_});
    out.push_back({"head.bias", &head_bias_});
    return out;
  }

  /// Every stored tensor (parameters and BN buffers) in a fixed order, for either mode.
  std::vector<NamedTensor> tensors() {
    std::vector<NamedTensor> out;
    add_layer_tensors(out, "stem", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "stages." + std::to_string(s);
      if (auto& tr = stages_[s].transition) {
        if (tr->fused) {
          out.push_back({p + ".transition.fused.kernel", &tr->fused->kernel});
          out.push_back({p + ".transition.fused.bias", &tr->fused->bias});
        } else {
          out.push_back({p + ".transition.kernel", &tr->conv.kernel.value});
          add_bn_tensors(out, p + ".transition.bn", tr->conv.bn);
        }
      }
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        add_layer_tensors(out, p + ".blocks." + std::to_string(b), stages_[s].blocks[b]);
      }
    }
    out.push_back({"head.weight", &head_weight_.value});
    out.push_back({"head.bias", &head_bias_.value});
    return out;
  }

  std::vector<NamedBatchNorm> batchnorms() {
    std::vector<NamedBatchNorm> out;
    if (deployed()) return out;
    auto add_layer = [&](const std::string& p, RepKanLayer& l) {
      out.push_back({p + ".bn1x1", &l.branch1x1().bn});
      out.push_back({p + ".bn3x3", &l.branch3x3().bn});
    };
    add_layer("stem", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "stages." + std::to_string(s);
      if (stages_[s].transition) out.push_back({p + ".transition.bn", &stages_[s].transition->conv.bn});
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) add_layer(p + ".blocks." + std::to_string(b), stages_[s].blocks[b]);
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.param->zero_grad();
  }

  /// All RepKAN layers (stem first, then blocks in stage order).
  std::vector<const RepKanLayer*> layers() const {
    std::vector<const RepKanLayer*> out{&stem_};
    for (const auto& st : stages_) {
      for (const auto& b : st.blocks) out.push_back(&b);
    }
    return out;
  }

  /// Sum over layers of Cout * Cin * (G + k + 2).
  std::size_t spline_parameter_count() const {
    std::size_t n = 0;
    for (const auto* l : layers()) n += l->bank().parameter_count();
    return n;
  }

  /// Stored values, BN running statistics included.
  std::size_t stored_value_count() {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.tensor->size();
    return n;
  }

 private:
  static Tensor transition_eval(const Transition& t, const Tensor& x) {
    return t.fused ? t.fused->forward(x) : t.conv.eval(x);
  }

  void check_stage(std::size_t stage) const {
    if (stage < 1 || stage > stages_.size()) {
      throw InputError("stage " + std::to_string(stage) + " outside [1," + std::to_string(stages_.size()) + "]");
    }
  }

  static void add_bn_tensors(std::vector<NamedTensor>& out, const std::string& p, BatchNorm& bn) {
    out.push_back({p + ".gamma", &bn.gamma.value});
    out.push_back({p + ".beta", &bn.beta.value});
    out.push_back({p + ".running_mean", &bn.running_mean});
    out.push_back({p + ".running_var", &bn.running_var});
  }

  static void add_bank_params(std::vector<NamedParam>& out, const std::string& p, SplineBank& bank) {
    out.push_back({p + ".spline.coeffs", &bank.coeffs()});
    out.push_back({p + ".spline.base_weight", &bank.base_weight()});
    out.push_back({p + ".spline.spline_weight", &bank.spline_weight()});
  }

  static void add_layer_params(std::vector<NamedParam>& out, const std::string& p, RepKanLayer& l) {
    out.push_back({p + ".conv1x1.kernel", &l.branch1x1().kernel});
    out.push_back({p + ".bn1x1.gamma", &l.branch1x1().bn.gamma});
    out.push_back({p + ".bn1x1.beta", &l.branch1x1().bn.beta});
    out.push_back({p + ".conv3x3.kernel", &l.branch3x3().kernel});
    out.push_back({p + ".bn3x3.gamma", &l.branch3x3().bn.gamma});
    out.push_back({p + ".bn3x3.beta", &l.branch3x3().bn.beta});
    add_bank_params(out, p, l.bank());
  }

  static void add_layer_tensors(std::vector<NamedTensor>& out, const std::string& p, RepKanLayer& l) {
    if (l.mode() == LayerMode::kDeploy) {
      out.push_back({p + ".fused.kernel", &l.fused().kernel});
      out.push_back({p + ".fused.bias", &l.fused().bias});
    } else {
      out.push_back({p + ".conv1x1.kernel", &l.branch1x1().kernel.value});
      add_bn_tensors(out, p + ".bn1x1", l.branch1x1().bn);
      out.push_back({p + ".conv3x3.kernel", &l.branch3x3().kernel.value});
      add_bn_tensors(out, p + ".bn3x3", l.branch3x3().bn);
    }
    out.push_back({p + ".spline.coeffs", &l.bank().coeffs().value});
    out.push_back({p + ".spline.base_weight", &l.bank().base_weight().value});
    out.push_back({p + ".spline.spline_weight", &l.bank().spline_weight().value});
  }

  ModelConfig config_;
  RepKanLayer stem_;
  std::vector<Stage> stages_;
  GradPair head_weight_;
  GradPair head_bias_;
};

/// Row-wise argmax; ties go to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  logits.require_rank(2, "argmax_rows");
  std::vector<int> out(logits.dim(0));
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.dim(1); ++k) {
      if (logits.at(n, k) > logits.at(n, best)) best = k;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const RepKanModel& model, const Tensor& images) {
  return argmax_rows(model.eval(images));
}

}  // namespace repkan
