#pragma once

// Whole-run operations behind the command-line tool: each reads and writes files and
// reports progress on `info`.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "repkan/checkpoint.hpp"
#include "repkan/config.hpp"
#include "repkan/metrics.hpp"

namespace repkan {

namespace fs = std::filesystem;

/// Writes the synthetic dataset; returns {"samples", "certificate_oa", ...}.
nlohmann::json run_gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& info);

/// Manifest import to MSTD.
nlohmann::json run_import(const fs::path& manifest, std::size_t channels, std::size_t height, std::size_t width,
                          const fs::path& out, std::ostream& info);

struct TrainSummary {
  std::vector<EpochLog> log;
  std::size_t train_samples = 0;
  std::size_t val_samples = 0;
  std::size_t spline_parameters = 0;
};

/// Stratified split, normalization from the training part, training, checkpoint and log CSV.
TrainSummary run_train(const RunConfig& cfg, const fs::path& data, const fs::path& checkpoint, const fs::path& log_csv,
                       std::ostream& info);

/// Startup banner: architecture and per-layer spline parameter counts Cout*Cin*(G+k+2).
std::string model_banner(const RepKanModel& model);

/// Loads a dataset and applies a checkpoint's normalization and shape checks.
MstdDataset load_for_checkpoint(const Checkpoint& ck, const fs::path& data);

MetricsReport run_eval(const fs::path& checkpoint, const fs::path& data, std::ostream& info);

/// {"oa", "macro_precision", "macro_recall", "macro_f1", "confusion"}.
nlohmann::json metrics_json(const MetricsReport& r);

struct FuseReport {
  double max_abs_deviation = 0.0;
  std::size_t probes = 0;
  std::size_t values_before = 0;
  std::size_t values_after = 0;
  bool passed = false;
};

inline constexpr double kFuseTolerance = 1e-8;

/// Fuses a train-mode checkpoint and compares eval logits on `probes` random inputs.
/// Writes `out` only when the deviation is below kFuseTolerance.
FuseReport run_fuse(const fs::path& checkpoint, const fs::path& out, std::size_t probes, std::uint64_t seed, std::ostream& info);

/// energy_report.csv, curve_<class>_<band>.csv, landscape_<bx>_<by>.csv and
/// map_<class>_<n>.pgm/.f32 under out_dir. Returns a summary (expert filters, energy rows).
nlohmann::json run_explain(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out_dir,
                           std::ostream& info);

/// Ablation CSV for the per-class expert filters.
std::vector<AblationRow> run_distill(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
                                     std::ostream& info);

}  // namespace repkan
