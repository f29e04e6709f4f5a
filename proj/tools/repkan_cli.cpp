#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "repkan/pipeline.hpp"

using namespace repkan;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig() : RunConfig::from_file(path);
  for (const auto& o : overrides) cfg.set(o);
  return cfg;
}

void add_config_options(CLI::App* cmd, std::string& config, std::vector<std::string>& overrides) {
  cmd->add_option("--config", config, "INI config file (keys listed in --help of the main command)");
  cmd->add_option("--set", overrides, "override a config key, section.key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RepKAN: spline-augmented spatial-spectral classifier for multispectral images"};
  app.require_subcommand(1);
  app.footer(config_help());

  std::string config, data, out, checkpoint, log_csv, manifest;
  std::vector<std::string> overrides;
  std::size_t probes = 50;
  std::uint64_t probe_seed = 0;
  std::size_t channels = 13, height = 0, width = 0;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic planted-index dataset ([data] section)");
  add_config_options(gen, config, overrides);
  gen->add_option("--out", out, "output MSTD file")->required();

  auto* imp = app.add_subcommand("import", "convert a path,label manifest of raw f32 images to MSTD");
  imp->add_option("--manifest", manifest, "CSV manifest with columns path,label")->required();
  imp->add_option("--channels", channels, "bands per image")->capture_default_str();
  imp->add_option("--height", height, "image height")->required();
  imp->add_option("--width", width, "image width")->required();
  imp->add_option("--out", out, "output MSTD file")->required();

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint plus a per-epoch log CSV");
  add_config_options(train, config, overrides);
  train->add_option("--data", data, "MSTD dataset")->required();
  train->add_option("--out-checkpoint", checkpoint, "checkpoint to write")->required();
  train->add_option("--log", log_csv, "log CSV (default: <checkpoint>.log.csv)");

  auto* eval = app.add_subcommand("eval", "metrics JSON on stdout");
  eval->add_option("--checkpoint", checkpoint, "checkpoint (train or deploy mode)")->required();
  eval->add_option("--data", data, "MSTD dataset")->required();

  auto* fuse = app.add_subcommand("fuse", "fold branches into one 3x3 conv per layer and verify the logits");
  fuse->add_option("--checkpoint", checkpoint, "train-mode checkpoint")->required();
  fuse->add_option("--out", out, "fused checkpoint to write")->required();
  fuse->add_option("--probes", probes, "random probe batches")->capture_default_str();
  fuse->add_option("--seed", probe_seed, "probe seed")->capture_default_str();

  auto* explain = app.add_subcommand("explain", "energy report, spline curves, landscape and reasoning maps ([explain] section)");
  add_config_options(explain, config, overrides);
  explain->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  explain->add_option("--data", data, "MSTD dataset")->required();
  explain->add_option("--out-dir", out, "output directory")->required();

  auto* distill = app.add_subcommand("distill", "polynomial fits of the expert edges, degrees 1 to 3 ([explain] section)");
  add_config_options(distill, config, overrides);
  distill->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  distill->add_option("--data", data, "MSTD dataset")->required();
  distill->add_option("--out", out, "ablation CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*gen) {
      std::cout << run_gen_data(load_config(config, overrides), out, std::cerr).dump(2) << "\n";
    } else if (*imp) {
      std::cout << run_import(manifest, channels, height, width, out, std::cerr).dump(2) << "\n";
    } else if (*train) {
      const std::string log_path = log_csv.empty() ? checkpoint + ".log.csv" : log_csv;
      const TrainSummary s = run_train(load_config(config, overrides), data, checkpoint, log_path, std::cerr);
      nlohmann::json j{{"checkpoint", checkpoint}, {"log", log_path}, {"epochs", s.log.size()}, {"spline_parameters", s.spline_parameters}};
      if (!s.log.empty() && s.log.back().has_val) j["final_val"] = metrics_json(s.log.back().val);
      std::cout << j.dump(2) << "\n";
    } else if (*eval) {
      std::cout << metrics_json(run_eval(checkpoint, data, std::cerr)).dump(2) << "\n";
    } else if (*fuse) {
      const FuseReport r = run_fuse(checkpoint, out, probes, probe_seed, std::cerr);
      std::cout << nlohmann::json{{"max_abs_deviation", r.max_abs_deviation},
                                  {"probes", r.probes},
                                  {"stored_values_before", r.values_before},
                                  {"stored_values_after", r.values_after},
                                  {"passed", r.passed}}
                       .dump(2)
                << "\n";
      if (!r.passed) return static_cast<int>(ExitCode::kNumeric);
    } else if (*explain) {
      std::cout << run_explain(load_config(config, overrides), checkpoint, data, out, std::cerr).dump(2) << "\n";
    } else if (*distill) {
      const auto rows = run_distill(load_config(config, overrides), checkpoint, data, out, std::cerr);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += !r.ok;
      std::cout << nlohmann::json{{"rows", rows.size()}, {"failed_rows", failed}, {"csv", out}}.dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kConfig);
  }
  return 0;
}
