#include "repkan/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "repkan/interpret.hpp"
#include "repkan/rng.hpp"
#include "repkan/symbolic.hpp"
#include "repkan/train.hpp"

namespace repkan {

namespace {

std::string file_token(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

std::string class_label(const std::vector<std::string>& names, int k) {
  const auto i = static_cast<std::size_t>(k);
  return i < names.size() ? names[i] : "class" + std::to_string(k);
}

std::string band_label(const std::vector<std::string>& names, std::size_t b) {
  return b < names.size() ? names[b] : "band" + std::to_string(b);
}

void check_labels_fit(const MstdDataset& ds, int classes) {
  for (int l : ds.labels) {
    if (l >= classes) throw DataError("dataset label " + std::to_string(l) + " exceeds the model's " + std::to_string(classes) + " classes");
  }
}

}  // namespace

nlohmann::json run_gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& info) {
  const SyntheticSpec spec = cfg.synthetic_spec();
  const MstdDataset ds = generate_synthetic(spec);
  mstd_write(ds, out);
  const double cert = certificate_accuracy(ds, spec.red(), spec.nir());
  info << "wrote " << ds.labels.size() << " samples (" << spec.classes << " classes, " << spec.channels << " bands, " << spec.height
       << "x" << spec.width << ") to " << out.string() << "\n";
  info << "index-rule certificate OA: " << cert << "\n";
  return {{"samples", ds.labels.size()},
          {"classes", spec.classes},
          {"red_band", spec.red()},
          {"nir_band", spec.nir()},
          {"certificate_oa", cert},
          {"bytes", fs::file_size(out)}};
}

nlohmann::json run_import(const fs::path& manifest, std::size_t channels, std::size_t height, std::size_t width, const fs::path& out,
                          std::ostream& info) {
  const MstdDataset ds = mstd_import(manifest, channels, height, width);
  mstd_write(ds, out);
  info << "imported " << ds.labels.size() << " samples in " << ds.class_names.size() << " classes to " << out.string() << "\n";
  return {{"samples", ds.labels.size()}, {"classes", ds.class_names}};
}

std::string model_banner(const RepKanModel& model) {
  const ModelConfig& c = model.config();
  std::ostringstream os;
  os << "RepKAN: " << c.in_channels << " bands, " << c.num_classes << " classes, input " << c.input_height << "x" << c.input_width
     << ", G=" << c.grid_size << ", k=" << c.spline_order << "\n";
  os << "stage widths";
  for (int w : c.stage_widths) os << ' ' << w;
  os << "; blocks";
  for (int b : c.blocks_per_stage) os << ' ' << b;
  os << "\n";
  const auto layers = model.layers();
  const int per_edge = c.grid_size + c.spline_order + 2;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto* l = layers[i];
    os << "  spline params " << (i == 0 ? std::string("stem") : "block " + std::to_string(i)) << ": " << l->out_channels() << "*"
       << l->in_channels() << "*" << per_edge << " = " << l->bank().parameter_count() << "\n";
  }
  os << "  spline params total: " << model.spline_parameter_count() << "\n";
  return os.str();
}

TrainSummary run_train(const RunConfig& cfg, const fs::path& data, const fs::path& checkpoint, const fs::path& log_csv,
                       std::ostream& info) {
  const MstdDataset ds = mstd_read(data);
  const ModelConfig mc = cfg.model_config(ds);
  const TrainOptions opt = cfg.train_options();
  const auto [train_idx, val_idx] = stratified_split(ds.labels, static_cast<int>(ds.class_names.size()), cfg.val_fraction(), opt.seed);
  if (train_idx.empty()) throw DataError("training split is empty");
  MstdDataset tr = subset(ds, train_idx);
  MstdDataset va;
  if (!val_idx.empty()) va = subset(ds, val_idx);
  const BandStats stats = compute_band_stats(tr.images);
  normalize(tr.images, stats, ds.band_names);
  if (!val_idx.empty()) normalize(va.images, stats, ds.band_names);

  Checkpoint ck{RepKanModel::create(mc, opt.seed), opt.seed, 0, stats, ds.class_names, ds.band_names};
  TrainSummary summary;
  summary.train_samples = tr.labels.size();
  summary.val_samples = va.labels.size();
  summary.spline_parameters = ck.model.spline_parameter_count();
  info << model_banner(ck.model);
  info << "train " << summary.train_samples << " / val " << summary.val_samples << " samples, " << opt.schedule.total_epochs << " epochs\n";

  std::ofstream log(log_csv);
  if (!log) throw InputError("cannot write " + log_csv.string());
  log << kTrainLogHeader << '\n';
  if (opt.schedule.total_epochs > 0) {
    summary.log = train_epochs(ck.model, tr.images, tr.labels, va.images, va.labels, opt, [&](const EpochLog& e) {
      write_log_row(log, e);
      log.flush();
      char buf[160];
      if (e.has_val) {
        std::snprintf(buf, sizeof buf, "epoch %3d  lr %.3e  loss %.5f  val oa %.4f  f1 %.4f\n", e.epoch, e.lr, e.train_loss,
                      e.val.overall_accuracy, e.val.macro_f1);
      } else {
        std::snprintf(buf, sizeof buf, "epoch %3d  lr %.3e  loss %.5f\n", e.epoch, e.lr, e.train_loss);
      }
      info << buf;
    });
    ck.epoch = opt.schedule.total_epochs;
  }
  checkpoint_save(ck, checkpoint);
  info << "checkpoint written to " << checkpoint.string() << "\n";
  return summary;
}

MstdDataset load_for_checkpoint(const Checkpoint& ck, const fs::path& data) {
  MstdDataset ds = mstd_read(data);
  const ModelConfig& c = ck.model.config();
  if (ds.images.dim(1) != static_cast<std::size_t>(c.in_channels) || ds.images.dim(2) != static_cast<std::size_t>(c.input_height) ||
      ds.images.dim(3) != static_cast<std::size_t>(c.input_width)) {
    throw DimensionError("dataset images " + shape_str(ds.images.shape()) + " do not match the checkpoint's " +
                         std::to_string(c.in_channels) + "x" + std::to_string(c.input_height) + "x" + std::to_string(c.input_width));
  }
  check_labels_fit(ds, c.num_classes);
  normalize(ds.images, ck.normalization, ds.band_names);
  return ds;
}

MetricsReport run_eval(const fs::path& checkpoint, const fs::path& data, std::ostream& info) {
  const Checkpoint ck = checkpoint_load(checkpoint);
  const MstdDataset ds = load_for_checkpoint(ck, data);
  const MetricsReport r = evaluate(ck.model, ds.images, ds.labels);
  char buf[160];
  std::snprintf(buf, sizeof buf, "OA %.4f  macro P %.4f  macro R %.4f  macro F1 %.4f  (%zu samples)\n", r.overall_accuracy,
                r.macro_precision, r.macro_recall, r.macro_f1, ds.labels.size());
  info << buf;
  return r;
}

nlohmann::json metrics_json(const MetricsReport& r) {
  return {{"oa", r.overall_accuracy},
          {"macro_precision", r.macro_precision},
          {"macro_recall", r.macro_recall},
          {"macro_f1", r.macro_f1},
          {"confusion", r.confusion}};
}

FuseReport run_fuse(const fs::path& checkpoint, const fs::path& out, std::size_t probes, std::uint64_t seed, std::ostream& info) {
  if (probes < 1) throw InputError("fuse needs at least one probe");
  Checkpoint ck = checkpoint_load(checkpoint);
  if (ck.model.deployed()) throw StateError("checkpoint " + checkpoint.string() + " is already fused");
  FuseReport rep;
  rep.probes = probes;
  rep.values_before = ck.model.stored_value_count();
  RepKanModel fused = ck.model.fuse();
  rep.values_after = fused.stored_value_count();
  const ModelConfig& c = ck.model.config();
  Rng rng(seed, 20);
  for (std::size_t p = 0; p < probes; ++p) {
    Tensor x({2, static_cast<std::size_t>(c.in_channels), static_cast<std::size_t>(c.input_height), static_cast<std::size_t>(c.input_width)});
    for (auto& v : x.data()) v = rng.normal();
    const Tensor a = ck.model.eval(x);
    const Tensor b = fused.eval(x);
    for (std::size_t i = 0; i < a.size(); ++i) rep.max_abs_deviation = std::max(rep.max_abs_deviation, std::abs(a[i] - b[i]));
  }
  rep.passed = rep.max_abs_deviation < kFuseTolerance;
  char buf[200];
  std::snprintf(buf, sizeof buf, "max |logit deviation| over %zu probes: %.3e (%s)\nstored values: %zu -> %zu (delta %lld)\n", probes,
                rep.max_abs_deviation, rep.passed ? "ok" : "FAILED", rep.values_before, rep.values_after,
                static_cast<long long>(rep.values_after) - static_cast<long long>(rep.values_before));
  info << buf;
  if (rep.passed) {
    ck.model = std::move(fused);
    checkpoint_save(ck, out);
    info << "fused checkpoint written to " << out.string() << "\n";
  }
  return rep;
}

nlohmann::json run_explain(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out_dir,
                           std::ostream& info) {
  const Checkpoint ck = checkpoint_load(checkpoint);
  const MstdDataset ds = load_for_checkpoint(ck, data);
  const int K = ck.model.config().num_classes;
  const std::size_t stage = cfg.explain_stage();
  const auto bands = cfg.explain_bands(ck.band_names);
  fs::create_directories(out_dir);

  const EnergyProfile energy = energy_profile(ck.model, ds.images, ds.labels, K, stage, cfg.energy_metric());
  for (const auto& w : energy.warnings) info << "warning: " << w << "\n";
  write_energy_csv(energy, ck.class_names, out_dir / "energy_report.csv");

  const ExpertSelection sel = select_expert_filters(ck.model, ds.images, ds.labels, K, stage);
  for (const auto& w : sel.warnings) info << "warning: " << w << "\n";

  nlohmann::json summary;
  summary["stage"] = stage;
  summary["energy_metric"] = energy_metric_name(energy.metric);
  summary["energy"] = nlohmann::json::array();
  for (const auto& r : energy.rows) {
    summary["energy"].push_back({{"class", class_label(ck.class_names, r.class_id)},
                                 {"spline_energy", r.spline_energy},
                                 {"spatial_energy", r.spatial_energy},
                                 {"spline_ratio", r.spline_ratio}});
  }
  summary["expert_filters"] = nlohmann::json::array();

  const std::size_t points = cfg.positive("explain.curve_points", 2);
  const std::size_t res = cfg.positive("explain.landscape_resolution", 2);
  const std::size_t max_maps = cfg.positive("explain.max_maps", 0);
  std::vector<Landscape> landscapes;
  for (const auto& f : sel.filters) {
    const std::string cname = class_label(ck.class_names, f.class_id);
    summary["expert_filters"].push_back({{"class", cname}, {"channel", f.channel}, {"mean_activation", f.mean_activation}});
    for (std::size_t b : bands) {
      const CurveData curve = sample_curve_with_distribution(ck.model, ds.images, ds.labels, K, b, f, points);
      write_curve_csv(curve, ck.class_names, out_dir / ("curve_" + file_token(cname) + "_" + file_token(band_label(ck.band_names, b)) + ".csv"));
    }
    if (bands.size() >= 2) landscapes.push_back(interaction_landscape(ck.model, f, bands[0], bands[1], res));
    std::size_t written = 0;
    for (std::size_t n = 0; n < ds.labels.size() && written < max_maps; ++n) {
      if (ds.labels[n] != f.class_id) continue;
      const ReasoningMap m = reasoning_map(ck.model, ds.images, n, f);
      const std::string stem = "map_" + file_token(cname) + "_" + std::to_string(n);
      write_pgm(m, out_dir / (stem + ".pgm"));
      write_f32(m, out_dir / (stem + ".f32"));
      ++written;
    }
  }
  if (!landscapes.empty()) {
    const fs::path path = out_dir / ("landscape_" + file_token(band_label(ck.band_names, bands[0])) + "_" +
                                     file_token(band_label(ck.band_names, bands[1])) + ".csv");
    std::ofstream outf(path);
    if (!outf) throw InputError("cannot write " + path.string());
    outf << "class,x,y,z\n";
    char buf[200];
    for (const auto& l : landscapes) {
      const std::string cname = class_label(ck.class_names, l.filter.class_id);
      for (std::size_t i = 0; i < l.xs.size(); ++i) {
        for (std::size_t j = 0; j < l.ys.size(); ++j) {
          std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g", cname.c_str(), l.xs[i], l.ys[j], l.z.at(i, j));
          outf << buf << '\n';
        }
      }
    }
  }
  info << "explain outputs written to " << out_dir.string() << "\n";
  return summary;
}

std::vector<AblationRow> run_distill(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
                                     std::ostream& info) {
  const Checkpoint ck = checkpoint_load(checkpoint);
  const MstdDataset ds = load_for_checkpoint(ck, data);
  const auto bands = cfg.explain_bands(ck.band_names);
  AblationOptions opt;
  opt.stage = cfg.explain_stage();
  opt.n_samples = cfg.positive("explain.distill_samples", 8);
  opt.density_weighted = cfg.get_bool("explain.density_weighted");
  const auto rows = ablation_table(ck.model, ds.images, ds.labels, ck.model.config().num_classes, bands, opt);
  write_ablation_csv(rows, ck.class_names, ck.band_names, out);
  for (const auto& r : rows) {
    char buf[256];
    if (r.ok) {
      std::snprintf(buf, sizeof buf, "%-12s %-10s R2 %.4f %.4f %.4f  phi(x) = %s\n", class_label(ck.class_names, r.class_id).c_str(),
                    band_label(ck.band_names, r.band).c_str(), r.fit.r2[0], r.fit.r2[1], r.fit.r2[2], r.fit.equation.c_str());
    } else {
      std::snprintf(buf, sizeof buf, "%-12s %-10s error: %s\n", class_label(ck.class_names, r.class_id).c_str(),
                    band_label(ck.band_names, r.band).c_str(), r.error.c_str());
    }
    info << buf;
  }
  return rows;
}

}  // namespace repkan
