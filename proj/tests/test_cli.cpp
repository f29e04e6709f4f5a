#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "repkan/pipeline.hpp"

using namespace repkan;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir() { return fs::temp_directory_path() / "repkan_cli_test"; }

  static void SetUpTestSuite() {
    fs::remove_all(dir());
    fs::create_directories(dir());
    std::ofstream(dir() / "tiny.ini") << "[data]\nclasses = 2\nper_class = 6\nchannels = 4\nheight = 4\nwidth = 4\n"
                                         "[model]\nstage_widths = 4,6\nblocks_per_stage = 1,1\n"
                                         "[train]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 4\nval_fraction = 0.25\n"
                                         "[explain]\ncurve_points = 20\nlandscape_resolution = 8\nmax_maps = 1\n";
    ASSERT_EQ(run("gen-data --config " + path("tiny.ini") + " --out " + path("d.mstd")).code, 0);
    ASSERT_EQ(run("train --config " + path("tiny.ini") + " --data " + path("d.mstd") + " --out-checkpoint " + path("m.ckpt")).code, 0);
  }

  static std::string path(const std::string& name) { return (dir() / name).string(); }

  static CliResult run(const std::string& args) {
    CliResult r;
    const std::string cmd = std::string(REPKAN_CLI) + " " + args + " >" + path("stdout.txt") + " 2>" + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir() / "stdout.txt");
    r.err = slurp(dir() / "stderr.txt");
    return r;
  }
};

}  // namespace

TEST_F(Cli, HelpListsEveryConfigKey) {
  const CliResult r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const auto& k : config_keys()) EXPECT_NE(r.out.find(std::string(k.key) + " = "), std::string::npos) << k.key;
  for (const char* sub : {"gen-data", "import", "train", "eval", "fuse", "explain", "distill"}) {
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  }
}

TEST_F(Cli, EvalSchemaMatchesLibrary) {
  const CliResult r = run("eval --checkpoint " + path("m.ckpt") + " --data " + path("d.mstd"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"confusion", "macro_f1", "macro_precision", "macro_recall", "oa"}));
  const Checkpoint ck = checkpoint_load(path("m.ckpt"));
  const MstdDataset ds = load_for_checkpoint(ck, path("d.mstd"));
  const MetricsReport m = evaluate(ck.model, ds.images, ds.labels);
  EXPECT_NEAR(j["oa"].get<double>(), m.overall_accuracy, 1e-12);
  EXPECT_NEAR(j["macro_precision"].get<double>(), m.macro_precision, 1e-12);
  EXPECT_NEAR(j["macro_recall"].get<double>(), m.macro_recall, 1e-12);
  EXPECT_NEAR(j["macro_f1"].get<double>(), m.macro_f1, 1e-12);
  EXPECT_EQ(j["confusion"].get<Confusion>(), m.confusion);
}

TEST_F(Cli, FuseOnceThenRefuse) {
  const CliResult a = run("fuse --checkpoint " + path("m.ckpt") + " --out " + path("f.ckpt") + " --probes 5");
  ASSERT_EQ(a.code, 0) << a.err;
  const auto j = nlohmann::json::parse(a.out);
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_LT(j["max_abs_deviation"].get<double>(), 1e-8);
  EXPECT_LT(j["stored_values_after"].get<long>(), j["stored_values_before"].get<long>());
  const CliResult b = run("fuse --checkpoint " + path("f.ckpt") + " --out " + path("g.ckpt"));
  EXPECT_EQ(b.code, 5);
  EXPECT_FALSE(fs::exists(dir() / "g.ckpt"));
  const CliResult e = run("eval --checkpoint " + path("f.ckpt") + " --data " + path("d.mstd"));
  ASSERT_EQ(e.code, 0) << e.err;
}

TEST_F(Cli, ZeroEpochsWritesHeaderOnlyLog) {
  const CliResult r = run("train --config " + path("tiny.ini") + " --set train.epochs=0 --data " + path("d.mstd") + " --out-checkpoint " +
                    path("z.ckpt") + " --log " + path("z.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir() / "z.csv"), std::string(kTrainLogHeader) + "\n");
  EXPECT_TRUE(fs::exists(dir() / "z.ckpt"));
}

TEST_F(Cli, TrainLogHasOneRowPerEpoch) {
  const std::string log = slurp(dir() / "m.ckpt.log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  EXPECT_EQ(log.rfind(kTrainLogHeader, 0), 0u);
}

TEST_F(Cli, GenDataIsByteDeterministic) {
  ASSERT_EQ(run("gen-data --config " + path("tiny.ini") + " --out " + path("d2.mstd")).code, 0);
  EXPECT_EQ(slurp(dir() / "d.mstd"), slurp(dir() / "d2.mstd"));
  ASSERT_EQ(run("gen-data --config " + path("tiny.ini") + " --set data.seed=8 --out " + path("d3.mstd")).code, 0);
  EXPECT_NE(slurp(dir() / "d.mstd"), slurp(dir() / "d3.mstd"));
}

TEST_F(Cli, BannerCountsSplineParameters) {
  // Edges carry G + k coefficients plus two weights: stem 4*4, block 4*4, block 6*6.
  for (const auto& [g, total] : {std::pair{3, 544}, std::pair{5, 680}}) {
    const CliResult r = run("train --config " + path("tiny.ini") + " --set train.epochs=0 --set model.grid_size=" + std::to_string(g) +
                      " --data " + path("d.mstd") + " --out-checkpoint " + path("b.ckpt"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("spline params total: " + std::to_string(total)), std::string::npos) << r.err;
    EXPECT_EQ(nlohmann::json::parse(r.out)["spline_parameters"].get<int>(), total);
  }
}

TEST_F(Cli, ExplainAndDistillWriteOutputs) {
  const CliResult e = run("explain --config " + path("tiny.ini") + " --checkpoint " + path("m.ckpt") + " --data " + path("d.mstd") +
                    " --out-dir " + path("explain"));
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_TRUE(fs::exists(dir() / "explain" / "energy_report.csv"));
  std::size_t curves = 0, maps = 0;
  for (const auto& f : fs::directory_iterator(dir() / "explain")) {
    const std::string n = f.path().filename().string();
    curves += n.rfind("curve_", 0) == 0;
    maps += n.ends_with(".pgm");
  }
  EXPECT_EQ(curves, 4u);  // 2 classes x (red, nir)
  EXPECT_EQ(maps, 2u);
  const CliResult d = run("distill --config " + path("tiny.ini") + " --checkpoint " + path("m.ckpt") + " --data " + path("d.mstd") +
                    " --out " + path("ablation.csv"));
  ASSERT_EQ(d.code, 0) << d.err;
  EXPECT_EQ(nlohmann::json::parse(d.out)["rows"].get<int>(), 4);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("gen-data --config " + path("tiny.ini") + " --set data.classes=9 --out " + path("x.mstd")).code, 2);
  EXPECT_EQ(run("gen-data --set nosuch.key=1 --out " + path("x.mstd")).code, 2);
  EXPECT_EQ(run("train --bogus").code, 2);
  EXPECT_EQ(run("eval --checkpoint " + path("missing.ckpt") + " --data " + path("d.mstd")).code, 2);
  std::ofstream(dir() / "junk.mstd") << "not a dataset";
  EXPECT_EQ(run("eval --checkpoint " + path("m.ckpt") + " --data " + path("junk.mstd")).code, 3);
  ASSERT_EQ(run("gen-data --set data.classes=2 --set data.per_class=2 --set data.channels=5 --set data.height=4 --set data.width=4 --out " +
                path("c5.mstd"))
                .code,
            0);
  EXPECT_EQ(run("eval --checkpoint " + path("m.ckpt") + " --data " + path("c5.mstd")).code, 3);
}
