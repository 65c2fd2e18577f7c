#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mownet/checkpoint.hpp"
#include "mownet/data.hpp"
#include "mownet/manifest.hpp"
#include "mownet/metrics.hpp"
#include "mownet/trainer.hpp"

using namespace mownet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(MOWNET_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0;) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) out.push_back(item);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) { return split(text, '\n'); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::path(::testing::TempDir()) / (std::string("cli_") + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
    setenv("MOW_RUN_DIR", (root_ / "runs").c_str(), 1);
  }

  fs::path path(const std::string& name) const { return root_ / name; }
  std::string q(const std::string& name) const { return "'" + path(name).string() + "'"; }

  // Small, well-separated dataset for quick runs.
  std::string small_data(std::size_t per_class = 20) {
    const auto file = "data" + std::to_string(per_class) + ".ds";
    if (!fs::exists(path(file))) {
      auto r = run("gen-data --n-per-class " + std::to_string(per_class) + " --dim 4 --score-noise 0.1 --seed 5 --out " + q(file));
      EXPECT_EQ(r.code, 0) << r.output;
    }
    return q(file);
  }

  static std::string fast(int epochs = 1) { return " --epochs " + std::to_string(epochs) + " --hidden 6 --weightnet-hidden 8 --k 2 --batch-size 8 --alpha 0.01 --beta 0.01 --quiet"; }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data --seed 7 --n-per-class 30 --out " + q("a.ds")).code, 0);
  ASSERT_EQ(run("gen-data --seed 7 --n-per-class 30 --out " + q("b.ds")).code, 0);
  EXPECT_EQ(read_bytes(path("a.ds")), read_bytes(path("b.ds")));
  EXPECT_TRUE(fs::exists(path("runs/gen-data-1/manifest.txt")));
  EXPECT_TRUE(fs::exists(path("runs/gen-data-2/manifest.txt")));
}

TEST_F(Cli, GenDataRejectsZeroPerClass) {
  auto r = run("gen-data --n-per-class 0 --out " + q("a.ds"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--n-per-class"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(path("a.ds")));
}

TEST_F(Cli, GenDataDefaultsGiveFifteenHundredSamples) {
  auto r = run("gen-data");
  ASSERT_EQ(r.code, 0) << r.output;
  auto ds = load_dataset(path("runs/gen-data-1/data.ds").string());
  EXPECT_EQ(ds.size(), 1500u);
  EXPECT_EQ(ds.dim, 16u);
}

TEST_F(Cli, TrainBothMethodsEmitReports) {
  const auto data = small_data();
  for (std::string method : {"ce", "mow"}) {
    auto r = run("train --method " + method + " --dataset " + data + fast() + " --out " + q(method));
    ASSERT_EQ(r.code, 0) << r.output;
    for (auto f : {"report.csv", "report.txt", "confusion.csv", "embeddings.csv", "trace.csv", "ckpt_final.bin",
                   "ckpt_epoch_1.bin", "test.ds", "manifest.txt"})
      EXPECT_TRUE(fs::exists(path(method) / f)) << method << " " << f;
  }
  EXPECT_TRUE(fs::exists(path("mow/trajectory.csv")));
  EXPECT_TRUE(fs::exists(path("mow/alignment.csv")));
  EXPECT_EQ(lines_of(read_bytes(path("ce/trace.csv"))).front(), "iter,epoch,ce_loss");
  EXPECT_EQ(lines_of(read_bytes(path("mow/trace.csv"))).front(), trace_csv_header(3));
  EXPECT_TRUE(load_checkpoint(path("ce/ckpt_final.bin").string()).phi.empty());
  EXPECT_FALSE(load_checkpoint(path("mow/ckpt_final.bin").string()).phi.empty());
}

TEST_F(Cli, ZeroEpochsReportsTheInitialBackbone) {
  const auto data = small_data();
  auto r = run("train --dataset " + data + " --epochs 0 --hidden 6 --weightnet-hidden 8 --k 2 --seed 9 --out " + q("run"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(lines_of(read_bytes(path("run/trace.csv"))).size(), 1u);
  auto ck = load_checkpoint(path("run/ckpt_final.bin").string());
  EXPECT_EQ(ck.theta.hash(), init_backbone(BackboneSpec{4, {6}, 3}, RunSeeds(9).theta_init).hash());
  auto test = load_dataset(path("run/test.ds").string());
  EXPECT_EQ(read_bytes(path("run/report.csv")), report_csv(evaluate(ck.theta, test).report));
}

TEST_F(Cli, OversizedKIsACapacityErrorBeforeAnyRun) {
  const auto data = small_data(6);
  auto r = run("train --dataset " + data + " --k 10 --epochs 1 --quiet");
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("class "), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(path("runs/train-1")));
}

TEST_F(Cli, EvalReproducesTheTrainingReport) {
  const auto data = small_data();
  ASSERT_EQ(run("train --dataset " + data + fast(2) + " --out " + q("run")).code, 0);
  const auto ck = q("run/ckpt_final.bin"), test = q("run/test.ds");
  auto r1 = run("eval --checkpoint " + ck + " --dataset " + test + " --out " + q("e1"));
  ASSERT_EQ(r1.code, 0) << r1.output;
  ASSERT_EQ(run("eval --checkpoint " + ck + " --dataset " + test + " --out " + q("e2")).code, 0);
  EXPECT_EQ(read_bytes(path("e1/report.csv")), read_bytes(path("run/report.csv")));
  EXPECT_EQ(read_bytes(path("e1/embeddings.csv")), read_bytes(path("run/embeddings.csv")));
  for (auto f : {"report.csv", "report.txt", "confusion.csv", "embeddings.csv"})
    EXPECT_EQ(read_bytes(path("e1") / f), read_bytes(path("e2") / f)) << f;
}

TEST_F(Cli, CorruptCheckpointIsAFormatError) {
  const auto data = small_data();
  std::ofstream(path("bad.bin"), std::ios::binary) << "NOTACHECKPOINT";
  auto r = run("eval --checkpoint " + q("bad.bin") + " --dataset " + data);
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_NE(r.output.find("format error"), std::string::npos);
}

TEST_F(Cli, TruncatedDatasetIsAFormatError) {
  const auto bytes = read_bytes(fs::path(small_data().substr(1, small_data().size() - 2)));
  std::ofstream(path("cut.ds"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_EQ(run("train --dataset " + q("cut.ds") + fast()).code, 4);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --epochs 1").code, 2);
  EXPECT_EQ(run("train --dataset " + small_data() + " --method svm").code, 2);
  EXPECT_EQ(run("train --dataset " + small_data() + " --alpha -1").code, 2);
  EXPECT_EQ(run("sweep-k --dataset " + small_data() + " --k 1,x").code, 2);
  EXPECT_EQ(run("eval --dataset " + small_data()).code, 2);
}

TEST_F(Cli, HelpExitsCleanly) {
  auto r = run("train --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("--hypergrad"), std::string::npos);
}

TEST_F(Cli, CrossCheckFaultIsANumericError) {
  auto r = run("train --dataset " + small_data() + fast() + " --cross-check --fault-flip-decomposed-sign");
  EXPECT_EQ(r.code, 5) << r.output;
}

TEST_F(Cli, SweepCountsRunsAndRows) {
  auto r = run("sweep-k --dataset " + small_data() + " --k 1,5,10 --seeds 3 --epochs 1 --hidden 6 --weightnet-hidden 8 "
               "--batch-size 8 --out " + q("sweep"));
  ASSERT_EQ(r.code, 0) << r.output;
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(path("sweep")))
    if (e.is_directory()) {
      ++runs;
      EXPECT_TRUE(fs::exists(e.path() / "manifest.txt"));
      EXPECT_TRUE(fs::exists(e.path() / "report.csv"));
    }
  EXPECT_EQ(runs, 9u);
  auto lines = lines_of(read_bytes(path("sweep/aggregate.csv")));
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "k,runs,failed," + report_csv_header(3));
  EXPECT_EQ(lines[1].substr(0, 6), "1,3,0,");
  EXPECT_EQ(lines[3].substr(0, 7), "10,3,0,");

  // Medians recomputed from the individual run reports.
  const auto header = split(lines[0], ',');
  for (std::size_t row = 1; row < lines.size(); ++row) {
    const auto cells = split(lines[row], ',');
    const std::string k = cells[0];
    for (std::size_t col = 3; col < header.size(); ++col) {
      std::vector<double> values;
      for (int s = 0; s < 3; ++s) {
        auto rep = parse_report_csv(read_bytes(path("sweep/k" + k + "-seed" + std::to_string(s) + "/report.csv")));
        if (auto v = rep.at(header[col])) values.push_back(*v);
      }
      if (values.empty()) {
        EXPECT_EQ(cells[col], kUndefined);
        continue;
      }
      std::sort(values.begin(), values.end());
      const auto n = values.size();
      const double med = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
      EXPECT_EQ(cells[col], format_double(med)) << "k=" << k << " " << header[col];
    }
  }
}

TEST_F(Cli, SweepWithOneRunEqualsThatRunsReport) {
  auto r = run("sweep-k --dataset " + small_data() + " --k 2 --seeds 1 --seed 4 --epochs 1 --hidden 6 --weightnet-hidden 8 --out " +
               q("sweep"));
  ASSERT_EQ(r.code, 0) << r.output;
  auto agg = lines_of(read_bytes(path("sweep/aggregate.csv")));
  auto rep = lines_of(read_bytes(path("sweep/k2-seed4/report.csv")));
  ASSERT_EQ(agg.size(), 2u);
  EXPECT_EQ(agg[1], "2,1,0," + rep[1]);
  auto m = load_manifest(path("sweep/k2-seed4/manifest.txt"));
  EXPECT_EQ(m.get("k"), "2");
  EXPECT_EQ(m.get("seed"), "4");
  EXPECT_FALSE(m.get("seeds").has_value());
}

TEST_F(Cli, SweepContinuesPastAFailedRun) {
  auto r = run("sweep-k --dataset " + small_data() + " --k 30,2 --seeds 1 --epochs 1 --hidden 6 --weightnet-hidden 8 --out " +
               q("sweep"));
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("k=30 seed=0 failed"), std::string::npos) << r.output;
  auto lines = lines_of(read_bytes(path("sweep/aggregate.csv")));
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[1].substr(0, 7), "30,0,1,");
  EXPECT_EQ(lines[2].substr(0, 6), "2,1,0,");
  EXPECT_TRUE(fs::exists(path("sweep/k30-seed0/manifest.txt")));
}

TEST_F(Cli, SweepWithParallelJobsMatchesSequential) {
  const std::string common = " --dataset " + small_data() + " --k 1,2 --seeds 2 --epochs 1 --hidden 6 --weightnet-hidden 8";
  ASSERT_EQ(run("sweep-k" + common + " --jobs 1 --out " + q("seq")).code, 0);
  ASSERT_EQ(run("sweep-k" + common + " --jobs 3 --out " + q("par")).code, 0);
  EXPECT_EQ(read_bytes(path("seq/aggregate.csv")), read_bytes(path("par/aggregate.csv")));
  EXPECT_EQ(read_bytes(path("seq/k2-seed1/ckpt_final.bin")), read_bytes(path("par/k2-seed1/ckpt_final.bin")));
}

TEST_F(Cli, GradcheckDefaultsPass) {
  auto r = run("gradcheck --out " + q("gc"));
  EXPECT_EQ(r.code, 0) << r.output;
  auto lines = lines_of(read_bytes(path("gc/gradcheck.csv")));
  EXPECT_EQ(lines.size(), 1u + 400u + 150u);
}

TEST_F(Cli, GradcheckFaultInjectionFails) {
  auto r = run("gradcheck --trials 3 --fault-flip-decomposed-sign");
  EXPECT_EQ(r.code, 5) << r.output;
  EXPECT_NE(r.output.find("FAIL"), std::string::npos);
}

TEST_F(Cli, GradcheckWithZeroTrialsWarns) {
  auto r = run("gradcheck --trials 0");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("warning"), std::string::npos);
}

TEST_F(Cli, FlagsOverrideConfigFileValues) {
  std::ofstream(path("cfg.txt")) << "# settings\nmethod = ce\nepochs = 1\nseed = 3\nhidden = 6\nquiet = true\n";
  auto r = run("train --config " + q("cfg.txt") + " --dataset " + small_data() + " --seed 4 --out " + q("run"));
  ASSERT_EQ(r.code, 0) << r.output;
  auto m = load_manifest(path("run/manifest.txt"));
  EXPECT_EQ(m.mode, "train");
  EXPECT_EQ(m.get("seed"), "4");
  EXPECT_EQ(m.get("epochs"), "1");
  EXPECT_EQ(m.get("method"), "ce");
  EXPECT_EQ(m.get("alpha"), "0.0001");
  EXPECT_EQ(lines_of(read_bytes(path("run/trace.csv"))).front(), "iter,epoch,ce_loss");
}

TEST_F(Cli, BadConfigFilesAreUsageErrors) {
  std::ofstream(path("unknown.txt")) << "colour = blue\n";
  EXPECT_EQ(run("train --config " + q("unknown.txt") + " --dataset " + small_data()).code, 2);
  std::ofstream(path("garbled.txt")) << "epochs\n";
  EXPECT_EQ(run("train --config " + q("garbled.txt") + " --dataset " + small_data()).code, 2);
  std::ofstream(path("invalid.txt")) << "epochs = many\n";
  EXPECT_EQ(run("train --config " + q("invalid.txt") + " --dataset " + small_data()).code, 2);
  EXPECT_EQ(run("train --config " + q("absent.txt") + " --dataset " + small_data()).code, 2);
}

TEST_F(Cli, ManifestAloneReproducesTheRun) {
  ASSERT_EQ(run("train --dataset " + small_data() + fast(2) + " --seed 8 --out " + q("a")).code, 0);
  auto r = run("train --config " + q("a/manifest.txt") + " --out " + q("b"));
  ASSERT_EQ(r.code, 0) << r.output;
  for (auto f : {"ckpt_final.bin", "ckpt_epoch_1.bin", "trace.csv", "report.csv", "test.ds", "embeddings.csv"})
    EXPECT_EQ(read_bytes(path("a") / f), read_bytes(path("b") / f)) << f;
  auto ma = load_manifest(path("a/manifest.txt")), mb = load_manifest(path("b/manifest.txt"));
  EXPECT_EQ(ma.config, mb.config);

  ASSERT_EQ(run("gen-data --n-per-class 10 --seed 2 --out " + q("g.ds")).code, 0);
  // small_data() above used gen-data-1.
  ASSERT_EQ(run("gen-data --config " + q("runs/gen-data-2/manifest.txt") + " --out " + q("h.ds")).code, 0);
  EXPECT_EQ(read_bytes(path("g.ds")), read_bytes(path("h.ds")));
}

TEST_F(Cli, RunDirectoriesAreAppendOnly) {
  const auto data = small_data();
  ASSERT_EQ(run("train --dataset " + data + fast()).code, 0);
  ASSERT_EQ(run("train --dataset " + data + fast()).code, 0);
  EXPECT_TRUE(fs::exists(path("runs/train-1/manifest.txt")));
  EXPECT_TRUE(fs::exists(path("runs/train-2/manifest.txt")));

  const auto before = read_bytes(path("runs/train-1/ckpt_final.bin"));
  auto r = run("train --dataset " + data + fast() + " --seed 99 --out " + q("runs/train-1"));
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(read_bytes(path("runs/train-1/ckpt_final.bin")), before);
}

TEST_F(Cli, ManifestRecordsArtifactsAndTimestamps) {
  ASSERT_EQ(run("train --dataset " + small_data() + fast() + " --out " + q("run")).code, 0);
  auto m = load_manifest(path("run/manifest.txt"));
  EXPECT_FALSE(m.started.empty());
  EXPECT_FALSE(m.finished.empty());
  EXPECT_TRUE(fs::path(*m.get("dataset")).is_absolute());
  std::vector<std::string> names;
  for (const auto& [k, v] : m.artifacts) {
    names.push_back(k);
    EXPECT_TRUE(fs::exists(v)) << k << " -> " << v;
  }
  for (auto want : {"checkpoint", "trace", "report", "embeddings", "test_dataset"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
}
