// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mownet/checkpoint.hpp"
#include "mownet/data.hpp"
#include "mownet/manifest.hpp"
#include "mownet/metrics.hpp"
#include "mownet/selfcheck.hpp"
#include "mownet/trainer.hpp"
#include "support/scalar_problem.hpp"

using namespace mownet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.precision(digits);
  out << v;
  return out.str();
}

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult cli(const std::string& args) {
  const std::string cmd = std::string(MOWNET_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
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

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Shared state between criteria that reuse the same CLI runs.
struct Workspace {
  fs::path root;
  fs::path dataset;
  fs::path run_a, run_b;
  bool runs_ok = false;
};

Outcome autodiff_correctness() {
  const auto t0 = Clock::now();
  selfcheck::AutodiffSuiteOptions opts;
  opts.trials = 200;
  opts.fd_step = 1e-5;
  opts.tolerance = 1e-6;
  const auto rep = selfcheck::run_autodiff_suite(opts);
  const double secs = seconds_since(t0);
  const bool every_kind = opts.trials >= std::size(selfcheck::kPrimitiveKinds);
  return {rep.passed() && every_kind && secs < 30.0,
          std::to_string(rep.cases.size()) + " checks over 200 graphs, " + std::to_string(rep.failures()) +
              " failures, worst relative error " + fmt(rep.worst(), 3) + ", " + fmt(secs, 3) + " s"};
}

Outcome hypergradient_agreement() {
  // Re-draw the same instances to confirm their sizes.
  selfcheck::HypergradSuiteOptions opts;
  std::mt19937_64 rng(opts.seed);
  std::size_t max_params = 0, max_n = 0;
  bool shapes_ok = true;
  for (std::size_t t = 0; t < opts.trials; ++t) {
    auto inst = selfcheck::make_bilevel_instance(rng, 8, t % 2 == 0 ? MceWeighting::Label : MceWeighting::AllClasses);
    const auto n = inst.batch.labels.size();
    max_params = std::max(max_params, inst.theta.numel());
    max_n = std::max(max_n, n);
    shapes_ok = shapes_ok && inst.model.num_classes() == 3 && inst.meta.features.rows() == 3 * inst.meta.num_sets &&
                inst.meta.num_sets == n;
  }
  shapes_ok = shapes_ok && max_params <= 50 && max_n <= 4;

  const auto t0 = Clock::now();
  const auto rep = selfcheck::run_hypergrad_suite(opts);
  const double secs = seconds_since(t0);
  double routes = 0.0, fd = 0.0;
  for (const auto& c : rep.cases) {
    if (c.name.ends_with("through vs decomposed")) {
      routes = std::max(routes, c.error);
    } else {
      fd = std::max(fd, c.error);
    }
  }
  return {rep.passed() && shapes_ok && secs < 60.0,
          "50 instances (|theta| <= " + std::to_string(max_params) + ", N <= " + std::to_string(max_n) +
              ", K = 1, C = 3), routes " + fmt(routes, 3) + " (tol 1e-8), vs finite differences " + fmt(fd, 3) +
              " (tol 1e-5), " + std::to_string(rep.failures()) + " failures, " + fmt(secs, 3) + " s"};
}

Outcome scalar_oracle() {
  double worst = 0.0;
  for (auto weighting : {MceWeighting::Label, MceWeighting::AllClasses})
    for (auto mode : {HypergradMode::Through, HypergradMode::Decomposed})
      for (int y : {0, 1}) {
        testing::ScalarProblem p;
        p.weighting = weighting;
        p.y = y;
        worst = std::max(worst, testing::scalar_oracle_error(p, mode));
      }
  return {worst <= 1e-12, "worst absolute deviation from the closed-form trace " + fmt(worst, 3) + " (tol 1e-12)"};
}

Outcome mce_reductions() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  bool exact = true;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> z(3);
    for (auto& v : z) v = n(rng);
    auto lp = log_softmax(Tensor::constant(1, 3, z));
    const int y = t % 3;
    std::vector<double> w(3, 0.0);
    w[static_cast<std::size_t>(y)] = 1.0;
    const double mce = forward_eval(mce_loss(lp, Tensor::constant(1, 3, w)));
    exact = exact && mce == -lp(0, static_cast<std::size_t>(y));
  }
  auto uniform = log_softmax(Tensor::zeros(1, 3));
  const double value = forward_eval(mce_loss(uniform, Tensor::ones(1, 3)));
  const double err = std::abs(value - 3.0 * std::log(3.0));
  return {exact && err <= 1e-12, std::string("one-hot weights equal CE exactly on 200 cases: ") + (exact ? "yes" : "no") +
                                     "; uniform case " + fmt(value, 17) + " vs 3 ln 3, error " + fmt(err, 3)};
}

Outcome mos_invariants() {
  const auto ds = generate(SynthConfig{});
  const auto labels = ds.labels();
  TrainConfig cfg;
  cfg.epochs = 1;
  std::size_t sets = 0, violations = 0;
  TrainObserver obs;
  obs.on_mos = [&](const MetaOrdinalSet& m) {
    ++sets;
    if (m.size() != static_cast<std::size_t>(cfg.num_classes) * cfg.k || !mos_violation(m, labels, cfg.k).empty())
      ++violations;
  };
  train(cfg, ds, obs);
  return {violations == 0 && sets == ds.size(),
          std::to_string(sets) + " meta ordinal sets over one epoch of " + std::to_string(ds.size()) + " samples (K = 5), " +
              std::to_string(violations) + " violations"};
}

Outcome determinism(Workspace& ws) {
  const auto t0 = Clock::now();
  auto a = cli("train --method mow --seed 42 --quiet --dataset " + quoted(ws.dataset) + " --out " + quoted(ws.run_a));
  auto b = cli("train --method mow --seed 42 --quiet --dataset " + quoted(ws.dataset) + " --out " + quoted(ws.run_b));
  const double secs = seconds_since(t0);
  if (a.code != 0 || b.code != 0) return {false, "training failed: " + a.output + b.output};
  ws.runs_ok = true;
  const bool ckpt = read_bytes(ws.run_a / "ckpt_final.bin") == read_bytes(ws.run_b / "ckpt_final.bin");
  const bool trace = read_bytes(ws.run_a / "trace.csv") == read_bytes(ws.run_b / "trace.csv");
  return {ckpt && trace, std::string("final checkpoints ") + (ckpt ? "identical" : "DIFFER") + ", trace CSVs " +
                             (trace ? "identical" : "DIFFER") + " (two 100-epoch runs, " + fmt(secs, 3) + " s)"};
}

Outcome phi_free_inference(Workspace& ws) {
  if (!ws.runs_ok) return {false, "no trained run available"};
  const auto ck = load_checkpoint((ws.run_a / "ckpt_final.bin").string());
  const auto test = load_dataset((ws.run_a / "test.ds").string());
  std::mt19937_64 rng(12345);
  std::normal_distribution<double> n(0.0, 5.0);
  auto flat = ck.phi.flatten();
  for (auto& v : flat) v = n(rng);
  const auto random_phi = ck.phi.unflatten(flat);
  const auto randomized = ws.root / "randomized_phi.bin";
  save_checkpoint(randomized.string(), ck.theta, random_phi);

  const auto e1 = cli("eval --checkpoint " + quoted(ws.run_a / "ckpt_final.bin") + " --dataset " + quoted(ws.run_a / "test.ds") +
                      " --out " + quoted(ws.root / "eval_trained"));
  const auto e2 = cli("eval --checkpoint " + quoted(randomized) + " --dataset " + quoted(ws.run_a / "test.ds") + " --out " +
                      quoted(ws.root / "eval_randomized"));
  if (e1.code != 0 || e2.code != 0) return {false, "eval failed: " + e1.output + e2.output};
  bool same = true;
  for (auto f : {"report.csv", "confusion.csv", "embeddings.csv"})
    same = same && read_bytes(ws.root / "eval_trained" / f) == read_bytes(ws.root / "eval_randomized" / f);

  const auto spec = infer_backbone_spec(ck.theta);
  std::vector<std::size_t> all(test.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto preds = predict_classes(ck.theta, spec, test.features(all));
  const auto reloaded = load_checkpoint(randomized.string());
  const bool phi_changed = reloaded.phi.hash() != ck.phi.hash();
  const bool lib_same = predict_classes(reloaded.theta, spec, test.features(all)) == preds;
  return {same && lib_same && phi_changed && test.size() == 300,
          std::to_string(test.size()) + "-sample test set, predictions and eval outputs " +
              (same && lib_same ? "unchanged" : "CHANGED") + " after randomizing phi"};
}

struct SeedResult {
  double accuracy = 0.0;
  double unsure_recall = 0.0;
  double seconds = 0.0;
};

Outcome directional_result() {
  const auto ds = generate(SynthConfig{});
  TrainConfig cfg;
  cfg.k = 5;
  cfg.epochs = 60;
  cfg.alpha = 1e-4;
  cfg.beta = 1e-4;
  cfg.batch_size = 16;
  cfg.outer_optimizer = OuterOptimizer::Adam;
  cfg.adam.weight_decay = 1e-4;

  std::vector<double> mow_acc, ce_acc, mow_rec, ce_rec;
  double slowest = 0.0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [train_ds, test_ds] = split_dataset(ds, 0.8, seed);
    cfg.seed = seed;
    auto t0 = Clock::now();
    auto mow = evaluate(train(cfg, train_ds).theta, test_ds).report;
    slowest = std::max(slowest, seconds_since(t0));
    t0 = Clock::now();
    auto ce = evaluate(train_ce_baseline(cfg, train_ds).theta, test_ds).report;
    slowest = std::max(slowest, seconds_since(t0));
    mow_acc.push_back(mow.accuracy);
    ce_acc.push_back(ce.accuracy);
    mow_rec.push_back(mow.classes[1].recall.value_or(0.0));
    ce_rec.push_back(ce.classes[1].recall.value_or(0.0));
    per_seed << "\n      seed " << seed << ": MOW acc " << fmt(mow.accuracy) << " unsure recall " << fmt(mow_rec.back())
             << " | CE acc " << fmt(ce.accuracy) << " unsure recall " << fmt(ce_rec.back());
  }
  const double ma = median(mow_acc), ca = median(ce_acc), mr = median(mow_rec), cr = median(ce_rec);
  const bool ok = ma >= ca - 0.01 && mr >= cr && slowest < 300.0;
  return {ok, "median accuracy MOW " + fmt(ma) + " vs CE " + fmt(ca) + " (needs >= CE - 0.01), median unsure recall MOW " +
                  fmt(mr) + " vs CE " + fmt(cr) + ", slowest run " + fmt(slowest, 3) + " s" + per_seed.str()};
}

Outcome k_sweep(Workspace& ws) {
  const auto out = ws.root / "sweep";
  const auto t0 = Clock::now();
  auto r = cli("sweep-k --k 1,5,10 --seeds 3 --dataset " + quoted(ws.dataset) + " --out " + quoted(out));
  const double secs = seconds_since(t0);
  if (r.code != 0) return {false, "sweep-k exited with " + std::to_string(r.code) + ": " + r.output};
  const auto lines = split(read_bytes(out / "aggregate.csv"), '\n');
  bool ok = lines.size() == 4;
  std::string summary;
  for (std::size_t i = 1; ok && i < lines.size(); ++i) {
    const auto cells = split(lines[i], ',');
    ok = cells.size() >= 4 && cells[1] == "3" && cells[2] == "0" && cells[3] != kUndefined;
    if (ok) summary += " K=" + cells[0] + " median accuracy " + fmt(std::stod(cells[3]));
  }
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.is_directory() && fs::exists(e.path() / "report.csv")) ++runs;
  ok = ok && runs == 9;
  return {ok, std::to_string(runs) + " runs, aggregate rows:" + summary + " (" + fmt(secs, 3) + " s)"};
}

Outcome weight_trajectory(Workspace& ws) {
  if (!ws.runs_ok) return {false, "no trained run available"};
  const auto lines = split(read_bytes(ws.run_a / "trace.csv"), '\n');
  if (lines.empty() || lines[0] != trace_csv_header(3)) return {false, "unexpected trace header"};
  const auto header = split(lines[0], ',');
  std::vector<std::size_t> omega_cols;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (header[c].starts_with("omega_")) omega_cols.push_back(c);

  const auto test = load_dataset((ws.run_a / "test.ds").string());
  const std::size_t train_size = 1500 - test.size();
  const std::size_t expected_rows = 100 * ((train_size + 15) / 16);
  std::size_t rows = 0, outside = 0;
  bool sequential = true;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split(lines[i], ',');
    sequential = sequential && cells[0] == std::to_string(rows);
    for (auto c : omega_cols) {
      const double w = std::stod(cells[c]);
      if (!(w > 0.0 && w < 1.0)) ++outside;
    }
    ++rows;
  }
  return {rows == expected_rows && sequential && outside == 0 && omega_cols.size() == 6,
          std::to_string(rows) + " iteration rows (expected " + std::to_string(expected_rows) + "), " +
              std::to_string(omega_cols.size()) + " per-class weight columns, " + std::to_string(outside) +
              " values outside (0,1)"};
}

}  // namespace

int main() {
  Workspace ws;
  ws.root = fs::temp_directory_path() / ("mownet_acceptance_" + std::to_string(getpid()));
  fs::remove_all(ws.root);
  fs::create_directories(ws.root);
  setenv("MOW_RUN_DIR", (ws.root / "runs").c_str(), 1);
  ws.dataset = ws.root / "default.ds";
  ws.run_a = ws.root / "train_a";
  ws.run_b = ws.root / "train_b";
  const auto gen = cli("gen-data --out " + quoted(ws.dataset));
  if (gen.code != 0) {
    std::cerr << "could not generate the default dataset: " << gen.output << "\n";
    return 1;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"autodiff correctness", autodiff_correctness},
      {"hypergradient triple agreement", hypergradient_agreement},
      {"scalar oracle of one training iteration", scalar_oracle},
      {"MCE reductions", mce_reductions},
      {"meta ordinal set invariants", mos_invariants},
      {"determinism of train --method mow --seed 42", [&] { return determinism(ws); }},
      {"inference without the weight nets", [&] { return phi_free_inference(ws); }},
      {"directional synthetic result", directional_result},
      {"K sweep", [&] { return k_sweep(ws); }},
      {"weight trajectory artifact", [&] { return weight_trajectory(ws); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.passed) ++failed;
    std::cout << (o.passed ? "PASS" : "FAIL") << "  criterion " << i + 1 << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  if (failed == 0) fs::remove_all(ws.root);
  return failed == 0 ? 0 : 1;
}
