// mownet: data generation, training, evaluation, K sweeps and gradient
// self-checks from the command line.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mownet/checkpoint.hpp"
#include "mownet/data.hpp"
#include "mownet/manifest.hpp"
#include "mownet/metrics.hpp"
#include "mownet/selfcheck.hpp"
#include "mownet/trainer.hpp"

namespace fs = std::filesystem;
using namespace mownet;

namespace {

enum ExitCode : int { kOk = 0, kOther = 1, kUsage = 2, kCapacity = 3, kFormat = 4, kNumeric = 5 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fs::path run_root() {
  const char* env = std::getenv("MOW_RUN_DIR");
  return (env != nullptr && *env != '\0') ? fs::path(env) : fs::path("runs");
}

fs::path open_run_directory(const std::string& out, const std::string& mode) {
  return out.empty() ? create_run_directory(run_root(), mode) : claim_run_directory(out);
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v < 1) throw UsageError(flag + ": '" + item + "' is not a positive integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

// Current value of every long option except the ones that only steer where
// things go. Used as the manifest's config snapshot.
KeyValues option_snapshot(CLI::App* cmd) {
  KeyValues kv;
  for (const CLI::Option* opt : cmd->get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty()) continue;
    const auto& name = names.front();
    if (name == "help" || name == "config" || name == "out") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
      if (opt->get_expected_max() == 0 && value.empty()) value = "true";
    } else {
      value = opt->get_default_str();
      if (opt->get_expected_max() == 0 && value.empty()) value = "false";
    }
    kv.emplace_back(name, value);
  }
  return kv;
}

// Fills options not given on the command line from a key = value file.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  KeyValues kv;
  try {
    kv = load_key_values(path);
  } catch (const IoError& e) {
    throw UsageError(std::string("--config: ") + e.what());
  } catch (const FormatError& e) {
    throw UsageError("--config " + path + ": " + e.what());
  }
  for (const auto& [key, value] : kv) {
    if (RunManifest::is_record_key(key) || key == "out" || key == "config") continue;
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("--config " + path + ": unknown key '" + key + "' for " + cmd->get_name());
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

RunManifest begin_manifest(CLI::App* cmd) {
  RunManifest m;
  m.mode = cmd->get_name();
  m.started = utc_timestamp();
  for (const auto& [k, v] : option_snapshot(cmd)) m.set(k, v);
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& dir) {
  m.finished = utc_timestamp();
  save_manifest(m, dir / "manifest.txt");
}

std::string absolute_string(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string out = "true\\predicted";
  for (int c = 0; c < cm.num_classes(); ++c) out += std::string(",") + class_name(c);
  out += "\n";
  for (int t = 0; t < cm.num_classes(); ++t) {
    out += class_name(t);
    for (int p = 0; p < cm.num_classes(); ++p) out += "," + std::to_string(cm.count(t, p));
    out += "\n";
  }
  return out;
}

// Report files shared by train and eval.
void write_evaluation(const fs::path& dir, const Evaluation& ev, const std::string& method, RunManifest& m) {
  write_text(dir / "report.csv", report_csv(ev.report));
  write_text(dir / "report.txt", format_report_table(ev.report, method));
  write_text(dir / "confusion.csv", confusion_csv(ev.confusion));
  dump_embeddings(ev.embeddings, ev.labels, (dir / "embeddings.csv").string());
  m.add_artifact("report", absolute_string(dir / "report.csv"));
  m.add_artifact("report_table", absolute_string(dir / "report.txt"));
  m.add_artifact("confusion", absolute_string(dir / "confusion.csv"));
  m.add_artifact("embeddings", absolute_string(dir / "embeddings.csv"));
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t n_per_class = 500;
  std::size_t dim = 16;
  double overlap = 1.0;
  double score_noise = 0.35;
  double feature_noise = 1.0;
  double signal = 3.0;
};

void add_gen_options(CLI::App* cmd, GenArgs& a) {
  cmd->add_option("--out", a.out, "Dataset file to write (default: data.ds in a new run directory)");
  cmd->add_option("--seed", a.seed, "Generator seed");
  cmd->add_option("--n-per-class", a.n_per_class, "Samples drawn per score center")->check(CLI::Range(1, 10000000));
  cmd->add_option("--dim", a.dim, "Feature dimension")->check(CLI::Range(1, 100000));
  cmd->add_option("--overlap", a.overlap, "Score-noise multiplier of the unsure class")->check(CLI::PositiveNumber);
  cmd->add_option("--score-noise", a.score_noise, "Score noise standard deviation")->check(CLI::PositiveNumber);
  cmd->add_option("--feature-noise", a.feature_noise, "Feature noise standard deviation")->check(CLI::PositiveNumber);
  cmd->add_option("--signal", a.signal, "Feature displacement per score unit")->check(CLI::NonNegativeNumber);
}

int cmd_gen_data(CLI::App* cmd, const GenArgs& a) {
  SynthConfig cfg;
  cfg.seed = a.seed;
  cfg.dim = a.dim;
  cfg.n_per_class = {a.n_per_class, a.n_per_class, a.n_per_class};
  cfg.overlap = a.overlap;
  cfg.score_noise = a.score_noise;
  cfg.feature_noise = a.feature_noise;
  cfg.signal = a.signal;
  auto m = begin_manifest(cmd);
  const auto ds = generate(cfg);

  const fs::path dir = create_run_directory(run_root(), "gen-data");
  const fs::path out = a.out.empty() ? dir / "data.ds" : fs::path(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_dataset(ds, out.string());
  m.add_artifact("dataset", absolute_string(out));
  finish_manifest(m, dir);

  const auto counts = ds.class_index(kNumOrdinalClasses);
  std::cout << "wrote " << ds.size() << " samples (benign " << counts[0].size() << ", unsure " << counts[1].size()
            << ", malignant " << counts[2].size() << ") to " << out.string() << "\n"
            << "run directory: " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string dataset;
  std::string test_dataset;
  std::string out;
  std::string method = "mow";
  std::size_t k = 5;
  double alpha = 1e-4;
  double beta = 1e-4;
  int epochs = 100;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::string hypergrad = "through";
  std::string outer_opt = "sgd";
  std::string mos = "per-sample";
  std::string mce_weighting = "label";
  std::string hidden = "32";
  std::size_t weightnet_hidden = 100;
  double lr_decay = 0.1;
  int lr_decay_period = 80;
  double weight_decay = 1e-4;
  double test_fraction = 0.2;
  int checkpoint_every = 1;
  bool cross_check = false;
  bool fault_flip_sign = false;
  bool quiet = false;
};

void add_train_options(CLI::App* cmd, TrainArgs& a, bool single_k) {
  cmd->add_option("--dataset", a.dataset, "MOWDS dataset file");
  cmd->add_option("--test-dataset", a.test_dataset, "Separate evaluation set (default: split off --test-fraction)");
  cmd->add_option("--method", a.method, "mow or ce")->check(CLI::IsMember({"mow", "ce"}));
  if (single_k) cmd->add_option("--k", a.k, "Meta samples per class in each meta ordinal set")->check(CLI::Range(1, 1000000));
  cmd->add_option("--alpha", a.alpha, "Backbone learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--beta", a.beta, "Weight-net learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", a.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  cmd->add_option("--batch-size", a.batch_size, "Mini-batch size")->check(CLI::Range(1, 1000000));
  cmd->add_option("--seed", a.seed, "Run seed (initialization, batch order, meta sets, split)");
  cmd->add_option("--hypergrad", a.hypergrad, "through or decomposed")->check(CLI::IsMember({"through", "decomposed"}));
  cmd->add_option("--outer-opt", a.outer_opt, "Backbone optimizer: sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
  cmd->add_option("--mos", a.mos, "per-sample or batch")->check(CLI::IsMember({"per-sample", "batch"}));
  cmd->add_option("--mce-weighting", a.mce_weighting, "label (weights scale the labelled class term) or all")
      ->check(CLI::IsMember({"label", "all"}));
  cmd->add_option("--hidden", a.hidden, "Backbone hidden widths, comma separated");
  cmd->add_option("--weightnet-hidden", a.weightnet_hidden, "Hidden width of each weight net")->check(CLI::Range(1, 100000));
  cmd->add_option("--lr-decay", a.lr_decay, "Learning-rate decay factor")->check(CLI::Range(1e-12, 1.0));
  cmd->add_option("--lr-decay-period", a.lr_decay_period, "Epochs between decays")->check(CLI::Range(1, 1000000));
  cmd->add_option("--weight-decay", a.weight_decay, "Adam weight decay")->check(CLI::NonNegativeNumber);
  cmd->add_option("--test-fraction", a.test_fraction, "Share of each class held out for the report")
      ->check(CLI::Range(0.0, 0.95));
  cmd->add_option("--checkpoint-every", a.checkpoint_every, "Epochs between checkpoints (0: final only)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_flag("--cross-check", a.cross_check, "Compute both hypergradient routes and fail on disagreement");
  cmd->add_flag("--fault-flip-decomposed-sign", a.fault_flip_sign)->group("");
  cmd->add_flag("--quiet", a.quiet, "No per-epoch progress");
}

TrainConfig make_train_config(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.alpha = a.alpha;
  cfg.beta = a.beta;
  cfg.batch_size = a.batch_size;
  cfg.k = a.k;
  cfg.epochs = a.epochs;
  cfg.lr_decay = a.lr_decay;
  cfg.lr_decay_period = a.lr_decay_period;
  cfg.adam.weight_decay = a.weight_decay;
  cfg.seed = a.seed;
  cfg.mos_mode = a.mos == "batch" ? MosMode::BatchShared : MosMode::PerSample;
  cfg.hypergrad_mode = a.hypergrad == "decomposed" ? HypergradMode::Decomposed : HypergradMode::Through;
  cfg.outer_optimizer = a.outer_opt == "adam" ? OuterOptimizer::Adam : OuterOptimizer::Sgd;
  cfg.mce_weighting = a.mce_weighting == "all" ? MceWeighting::AllClasses : MceWeighting::Label;
  cfg.hidden_dims = parse_size_list(a.hidden, "--hidden");
  cfg.weightnet_hidden = a.weightnet_hidden;
  cfg.hypergrad_cross_check = a.cross_check;
  cfg.fault_flip_decomposed_sign = a.fault_flip_sign;
  return cfg;
}

struct Splits {
  Dataset train, test;
};

Splits load_splits(const TrainArgs& a) {
  if (a.dataset.empty()) throw UsageError("--dataset is required");
  auto ds = load_dataset(a.dataset);
  if (!a.test_dataset.empty()) return {std::move(ds), load_dataset(a.test_dataset)};
  if (a.test_fraction == 0.0) return {ds, ds};
  auto [train, test] = split_dataset(ds, 1.0 - a.test_fraction, a.seed);
  if (test.empty()) return {train, train};
  return {std::move(train), std::move(test)};
}

// Trains into `dir` and returns the final evaluation.
Evaluation run_training(const TrainArgs& a, const Splits& data, const fs::path& dir, RunManifest& m) {
  const auto cfg = make_train_config(a);
  cfg.validate();
  const int C = cfg.num_classes;
  save_dataset(data.test, (dir / "test.ds").string());
  m.add_artifact("test_dataset", absolute_string(dir / "test.ds"));

  auto checkpoint = [&](int epoch, const ParamSet& theta, const ParamSet& phi) {
    if (a.checkpoint_every > 0 && (epoch + 1) % a.checkpoint_every == 0)
      save_checkpoint((dir / ("ckpt_epoch_" + std::to_string(epoch + 1) + ".bin")).string(), theta, phi);
  };

  ParamSet theta, phi;
  if (a.method == "ce") {
    TrainObserver obs;
    obs.on_epoch_end = [&](int epoch, const ParamSet& t, const ParamSet& p) {
      checkpoint(epoch, t, p);
      if (!a.quiet) std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << "\n";
    };
    auto res = train_ce_baseline(cfg, data.train, obs);
    theta = std::move(res.theta);
    write_ce_trace_csv((dir / "trace.csv").string(), res.trace);
  } else {
    TrainObserver obs;
    obs.on_epoch_end = [&](int epoch, const ParamSet& t, const ParamSet& p) {
      checkpoint(epoch, t, p);
      if (!a.quiet) std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << "\n";
    };
    auto res = train(cfg, data.train, obs);
    theta = std::move(res.theta);
    phi = std::move(res.phi);
    write_trace_csv((dir / "trace.csv").string(), res.trace, C);
    write_alignment_csv((dir / "alignment.csv").string(), res.trace);
    write_trajectory_csv((dir / "trajectory.csv").string(),
                         res.trace.empty() ? std::vector<TrajectoryPoint>{} : summarize_weight_trajectory(res.trace), C);
    m.add_artifact("alignment", absolute_string(dir / "alignment.csv"));
    m.add_artifact("trajectory", absolute_string(dir / "trajectory.csv"));
  }
  m.add_artifact("trace", absolute_string(dir / "trace.csv"));
  save_checkpoint((dir / "ckpt_final.bin").string(), theta, phi);
  m.add_artifact("checkpoint", absolute_string(dir / "ckpt_final.bin"));

  auto ev = evaluate(theta, data.test);
  write_evaluation(dir, ev, a.method == "ce" ? "CE" : "MOW-Net", m);
  return ev;
}

int cmd_train(CLI::App* cmd, const TrainArgs& a) {
  auto m = begin_manifest(cmd);
  make_train_config(a).validate();
  const auto data = load_splits(a);
  if (a.method == "mow") check_mos_capacity(data.train.class_index(kNumOrdinalClasses), a.k);
  const auto dir = open_run_directory(a.out, "train");
  if (!a.dataset.empty()) m.set("dataset", absolute_string(a.dataset));
  if (!a.test_dataset.empty()) m.set("test-dataset", absolute_string(a.test_dataset));
  std::cout << "run directory: " << dir.string() << "\n";
  try {
    auto ev = run_training(a, data, dir, m);
    finish_manifest(m, dir);
    std::cout << format_report_table(ev.report, a.method == "ce" ? "CE" : "MOW-Net");
  } catch (...) {
    m.add_artifact("error", "see stderr");
    finish_manifest(m, dir);
    throw;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
};

int cmd_eval(CLI::App* cmd, const EvalArgs& a) {
  if (a.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (a.dataset.empty()) throw UsageError("--dataset is required");
  auto m = begin_manifest(cmd);
  m.set("checkpoint", absolute_string(a.checkpoint));
  m.set("dataset", absolute_string(a.dataset));
  const auto ck = load_checkpoint(a.checkpoint);
  const auto ds = load_dataset(a.dataset);
  auto ev = evaluate(ck.theta, ds);
  const auto dir = open_run_directory(a.out, "eval");
  write_evaluation(dir, ev, "model", m);
  finish_manifest(m, dir);
  std::cout << "run directory: " << dir.string() << "\n" << format_report_table(ev.report);
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep-k
// ---------------------------------------------------------------------------

struct SweepArgs {
  TrainArgs train;
  std::string ks = "1,5,10";
  std::size_t seeds = 3;
  std::size_t jobs = 1;
};

std::string median_cell(std::vector<double> values) {
  if (values.empty()) return kUndefined;
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  const double med = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return format_double(med);
}

int error_code(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const CapacityError&) {
    return kCapacity;
  } catch (const FormatError&) {
    return kFormat;
  } catch (const NumericError&) {
    return kNumeric;
  } catch (const ContractError&) {
    return kUsage;
  } catch (...) {
    return kOther;
  }
}

int cmd_sweep_k(CLI::App* cmd, const SweepArgs& s) {
  const auto ks = parse_size_list(s.ks, "--k");
  if (s.train.dataset.empty()) throw UsageError("--dataset is required");
  auto m = begin_manifest(cmd);
  m.set("dataset", absolute_string(s.train.dataset));
  if (!s.train.test_dataset.empty()) m.set("test-dataset", absolute_string(s.train.test_dataset));
  make_train_config(s.train).validate();
  const auto dir = open_run_directory(s.train.out, "sweep-k");
  std::cout << "run directory: " << dir.string() << "\n";

  struct Job {
    std::size_t k;
    std::uint64_t seed;
    fs::path dir;
    std::optional<ClassReport> report;
    std::string error;
    int code = kOk;
  };
  std::vector<Job> jobs;
  for (auto k : ks)
    for (std::size_t i = 0; i < s.seeds; ++i) {
      const std::uint64_t seed = s.train.seed + i;
      jobs.push_back({k, seed, dir / ("k" + std::to_string(k) + "-seed" + std::to_string(seed)), {}, {}, kOk});
    }

  std::mutex io_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      auto& job = jobs[j];
      TrainArgs a = s.train;
      a.k = job.k;
      a.seed = job.seed;
      a.quiet = true;
      RunManifest rm;
      rm.mode = "train";
      rm.started = utc_timestamp();
      for (const auto& [key, value] : m.config)
        if (key != "seeds" && key != "jobs") rm.set(key, value);
      rm.set("k", std::to_string(job.k));
      rm.set("seed", std::to_string(job.seed));
      rm.set("method", a.method);
      try {
        claim_run_directory(job.dir);
        const auto data = load_splits(a);
        job.report = run_training(a, data, job.dir, rm).report;
        finish_manifest(rm, job.dir);
        std::lock_guard lock(io_mutex);
        std::cout << "run k=" << job.k << " seed=" << job.seed << ": accuracy " << format_double(job.report->accuracy)
                  << "\n";
      } catch (const std::exception& e) {
        job.error = e.what();
        job.code = error_code(std::current_exception());
        try {
          rm.add_artifact("error", "see sweep summary");
          finish_manifest(rm, job.dir);
        } catch (...) {
        }
        std::lock_guard lock(io_mutex);
        std::cerr << "run k=" << job.k << " seed=" << job.seed << " failed: " << e.what() << "\n";
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, s.jobs); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  // One row per K: run counts, then the median of every report column.
  const int C = kNumOrdinalClasses;
  std::string csv = "k,runs,failed," + report_csv_header(C) + "\n";
  int exit_code = kOk;
  for (auto k : ks) {
    std::vector<std::vector<double>> columns;
    std::size_t runs = 0, failed = 0;
    for (const auto& job : jobs) {
      if (job.k != k) continue;
      if (!job.report) {
        ++failed;
        if (exit_code == kOk) exit_code = job.code;
        continue;
      }
      ++runs;
      const auto cells = parse_report_csv(report_csv(*job.report));
      std::size_t col = 0;
      auto push = [&](const std::string& name) {
        if (columns.size() <= col) columns.resize(col + 1);
        const auto& v = cells.at(name);
        if (v) columns[col].push_back(*v);
        ++col;
      };
      push("accuracy");
      for (int c = 0; c < C; ++c) {
        const std::string n = class_name(c);
        push(n + "_precision");
        push(n + "_recall");
        push(n + "_f1");
      }
    }
    csv += std::to_string(k) + "," + std::to_string(runs) + "," + std::to_string(failed);
    const std::size_t ncols = 1 + 3 * static_cast<std::size_t>(C);
    for (std::size_t col = 0; col < ncols; ++col) csv += "," + median_cell(col < columns.size() ? columns[col] : std::vector<double>{});
    csv += "\n";
  }
  write_text(dir / "aggregate.csv", csv);
  m.add_artifact("aggregate", absolute_string(dir / "aggregate.csv"));
  for (const auto& job : jobs) m.add_artifact("run.k" + std::to_string(job.k) + ".seed" + std::to_string(job.seed), absolute_string(job.dir));
  finish_manifest(m, dir);
  std::cout << csv;
  return exit_code;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::optional<std::size_t> trials;
  std::uint64_t seed = 1;
  std::string out;
  bool fault_flip_sign = false;
  bool verbose = false;
};

int cmd_gradcheck(CLI::App* cmd, const GradcheckArgs& a) {
  auto m = begin_manifest(cmd);
  selfcheck::AutodiffSuiteOptions ad;
  ad.seed = a.seed;
  selfcheck::HypergradSuiteOptions hg;
  hg.seed = a.seed + 1;
  hg.fault_flip_decomposed_sign = a.fault_flip_sign;
  if (a.trials) ad.trials = hg.trials = *a.trials;
  if (ad.trials == 0 && hg.trials == 0) std::cerr << "warning: --trials 0, no checks were run (vacuous pass)\n";

  const auto autodiff = selfcheck::run_autodiff_suite(ad);
  const auto hyper = selfcheck::run_hypergrad_suite(hg);

  const auto dir = open_run_directory(a.out, "gradcheck");
  std::string csv = "suite,case,error,tolerance,passed\n";
  auto emit = [&](const char* suite, const selfcheck::SuiteReport& r) {
    for (const auto& c : r.cases) {
      csv += std::string(suite) + ",\"" + c.name + "\"," + format_double(c.error) + "," + format_double(c.tolerance) + "," +
             (c.passed ? "1" : "0") + "\n";
      if (!c.passed || a.verbose)
        std::cout << (c.passed ? "ok    " : "FAIL  ") << suite << ": " << c.name << "  error " << c.error << " (tolerance "
                  << c.tolerance << ")\n";
    }
    std::cout << suite << ": " << r.cases.size() - r.failures() << "/" << r.cases.size() << " passed, worst error "
              << r.worst() << "\n";
  };
  emit("autodiff", autodiff);
  emit("hypergradient", hyper);
  write_text(dir / "gradcheck.csv", csv);
  m.add_artifact("cases", absolute_string(dir / "gradcheck.csv"));
  finish_manifest(m, dir);
  return autodiff.passed() && hyper.passed() ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MOW-Net: meta ordinal weighting for ordinal classification"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::string config_path;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value file; flags given on the command line win");
  };

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic ordinal dataset");
  add_gen_options(gen_cmd, gen);
  add_config(gen_cmd);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train MOW-Net or the CE baseline");
  add_train_options(train_cmd, train_args, true);
  train_cmd->add_option("--out", train_args.out, "Run directory (must be new or empty)");
  add_config(train_cmd);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--dataset", eval_args.dataset, "MOWDS dataset file");
  eval_cmd->add_option("--out", eval_args.out, "Run directory (must be new or empty)");
  add_config(eval_cmd);

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep-k", "Train per (K, seed) and aggregate median metrics per K");
  add_train_options(sweep_cmd, sweep.train, false);
  sweep_cmd->add_option("--k", sweep.ks, "Comma-separated K values");
  sweep_cmd->add_option("--seeds", sweep.seeds, "Seeds per K, counting up from --seed")->check(CLI::Range(1, 100000));
  sweep_cmd->add_option("--jobs", sweep.jobs, "Parallel training threads")->check(CLI::Range(1, 1024));
  sweep_cmd->add_option("--out", sweep.train.out, "Run directory (must be new or empty)");
  add_config(sweep_cmd);

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference and hypergradient self-checks");
  gc_cmd->add_option("--trials", gc.trials, "Random instances per suite (default 200 graphs, 50 bilevel problems)");
  gc_cmd->add_option("--seed", gc.seed, "Seed of the random instances");
  gc_cmd->add_option("--out", gc.out, "Run directory (must be new or empty)");
  gc_cmd->add_flag("--verbose", gc.verbose, "List every case");
  gc_cmd->add_flag("--fault-flip-decomposed-sign", gc.fault_flip_sign)->group("");
  add_config(gc_cmd);

  try {
    app.parse(argc, argv);
    CLI::App* cmd = app.get_subcommands().front();
    if (!config_path.empty()) apply_config_file(cmd, config_path);

    if (cmd == gen_cmd) return cmd_gen_data(cmd, gen);
    if (cmd == train_cmd) return cmd_train(cmd, train_args);
    if (cmd == eval_cmd) return cmd_eval(cmd, eval_args);
    if (cmd == sweep_cmd) return cmd_sweep_k(cmd, sweep);
    return cmd_gradcheck(cmd, gc);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << "\n";
    return kCapacity;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
