#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mownet/data.hpp"
#include "mownet/errors.hpp"
#include "mownet/model.hpp"
#include "mownet/trainer.hpp"

namespace mownet {

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kUndefined = "undefined";

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 3)
      : c_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
    if (num_classes < 1) throw ContractError("ConfusionMatrix: need at least one class");
  }

  static ConfusionMatrix from_counts(const std::vector<std::vector<long>>& rows) {
    ConfusionMatrix m(static_cast<int>(rows.size()));
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != rows.size()) throw ContractError("ConfusionMatrix: counts must be square");
      for (std::size_t p = 0; p < rows.size(); ++p) {
        if (rows[t][p] < 0) throw ContractError("ConfusionMatrix: negative count");
        m.counts_[t * rows.size() + p] = rows[t][p];
      }
    }
    return m;
  }

  void add(int truth, int predicted) {
    if (truth < 0 || truth >= c_ || predicted < 0 || predicted >= c_) throw ContractError("ConfusionMatrix: class out of range");
    ++counts_[static_cast<std::size_t>(truth * c_ + predicted)];
  }

  int num_classes() const noexcept { return c_; }
  long count(int truth, int predicted) const { return counts_.at(static_cast<std::size_t>(truth * c_ + predicted)); }
  long total() const {
    long n = 0;
    for (auto v : counts_) n += v;
    return n;
  }
  long correct() const {
    long n = 0;
    for (int c = 0; c < c_; ++c) n += count(c, c);
    return n;
  }
  long support(int truth) const {
    long n = 0;
    for (int p = 0; p < c_; ++p) n += count(truth, p);
    return n;
  }
  long predicted(int cls) const {
    long n = 0;
    for (int t = 0; t < c_; ++t) n += count(t, cls);
    return n;
  }
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int c_;
  std::vector<long> counts_;
};

// nullopt marks a metric whose denominator is zero.
struct ClassMetrics {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  long support = 0;
  bool operator==(const ClassMetrics&) const = default;
};

struct ClassReport {
  double accuracy = 0.0;
  std::vector<ClassMetrics> classes;
  bool operator==(const ClassReport&) const = default;

  // Mean over classes where the metric is defined; nullopt if none is.
  std::optional<double> macro(std::optional<double> ClassMetrics::*field) const {
    double s = 0.0;
    int n = 0;
    for (const auto& c : classes) {
      if (c.*field) {
        s += *(c.*field);
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return s / n;
  }
};

inline ClassReport make_report(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("make_report: empty confusion matrix");
  ClassReport r;
  r.accuracy = static_cast<double>(cm.correct()) / static_cast<double>(cm.total());
  for (int c = 0; c < cm.num_classes(); ++c) {
    ClassMetrics m;
    const double tp = static_cast<double>(cm.count(c, c));
    m.support = cm.support(c);
    if (cm.predicted(c) > 0) m.precision = tp / static_cast<double>(cm.predicted(c));
    if (m.support > 0) m.recall = tp / static_cast<double>(m.support);
    if (m.precision && m.recall) {
      const double s = *m.precision + *m.recall;
      m.f1 = s > 0.0 ? 2.0 * *m.precision * *m.recall / s : 0.0;
    }
    r.classes.push_back(m);
  }
  return r;
}

struct Evaluation {
  ConfusionMatrix confusion;
  ClassReport report;
  std::vector<std::vector<double>> embeddings;
  std::vector<int> labels;
  std::vector<int> predictions;
};

// Predictions use Theta only.
inline Evaluation evaluate(const ParamSet& theta, const Dataset& ds) {
  if (ds.empty()) throw ContractError("evaluate: empty dataset");
  const auto spec = infer_backbone_spec(theta);
  NoGradGuard no_grad;
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto pred = DenseBackbone(spec).forward(theta, ds.features(all));

  Evaluation ev{ConfusionMatrix(spec.num_classes), {}, {}, ds.labels(), {}};
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const int p = argmax_row(pred.log_probs, r);
    ev.predictions.push_back(p);
    ev.confusion.add(ev.labels[r], p);
    const auto w = pred.embedding.cols();
    auto d = pred.embedding.data().subspan(r * w, w);
    ev.embeddings.emplace_back(d.begin(), d.end());
  }
  ev.report = make_report(ev.confusion);
  return ev;
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline std::string report_csv_header(int num_classes) {
  std::string h = "accuracy";
  for (int c = 0; c < num_classes; ++c) {
    const std::string n = class_name(c);
    h += "," + n + "_precision," + n + "_recall," + n + "_f1";
  }
  return h;
}

inline std::string report_csv_row(const ClassReport& r) {
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(kUndefined); };
  std::string row = format_double(r.accuracy);
  for (const auto& c : r.classes) row += "," + cell(c.precision) + "," + cell(c.recall) + "," + cell(c.f1);
  return row;
}

inline std::string report_csv(const ClassReport& r) {
  return report_csv_header(static_cast<int>(r.classes.size())) + "\n" + report_csv_row(r) + "\n";
}

// Values of one report row, keyed by column name; undefined cells are nullopt.
inline std::map<std::string, std::optional<double>> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row)) throw FormatError("report CSV needs header and row", 0);
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  auto keys = split(header);
  auto vals = split(row);
  if (keys.size() != vals.size()) throw FormatError("report CSV column count mismatch", header.size() + 1);
  std::map<std::string, std::optional<double>> out;
  for (std::size_t i = 0; i < keys.size(); ++i)
    out[keys[i]] = vals[i] == kUndefined ? std::nullopt : std::optional<double>(std::stod(vals[i]));
  return out;
}

// Table layout: accuracy, then precision / recall / F1 for each class.
inline std::string format_report_table(const ClassReport& r, const std::string& method = "model") {
  auto cell = [](const std::optional<double>& v) {
    char buf[16];
    if (!v) return std::string("   n/a");
    std::snprintf(buf, sizeof buf, "%6.3f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "Method      | Accuracy |";
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, " %-20s |", class_name(static_cast<int>(c)));
    out << buf;
  }
  out << "\n            |          |";
  for (std::size_t c = 0; c < r.classes.size(); ++c) out << "      P      R     F1 |";
  char head[40];
  std::snprintf(head, sizeof head, "\n%-11.11s |   %6.3f |", method.c_str(), r.accuracy);
  out << head;
  for (const auto& c : r.classes) out << " " << cell(c.precision) << " " << cell(c.recall) << " " << cell(c.f1) << " |";
  out << "\n(n/a: undefined, zero denominator)\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Traces and weight trajectories
// ---------------------------------------------------------------------------

inline std::string trace_csv_header(int num_classes) {
  std::string h = "iter,epoch";
  for (int c = 0; c < num_classes; ++c) h += ",omega_tr_c" + std::to_string(c);
  for (int c = 0; c < num_classes; ++c) h += ",omega_meta_c" + std::to_string(c);
  return h + ",mce,meta_loss,hypergrad_norm";
}

inline void write_trace_csv(const std::string& path, const std::vector<StepTrace>& trace, int num_classes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace '" + path + "'");
  out << trace_csv_header(num_classes) << "\n";
  for (const auto& t : trace) {
    out << t.iter << "," << t.epoch;
    for (double v : t.omega_tr) out << "," << format_double(v);
    for (double v : t.omega_meta) out << "," << format_double(v);
    out << "," << format_double(t.mce) << "," << format_double(t.meta_loss) << "," << format_double(t.hypergrad_norm)
        << "\n";
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

// Per-iteration alignment diagnostic, kept beside the trace.
inline void write_alignment_csv(const std::string& path, const std::vector<StepTrace>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "iter,epoch,alignment\n";
  for (const auto& t : trace) out << t.iter << "," << t.epoch << "," << format_double(t.alignment) << "\n";
}

inline void write_ce_trace_csv(const std::string& path, const std::vector<CeStepTrace>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace '" + path + "'");
  out << "iter,epoch,ce_loss\n";
  for (const auto& t : trace) out << t.iter << "," << t.epoch << "," << format_double(t.loss) << "\n";
  if (!out) throw IoError("write to '" + path + "' failed");
}

struct TrajectoryPoint {
  int epoch = 0;  // first epoch of the window
  std::vector<double> omega;
};

// Mean training weight per class over each window of `window` epochs.
inline std::vector<TrajectoryPoint> summarize_weight_trajectory(const std::vector<StepTrace>& trace, int window = 1) {
  if (trace.empty()) throw ContractError("summarize_weight_trajectory: empty trace");
  if (window < 1) throw ContractError("summarize_weight_trajectory: window must be positive");
  std::vector<TrajectoryPoint> out;
  std::vector<long> counts;
  for (const auto& t : trace) {
    const int start = (t.epoch / window) * window;
    if (out.empty() || out.back().epoch != start) {
      out.push_back({start, std::vector<double>(t.omega_tr.size(), 0.0)});
      counts.push_back(0);
    }
    for (std::size_t c = 0; c < t.omega_tr.size(); ++c) out.back().omega[c] += t.omega_tr[c];
    ++counts.back();
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    for (auto& v : out[i].omega) v /= static_cast<double>(counts[i]);
  return out;
}

inline void write_trajectory_csv(const std::string& path, const std::vector<TrajectoryPoint>& points, int num_classes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "epoch";
  const auto C = static_cast<std::size_t>(num_classes);
  for (std::size_t c = 0; c < C; ++c) out << ",omega_c" << c;
  out << "\n";
  for (const auto& p : points) {
    if (p.omega.size() != C) throw ContractError("write_trajectory_csv: class count mismatch");
    out << p.epoch;
    for (double v : p.omega) out << "," << format_double(v);
    out << "\n";
  }
}

// CSV with header dim_0..dim_{h-1},label, rows in dataset order.
inline void dump_embeddings(const std::vector<std::vector<double>>& embeddings, const std::vector<int>& labels,
                            const std::string& path, std::size_t width = 0) {
  if (embeddings.size() != labels.size()) throw ContractError("dump_embeddings: embedding and label counts differ");
  if (!embeddings.empty()) width = embeddings.front().size();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write embeddings '" + path + "'");
  for (std::size_t j = 0; j < width; ++j) out << "dim_" << j << ",";
  out << "label\n";
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != width) throw ContractError("dump_embeddings: ragged embeddings");
    for (double v : embeddings[i]) out << format_double(v) << ",";
    out << labels[i] << "\n";
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace mownet
