#pragma once

// Synthetic ordinal data: a latent malignancy score on the 1..5 rating scale,
// binned into benign / unsure / malignant, with features laid out along one
// random direction so that class geometry is ordinal.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mownet/binary_io.hpp"
#include "mownet/errors.hpp"
#include "mownet/tensor.hpp"

namespace mownet {

enum class OrdinalClass : int { Benign = 0, Unsure = 1, Malignant = 2 };

inline constexpr int kNumOrdinalClasses = 3;

inline const char* class_name(int c) {
  switch (c) {
    case 0: return "benign";
    case 1: return "unsure";
    case 2: return "malignant";
    default: return "class";
  }
}

inline constexpr double kUnsureLow = 2.5;
inline constexpr double kUnsureHigh = 3.5;

// Benign below 2.5, malignant above 3.5, unsure on the closed interval between.
inline int bin_score(double score) {
  if (!(score >= 1.0 && score <= 5.0)) {
    throw ContractError("bin_score: score " + std::to_string(score) + " outside [1, 5]");
  }
  if (score < kUnsureLow) return static_cast<int>(OrdinalClass::Benign);
  if (score > kUnsureHigh) return static_cast<int>(OrdinalClass::Malignant);
  return static_cast<int>(OrdinalClass::Unsure);
}

struct OrdinalSample {
  std::vector<double> features;
  double score = 3.0;
  int label = 1;

  bool operator==(const OrdinalSample&) const = default;
};

struct Dataset {
  std::size_t dim = 0;
  std::vector<OrdinalSample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  bool operator==(const Dataset&) const = default;

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }

  // Dataset indices grouped by label.
  std::vector<std::vector<std::size_t>> class_index(int num_classes) const {
    std::vector<std::vector<std::size_t>> idx(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const int c = samples[i].label;
      if (c < 0 || c >= num_classes) throw ContractError("sample " + std::to_string(i) + " has label out of range");
      idx[static_cast<std::size_t>(c)].push_back(i);
    }
    return idx;
  }

  // Feature rows for `indices`, stacked into an (n x dim) constant.
  Tensor features(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ContractError("features: empty index list");
    std::vector<double> x;
    x.reserve(indices.size() * dim);
    for (auto i : indices) {
      if (i >= samples.size()) throw ContractError("features: index " + std::to_string(i) + " out of range");
      x.insert(x.end(), samples[i].features.begin(), samples[i].features.end());
    }
    return Tensor::constant(indices.size(), dim, std::move(x));
  }

  std::vector<int> labels_at(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    for (auto i : indices) out.push_back(samples.at(i).label);
    return out;
  }
};

struct SynthConfig {
  std::size_t dim = 16;
  std::array<std::size_t, 3> n_per_class{500, 500, 500};
  std::array<double, 3> centers{2.0, 3.0, 4.0};
  double score_noise = 0.35;
  double feature_noise = 1.0;
  // Multiplies the score noise of the unsure class: values above 1 push more
  // unsure draws across both boundaries.
  double overlap = 1.0;
  // Length of the generating direction; feature displacement per score unit.
  double signal = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim == 0) throw ContractError("SynthConfig: dim must be positive");
    if (!(score_noise > 0.0)) throw ContractError("SynthConfig: score noise must be positive");
    if (!(feature_noise > 0.0)) throw ContractError("SynthConfig: feature noise must be positive");
    if (!(overlap > 0.0)) throw ContractError("SynthConfig: overlap must be positive");
    if (!(centers[0] < centers[1] && centers[1] < centers[2]))
      throw ContractError("SynthConfig: class centers must be strictly increasing");
  }
};

// Unit vector the generator lays scores along, scaled by `signal`.
inline std::vector<double> generating_direction(const SynthConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> dir(cfg.dim);
  double norm = 0.0;
  do {
    for (auto& v : dir) v = normal(rng);
    norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
  } while (norm == 0.0);
  for (auto& v : dir) v *= cfg.signal / norm;
  return dir;
}

inline Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const auto dir = generating_direction(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.dim = cfg.dim;
  for (int c = 0; c < 3; ++c) {
    const double sigma = cfg.score_noise * (c == 1 ? cfg.overlap : 1.0);
    for (std::size_t n = 0; n < cfg.n_per_class[static_cast<std::size_t>(c)]; ++n) {
      OrdinalSample s;
      s.score = std::clamp(cfg.centers[static_cast<std::size_t>(c)] + sigma * normal(rng), 1.0, 5.0);
      s.label = bin_score(s.score);
      s.features.resize(cfg.dim);
      for (std::size_t j = 0; j < cfg.dim; ++j)
        s.features[j] = dir[j] * (s.score - 3.0) + cfg.feature_noise * normal(rng);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

// Per-class split: the first `train_fraction` of each shuffled class goes to
// the training side.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ContractError("split_dataset: bad train fraction");
  int num_classes = 0;
  for (const auto& s : ds.samples) num_classes = std::max(num_classes, s.label + 1);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto idx : ds.class_index(num_classes)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  Dataset train{ds.dim, {}}, test{ds.dim, {}};
  for (auto i : train_idx) train.samples.push_back(ds.samples[i]);
  for (auto i : test_idx) test.samples.push_back(ds.samples[i]);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// MOWDS file format: "MOWDS" + version byte + '\n', u32 count, u32 dim, then
// per sample dim f64 features, f64 score, u8 label. Little-endian throughout.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetVersion = '1';

inline std::vector<char> encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.bytes("MOWDS");
  w.u8(static_cast<std::uint8_t>(kDatasetVersion));
  w.u8('\n');
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.dim));
  for (const auto& s : ds.samples) {
    if (s.features.size() != ds.dim) throw ContractError("encode_dataset: sample feature length mismatch");
    for (double v : s.features) w.f64(v);
    w.f64(s.score);
    w.u8(static_cast<std::uint8_t>(s.label));
  }
  return w.buffer();
}

inline Dataset decode_dataset(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.bytes(5, "magic") != "MOWDS") throw FormatError("bad dataset magic", 0);
  const auto version = r.u8("version");
  if (version != static_cast<std::uint8_t>(kDatasetVersion)) {
    throw FormatError("unsupported dataset version '" + std::string(1, static_cast<char>(version)) + "'", 5);
  }
  if (r.u8("magic terminator") != '\n') throw FormatError("bad dataset magic", 6);
  Dataset ds;
  const auto count = r.u32("sample count");
  ds.dim = r.u32("feature dim");
  if (count > 0 && ds.dim == 0) throw FormatError("zero feature dimension", r.offset());
  // Reject counts the remaining bytes cannot hold before allocating for them.
  const std::size_t per_sample = ds.dim * 8 + 9;
  if (r.remaining() / per_sample < count) throw FormatError("truncated dataset body", r.offset());
  ds.samples.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    OrdinalSample s;
    s.features.resize(ds.dim);
    for (auto& v : s.features) v = r.f64("features");
    const auto score_at = r.offset();
    s.score = r.f64("score");
    s.label = r.u8("label");
    if (!(s.score >= 1.0 && s.score <= 5.0) || bin_score(s.score) != s.label) {
      throw FormatError("label does not match binned score", score_at);
    }
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after dataset", r.offset());
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { io::write_file(path, encode_dataset(ds)); }

inline Dataset load_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

}  // namespace mownet
