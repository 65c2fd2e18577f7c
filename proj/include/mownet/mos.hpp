#pragma once

// Meta ordinal sets and the losses built on them.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mownet/data.hpp"
#include "mownet/errors.hpp"
#include "mownet/model.hpp"
#include "mownet/tensor.hpp"

namespace mownet {

using ClassIndex = std::vector<std::vector<std::size_t>>;

// K dataset indices per class, aligned to one training sample.
struct MetaOrdinalSet {
  std::size_t target_index = 0;
  std::vector<std::vector<std::size_t>> per_class_indices;

  std::size_t num_classes() const noexcept { return per_class_indices.size(); }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& v : per_class_indices) n += v.size();
    return n;
  }
  // Class-major flattening: all class-0 members, then class 1, ...
  std::vector<std::size_t> flat() const {
    std::vector<std::size_t> out;
    for (const auto& v : per_class_indices) out.insert(out.end(), v.begin(), v.end());
    return out;
  }
};

// Empty string when the set is well formed, otherwise the first violation.
inline std::string mos_violation(const MetaOrdinalSet& mos, std::span<const int> labels, std::size_t k,
                                 std::span<const std::size_t> excluded = {}) {
  for (std::size_t c = 0; c < mos.per_class_indices.size(); ++c) {
    const auto& members = mos.per_class_indices[c];
    if (members.size() != k) return "class " + std::to_string(c) + " has " + std::to_string(members.size()) + " members";
    for (auto i : members) {
      if (i >= labels.size()) return "index out of range";
      if (labels[i] != static_cast<int>(c)) return "impure member " + std::to_string(i) + " in class " + std::to_string(c);
      if (i == mos.target_index) return "target " + std::to_string(i) + " inside its own set";
      if (std::find(excluded.begin(), excluded.end(), i) != excluded.end()) return "excluded index " + std::to_string(i);
    }
    auto sorted = members;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) return "duplicate member";
  }
  return {};
}

// Uniform sampling without replacement within each class, skipping every
// index in `excluded` (which normally holds just the target).
template <class Rng>
MetaOrdinalSet sample_mos_excluding(const ClassIndex& class_index, std::size_t target_index,
                                    std::span<const std::size_t> excluded, std::size_t k, Rng& rng) {
  if (k == 0) throw ContractError("sample_mos: K must be at least 1");
  MetaOrdinalSet mos;
  mos.target_index = target_index;
  mos.per_class_indices.resize(class_index.size());
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < class_index.size(); ++c) {
    eligible.clear();
    for (auto i : class_index[c]) {
      if (i == target_index || std::find(excluded.begin(), excluded.end(), i) != excluded.end()) continue;
      eligible.push_back(i);
    }
    if (eligible.size() < k) {
      throw CapacityError("class " + std::to_string(c) + " (" + class_name(static_cast<int>(c)) + ") has " +
                              std::to_string(eligible.size()) + " eligible samples, K = " + std::to_string(k) +
                              " required",
                          static_cast<int>(c));
    }
    // Partial Fisher-Yates.
    for (std::size_t j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, eligible.size() - 1);
      std::swap(eligible[j], eligible[pick(rng)]);
    }
    mos.per_class_indices[c].assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return mos;
}

template <class Rng>
MetaOrdinalSet sample_mos(const ClassIndex& class_index, std::size_t target_index, std::size_t k, Rng& rng) {
  return sample_mos_excluding(class_index, target_index, {}, k, rng);
}

// Smallest class size must leave K samples once a target is removed.
inline void check_mos_capacity(const ClassIndex& class_index, std::size_t k) {
  for (std::size_t c = 0; c < class_index.size(); ++c) {
    if (class_index[c].size() < k + 1) {
      throw CapacityError("class " + std::to_string(c) + " (" + class_name(static_cast<int>(c)) + ") has " +
                              std::to_string(class_index[c].size()) + " samples; K = " + std::to_string(k) +
                              " needs at least " + std::to_string(k + 1),
                          static_cast<int>(c));
    }
  }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor one_hot(std::span<const int> labels, int num_classes) {
  const auto C = static_cast<std::size_t>(num_classes);
  std::vector<double> v(labels.size() * C, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ContractError("one_hot: label out of range");
    v[i * C + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::constant(labels.size(), C, std::move(v));
}

inline void require_finite(const Tensor& t, const char* where) {
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericError(std::string(where) + ": non-finite value at (" + std::to_string(i / t.cols()) + ", " +
                         std::to_string(i % t.cols()) + ")");
    }
  }
}

namespace detail {

// (n x C) -> (n x 1). Summing against a ones column keeps one-hot rows exact.
inline Tensor row_sums(const Tensor& a) { return matmul(a, Tensor::ones(a.cols(), 1)); }

}  // namespace detail

// Batch mean of -sum_c w_c log p_c. Both inputs are (n x C).
inline Tensor mce_loss(const Tensor& log_probs, const Tensor& omega) {
  detail::require_same_shape(log_probs, omega, "mce_loss");
  require_finite(log_probs, "mce_loss log_probs");
  require_finite(omega, "mce_loss omega");
  return scale(mean(detail::row_sums(mul(omega, log_probs)), Axis::All), -1.0);
}

inline Tensor mce_loss(const Prediction& p, const WeightVector& w) { return mce_loss(p.log_probs, w.weights); }

// Per-row cross-entropy against integer labels, as an (n x 1) column.
inline Tensor per_sample_ce(const Tensor& log_probs, std::span<const int> labels) {
  if (labels.size() != log_probs.rows()) throw ShapeError("per_sample_ce: label count does not match rows");
  auto y = one_hot(labels, static_cast<int>(log_probs.cols()));
  return scale(detail::row_sums(mul(y, log_probs)), -1.0);
}

inline Tensor cross_entropy(const Tensor& log_probs, std::span<const int> labels) {
  return mean(per_sample_ce(log_probs, labels), Axis::All);
}

// Meta samples of a batch of sets, forwarded as one stacked matrix.
struct MetaBatch {
  Tensor features;                 // (n*M x d), set-major then class-major
  std::vector<int> labels;         // n*M
  std::vector<Tensor> class_means; // per class: (n x n*M) averaging operator
  std::size_t num_sets = 0;
};

inline MetaBatch make_meta_batch(std::span<const MetaOrdinalSet> sets, const Dataset& ds) {
  if (sets.empty()) throw ContractError("make_meta_batch: no sets");
  const std::size_t C = sets.front().num_classes();
  const std::size_t M = sets.front().size();
  const std::size_t n = sets.size();
  MetaBatch mb;
  mb.num_sets = n;
  std::vector<std::size_t> rows;
  std::vector<std::vector<double>> avg(C, std::vector<double>(n * n * M, 0.0));
  for (std::size_t s = 0; s < n; ++s) {
    if (sets[s].num_classes() != C || sets[s].size() != M) throw ContractError("make_meta_batch: ragged sets");
    for (std::size_t c = 0; c < C; ++c) {
      const auto& members = sets[s].per_class_indices[c];
      for (auto i : members) {
        avg[c][s * n * M + rows.size()] = 1.0 / static_cast<double>(members.size());
        rows.push_back(i);
      }
    }
  }
  mb.features = ds.features(rows);
  mb.labels = ds.labels_at(rows);
  for (std::size_t c = 0; c < C; ++c) mb.class_means.push_back(Tensor::constant(n, n * M, std::move(avg[c])));
  return mb;
}

// For each class c an (n x 1) column: the mean CE of the set's class-c members.
template <Backbone M>
std::vector<Tensor> meta_class_losses(const M& model, const ParamSet& theta, const MetaBatch& mb) {
  auto ce = per_sample_ce(model.log_probs(theta, mb.features), mb.labels);
  std::vector<Tensor> out;
  for (const auto& avg : mb.class_means) out.push_back(matmul(avg, ce));
  return out;
}

// Single-set form: C scalars.
struct PerClassLossVector {
  std::vector<Tensor> values;
};

template <Backbone M>
PerClassLossVector meta_class_losses(const M& model, const ParamSet& theta, const MetaOrdinalSet& mos,
                                     const Dataset& ds) {
  auto mb = make_meta_batch(std::span<const MetaOrdinalSet>(&mos, 1), ds);
  return {meta_class_losses(model, theta, mb)};
}

}  // namespace mownet
