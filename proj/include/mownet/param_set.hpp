#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "mownet/errors.hpp"
#include "mownet/tensor.hpp"

namespace mownet {

// Insertion-ordered map from unique names to tensors.
template <class Tag>
class NamedTensors {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void insert(std::string name, Tensor t) {
    if (!t.defined()) throw ContractError("tensor '" + name + "' is undefined");
    if (contains(name)) throw ContractError("duplicate tensor name '" + name + "'");
    if constexpr (Tag::requires_grad) {
      if (!t.requires_grad()) throw ContractError("parameter '" + name + "' must require grad");
    }
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.first == name; });
  }

  const Tensor& at(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    throw ContractError("no tensor named '" + std::string(name) + "'");
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  // Total number of scalar entries.
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(numel());
    for (const auto& e : entries_) flat.insert(flat.end(), e.second.data().begin(), e.second.data().end());
    return flat;
  }

  // Fresh leaf tensors with this layout holding `flat`.
  NamedTensors unflatten(std::span<const double> flat) const {
    if (flat.size() != numel()) {
      throw ContractError("unflatten: expected " + std::to_string(numel()) + " values, got " +
                          std::to_string(flat.size()));
    }
    NamedTensors out;
    std::size_t off = 0;
    for (const auto& [name, t] : entries_) {
      std::vector<double> values(flat.begin() + off, flat.begin() + off + t.size());
      off += t.size();
      if constexpr (Tag::requires_grad) {
        out.insert(name, Tensor::parameter(t.rows(), t.cols(), std::move(values)));
      } else {
        out.insert(name, Tensor::constant(t.rows(), t.cols(), std::move(values)));
      }
    }
    return out;
  }

  // Same values as fresh leaves, cut from any graph.
  NamedTensors detached() const { return unflatten(flatten()); }

  bool same_keys(const auto& other) const {
    if (size() != other.size()) return false;
    auto it = other.begin();
    for (const auto& e : entries_) {
      if (e.first != it->first || e.second.rows() != it->second.rows() || e.second.cols() != it->second.cols())
        return false;
      ++it;
    }
    return true;
  }

  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [name, t] : entries_) {
      mix(name.data(), name.size());
      const std::uint64_t dims[2] = {t.rows(), t.cols()};
      mix(dims, sizeof dims);
      mix(t.data().data(), t.size() * sizeof(double));
    }
    return h;
  }

 private:
  std::vector<Entry> entries_;
};

struct ParamTag {
  static constexpr bool requires_grad = true;
};
struct GradTag {
  static constexpr bool requires_grad = false;
};

using ParamSet = NamedTensors<ParamTag>;
using GradMap = NamedTensors<GradTag>;

// Parameters as fresh leaves from named value arrays (row-major).
inline ParamSet make_params(std::initializer_list<std::tuple<std::string, std::size_t, std::size_t, std::vector<double>>> spec) {
  ParamSet p;
  for (const auto& [name, r, c, v] : spec) p.insert(name, Tensor::parameter(r, c, v));
  return p;
}

inline GradMap backward(const Tensor& root, const ParamSet& wrt, bool create_graph = false) {
  auto ts = wrt.tensors();
  auto gs = grad(root, ts, create_graph);
  GradMap out;
  std::size_t i = 0;
  for (const auto& [name, t] : wrt) out.insert(name, gs[i++]);
  return out;
}

inline double squared_norm(const GradMap& g) {
  double s = 0.0;
  for (const auto& [name, t] : g)
    for (double v : t.data()) s += v * v;
  return s;
}

// Name of the first entry holding a non-finite value, or empty.
template <class Tag>
std::string first_non_finite(const NamedTensors<Tag>& m) {
  for (const auto& [name, t] : m)
    if (!all_finite(t)) return name;
  return {};
}

}  // namespace mownet
