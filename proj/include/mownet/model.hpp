#pragma once

// Backbone classifier (parameters Theta) and the per-class weight networks
// V_c (parameters Phi). Phi is only consulted during training.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mownet/errors.hpp"
#include "mownet/param_set.hpp"
#include "mownet/tensor.hpp"

namespace mownet {

struct BackboneSpec {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden_dims{32};
  int num_classes = 3;

  void validate() const {
    if (input_dim == 0) throw ContractError("BackboneSpec: input_dim must be positive");
    for (auto h : hidden_dims)
      if (h == 0) throw ContractError("BackboneSpec: zero-width hidden layer");
    if (num_classes < 2) throw ContractError("BackboneSpec: need at least 2 classes");
  }
  std::size_t num_layers() const { return hidden_dims.size() + 1; }
};

struct WeightNetSpec {
  std::size_t hidden_dim = 100;
  int num_classes = 3;

  void validate() const {
    if (hidden_dim == 0) throw ContractError("WeightNetSpec: hidden_dim must be positive");
    if (num_classes < 2) throw ContractError("WeightNetSpec: need at least 2 classes");
  }
};

// Rows are samples. log_probs is (n x C); embedding is the last hidden
// activation (the input itself when there are no hidden layers).
struct Prediction {
  Tensor log_probs;
  Tensor embedding;
};

// (n x C) class weights, each strictly inside (0, 1).
struct WeightVector {
  Tensor weights;
};

template <class M>
concept Backbone = requires(const M& m, const ParamSet& p, const Tensor& x) {
  { m.log_probs(p, x) } -> std::convertible_to<Tensor>;
  { m.num_classes() } -> std::convertible_to<int>;
};

namespace detail {

inline Tensor uniform_fan_in(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = dist(rng);
  return Tensor::parameter(fan_in, fan_out, std::move(w));
}

// X W + 1 b, with the bias broadcast through a ones column so that only
// matmul and add are involved.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), matmul(Tensor::ones(x.rows(), 1), b));
}

inline std::string layer_name(std::size_t i, const char* what) {
  return "fc" + std::to_string(i) + "." + what;
}

inline std::string vnet_name(int c, std::size_t layer, const char* what) {
  return "v" + std::to_string(c) + ".fc" + std::to_string(layer) + "." + what;
}

}  // namespace detail

inline std::size_t backbone_param_count(const BackboneSpec& spec) {
  std::size_t n = 0, in = spec.input_dim;
  for (auto h : spec.hidden_dims) {
    n += in * h + h;
    in = h;
  }
  return n + in * static_cast<std::size_t>(spec.num_classes) + static_cast<std::size_t>(spec.num_classes);
}

inline ParamSet init_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ParamSet theta;
  std::size_t in = spec.input_dim;
  std::vector<std::size_t> widths = spec.hidden_dims;
  widths.push_back(static_cast<std::size_t>(spec.num_classes));
  for (std::size_t i = 0; i < widths.size(); ++i) {
    theta.insert(detail::layer_name(i, "weight"), detail::uniform_fan_in(in, widths[i], rng));
    theta.insert(detail::layer_name(i, "bias"), Tensor::parameter(1, widths[i], std::vector<double>(widths[i], 0.0)));
    in = widths[i];
  }
  return theta;
}

// Recovers the layer layout from parameter shapes (used for checkpoints).
inline BackboneSpec infer_backbone_spec(const ParamSet& theta) {
  BackboneSpec spec;
  spec.hidden_dims.clear();
  std::size_t layers = 0;
  while (theta.contains(detail::layer_name(layers, "weight"))) ++layers;
  if (layers == 0) throw ContractError("infer_backbone_spec: no backbone layers found");
  spec.input_dim = theta.at(detail::layer_name(0, "weight")).rows();
  for (std::size_t i = 0; i + 1 < layers; ++i) spec.hidden_dims.push_back(theta.at(detail::layer_name(i, "weight")).cols());
  spec.num_classes = static_cast<int>(theta.at(detail::layer_name(layers - 1, "weight")).cols());
  spec.validate();
  return spec;
}

// Dense ReLU network ending in a row-wise log-softmax.
class DenseBackbone {
 public:
  explicit DenseBackbone(BackboneSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const BackboneSpec& spec() const noexcept { return spec_; }
  int num_classes() const noexcept { return spec_.num_classes; }

  Prediction forward(const ParamSet& theta, const Tensor& x) const {
    if (x.cols() != spec_.input_dim) {
      throw ContractError("forward_backbone: input width " + std::to_string(x.cols()) + " != input_dim " +
                          std::to_string(spec_.input_dim));
    }
    Tensor h = x;
    const std::size_t layers = spec_.num_layers();
    for (std::size_t i = 0; i + 1 < layers; ++i) {
      h = relu(detail::affine(h, theta.at(detail::layer_name(i, "weight")), theta.at(detail::layer_name(i, "bias"))));
    }
    auto logits =
        detail::affine(h, theta.at(detail::layer_name(layers - 1, "weight")), theta.at(detail::layer_name(layers - 1, "bias")));
    return {log_softmax(logits), h};
  }

  Tensor log_probs(const ParamSet& theta, const Tensor& x) const { return forward(theta, x).log_probs; }

 private:
  BackboneSpec spec_;
};

inline Prediction forward_backbone(const ParamSet& theta, const BackboneSpec& spec, std::span<const double> x) {
  return DenseBackbone(spec).forward(theta, Tensor::row(x));
}

// Column index of the largest entry in row r; ties go to the lowest index.
inline int argmax_row(const Tensor& t, std::size_t r) {
  int best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (t(r, c) > t(r, static_cast<std::size_t>(best))) best = static_cast<int>(c);
  return best;
}

inline std::vector<int> predict_classes(const ParamSet& theta, const BackboneSpec& spec, const Tensor& x) {
  NoGradGuard no_grad;
  auto lp = DenseBackbone(spec).log_probs(theta, x);
  std::vector<int> out(lp.rows());
  for (std::size_t r = 0; r < lp.rows(); ++r) out[r] = argmax_row(lp, r);
  return out;
}

inline int predict_class(const ParamSet& theta, const BackboneSpec& spec, std::span<const double> x) {
  return predict_classes(theta, spec, Tensor::row(x)).front();
}

// Each V_c: 1 -> hidden (ReLU) -> 1 (sigmoid). With zero_final the output
// layer starts at zero, so every weight starts at exactly 0.5.
inline ParamSet init_weightnets(const WeightNetSpec& spec, std::uint64_t seed, bool zero_final = false) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const auto h = spec.hidden_dim;
  ParamSet phi;
  for (int c = 0; c < spec.num_classes; ++c) {
    phi.insert(detail::vnet_name(c, 0, "weight"), detail::uniform_fan_in(1, h, rng));
    phi.insert(detail::vnet_name(c, 0, "bias"), Tensor::parameter(1, h, std::vector<double>(h, 0.0)));
    auto out_w = detail::uniform_fan_in(h, 1, rng);
    if (zero_final) out_w = Tensor::parameter(h, 1, std::vector<double>(h, 0.0));
    phi.insert(detail::vnet_name(c, 1, "weight"), out_w);
    phi.insert(detail::vnet_name(c, 1, "bias"), Tensor::parameter(1, 1, {0.0}));
  }
  return phi;
}

// Routes input column c (an n x 1 tensor) through V_c only, and assembles
// the n x C weight matrix.
inline WeightVector forward_weightnets(const ParamSet& phi, const WeightNetSpec& spec,
                                       std::span<const Tensor> per_class_inputs) {
  if (per_class_inputs.size() != static_cast<std::size_t>(spec.num_classes)) {
    throw ContractError("forward_weightnets: expected " + std::to_string(spec.num_classes) + " inputs, got " +
                        std::to_string(per_class_inputs.size()));
  }
  const std::size_t n = per_class_inputs.front().rows();
  const auto C = static_cast<std::size_t>(spec.num_classes);
  Tensor weights;
  for (int c = 0; c < spec.num_classes; ++c) {
    const auto& in = per_class_inputs[static_cast<std::size_t>(c)];
    if (in.cols() != 1 || in.rows() != n) throw ShapeError("forward_weightnets: inputs must be n x 1 columns");
    auto hidden = relu(detail::affine(in, phi.at(detail::vnet_name(c, 0, "weight")), phi.at(detail::vnet_name(c, 0, "bias"))));
    auto w = sigmoid(detail::affine(hidden, phi.at(detail::vnet_name(c, 1, "weight")), phi.at(detail::vnet_name(c, 1, "bias"))));
    std::vector<double> unit(C, 0.0);
    unit[static_cast<std::size_t>(c)] = 1.0;
    auto placed = matmul(w, Tensor::constant(1, C, std::move(unit)));
    weights = weights.defined() ? add(weights, placed) : placed;
  }
  return {weights};
}

// Same input column fed to every V_c.
inline WeightVector forward_weightnets_shared(const ParamSet& phi, const WeightNetSpec& spec, const Tensor& input) {
  std::vector<Tensor> inputs(static_cast<std::size_t>(spec.num_classes), input);
  return forward_weightnets(phi, spec, inputs);
}

}  // namespace mownet
