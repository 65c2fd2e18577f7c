#pragma once

// Randomized numerical self-checks: reverse-mode gradients of every primitive
// against central differences, and the two hypergradient routes against each
// other and against central differences of the outer objective.

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mownet/data.hpp"
#include "mownet/grad_check.hpp"
#include "mownet/model.hpp"
#include "mownet/mos.hpp"
#include "mownet/trainer.hpp"

namespace mownet::selfcheck {

struct CheckCase {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct SuiteReport {
  std::vector<CheckCase> cases;

  bool passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
  }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [](const auto& c) { return !c.passed; }));
  }
  double worst() const {
    double w = 0.0;
    for (const auto& c : cases) w = std::max(w, c.error);
    return w;
  }
};

inline constexpr const char* kPrimitiveKinds[] = {"matmul", "add",  "mul",  "scale",       "relu",
                                                   "sigmoid", "exp", "transpose", "log_softmax", "mean",
                                                   "mlp"};

namespace detail {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// Entries with magnitude in [0.1, 1], random sign: keeps ReLU inputs off the kink.
inline std::vector<double> off_kink_values(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return v;
}

inline std::size_t dim(std::mt19937_64& rng, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(1, hi)(rng);
}

struct GraphCase {
  std::string name;
  ParamSet params;
  GraphBuilder builder;
};

// Primitive `kind` on random operands, reduced to a scalar through a random
// weighting so that every output entry matters.
inline GraphCase make_graph_case(const std::string& kind, std::mt19937_64& rng, std::size_t max_dim) {
  const std::size_t r = dim(rng, max_dim), c = dim(rng, max_dim), k = dim(rng, max_dim);
  GraphCase gc;
  gc.name = kind;
  auto param = [&](const char* name, std::size_t rows, std::size_t cols, bool off_kink = false) {
    gc.params.insert(name, Tensor::parameter(rows, cols, off_kink ? off_kink_values(rows * cols, rng)
                                                                   : random_values(rows * cols, rng)));
  };
  auto reduce = [](const Tensor& out, const Tensor& weights) { return mean(mul(out, weights), Axis::All); };
  auto weights_for = [&](std::size_t rows, std::size_t cols) {
    return Tensor::constant(rows, cols, random_values(rows * cols, rng, 0.5, 2.0));
  };

  if (kind == "matmul") {
    param("a", r, k);
    param("b", k, c);
    auto w = weights_for(r, c);
    gc.builder = [w, reduce](const ParamSet& p) { return reduce(matmul(p.at("a"), p.at("b")), w); };
  } else if (kind == "add" || kind == "mul") {
    param("a", r, c);
    param("b", r, c);
    auto w = weights_for(r, c);
    const bool is_add = kind == "add";
    // Squaring the result gives the reduction a nonzero second derivative.
    gc.builder = [w, reduce, is_add](const ParamSet& p) {
      auto y = is_add ? add(p.at("a"), p.at("b")) : mul(p.at("a"), p.at("b"));
      return reduce(mul(y, y), w);
    };
  } else if (kind == "scale") {
    param("a", r, c);
    const double s = random_values(1, rng, -3.0, 3.0).front();
    auto w = weights_for(r, c);
    gc.builder = [w, s, reduce](const ParamSet& p) { return reduce(scale(p.at("a"), s), w); };
  } else if (kind == "relu") {
    param("a", r, c, /*off_kink=*/true);
    auto w = weights_for(r, c);
    gc.builder = [w, reduce](const ParamSet& p) {
      auto y = relu(p.at("a"));
      return reduce(mul(y, y), w);
    };
  } else if (kind == "sigmoid" || kind == "exp" || kind == "log_softmax") {
    param("a", r, c);
    auto w = weights_for(r, c);
    gc.builder = [w, reduce, kind](const ParamSet& p) {
      const auto& a = p.at("a");
      auto y = kind == "sigmoid" ? sigmoid(a) : kind == "exp" ? exp(a) : log_softmax(a);
      return reduce(y, w);
    };
  } else if (kind == "transpose") {
    param("a", r, c);
    auto w = weights_for(c, r);
    gc.builder = [w, reduce](const ParamSet& p) { return reduce(transpose(p.at("a")), w); };
  } else if (kind == "mean") {
    param("a", r, c);
    const auto axis = static_cast<Axis>(std::uniform_int_distribution<int>(0, 2)(rng));
    auto probe = mean(Tensor::zeros(r, c), axis);
    auto w = weights_for(probe.rows(), probe.cols());
    gc.builder = [w, reduce, axis](const ParamSet& p) {
      auto y = mean(p.at("a"), axis);
      return reduce(mul(y, y), w);
    };
  } else {
    // Two-layer network with a cross-entropy head.
    const std::size_t h = dim(rng, max_dim), classes = 2 + dim(rng, 3);
    param("w0", k, h);
    param("b0", 1, h);
    param("w1", h, classes);
    param("b1", 1, classes);
    auto x = Tensor::constant(r, k, random_values(r * k, rng, -2.0, 2.0));
    std::vector<int> labels(r);
    for (auto& l : labels) l = std::uniform_int_distribution<int>(0, static_cast<int>(classes) - 1)(rng);
    gc.builder = [x, labels](const ParamSet& p) {
      auto ones = Tensor::ones(x.rows(), 1);
      auto hidden = sigmoid(add(matmul(x, p.at("w0")), matmul(ones, p.at("b0"))));
      auto logits = add(matmul(hidden, p.at("w1")), matmul(ones, p.at("b1")));
      return cross_entropy(log_softmax(logits), labels);
    };
  }
  return gc;
}

// Wraps a builder so that its value is a random projection of its own
// gradient: checking this exercises gradients of backward rules.
inline GraphBuilder second_order(GraphBuilder inner, const ParamSet& shape, std::mt19937_64& rng) {
  std::vector<Tensor> dirs;
  for (const auto& [name, t] : shape) dirs.push_back(Tensor::constant(t.rows(), t.cols(), random_values(t.size(), rng)));
  return [inner, dirs](const ParamSet& p) {
    GradModeGuard on(true);
    auto g = backward(inner(p), p, /*create_graph=*/true);
    Tensor total;
    std::size_t i = 0;
    for (const auto& [name, gt] : g) {
      auto term = sum(mul(gt, dirs[i++]));
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  };
}

}  // namespace detail

struct AutodiffSuiteOptions {
  std::size_t trials = 200;
  std::uint64_t seed = 1;
  std::size_t max_dim = 8;
  double fd_step = 1e-5;
  double tolerance = 1e-6;
  bool include_second_order = true;
};

// Trial t exercises primitive kind t mod (number of kinds); every kind is
// covered once trials reaches the kind count.
inline SuiteReport run_autodiff_suite(const AutodiffSuiteOptions& opts = {}) {
  SuiteReport report;
  std::mt19937_64 rng(opts.seed);
  constexpr std::size_t kinds = std::size(kPrimitiveKinds);
  for (std::size_t t = 0; t < opts.trials; ++t) {
    auto gc = detail::make_graph_case(kPrimitiveKinds[t % kinds], rng, opts.max_dim);
    auto rep = grad_check(gc.builder, gc.params, opts.fd_step, opts.tolerance);
    report.cases.push_back({"trial " + std::to_string(t) + " " + gc.name, rep.max_rel_error(), opts.tolerance, rep.passed()});
    if (opts.include_second_order) {
      auto so = detail::second_order(gc.builder, gc.params, rng);
      auto rep2 = grad_check(so, gc.params, opts.fd_step, opts.tolerance);
      report.cases.push_back(
          {"trial " + std::to_string(t) + " " + gc.name + " (2nd order)", rep2.max_rel_error(), opts.tolerance, rep2.passed()});
    }
  }
  return report;
}

// A small random bilevel problem: dataset, backbone, weight nets, batch and
// meta ordinal sets.
struct BilevelInstance {
  Dataset data;
  DenseBackbone model{BackboneSpec{}};
  WeightNetSpec wspec;
  ParamSet theta;
  ParamSet phi;
  TrainBatch batch;
  MetaBatch meta;
  double alpha = 0.5;
  MceWeighting weighting = MceWeighting::Label;
};

namespace detail {

inline double min_abs(const Tensor& t) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

// Smallest distance of any ReLU pre-activation from its kink: backbone hidden
// layers on every sample at Theta and Theta_hat, weight-net hidden layers on
// their meta-loss inputs.
inline double relu_margin(const BilevelInstance& inst);

}  // namespace detail

inline BilevelInstance draw_bilevel_instance(std::mt19937_64& rng, std::size_t weightnet_hidden,
                                             MceWeighting weighting) {
  BilevelInstance inst;
  inst.weighting = weighting;
  const std::size_t d = detail::dim(rng, 4) + 1;  // 2..5
  const std::size_t h = detail::dim(rng, 4);
  // Backbone parameters d*h + h + 3h + 3 stay at most 50.
  BackboneSpec spec{d, {std::min<std::size_t>(h, 47 / (d + 4))}, 3};
  inst.model = DenseBackbone(spec);
  inst.wspec = {weightnet_hidden, 3};
  inst.theta = init_backbone(spec, rng());
  inst.phi = init_weightnets(inst.wspec, rng());
  // Nonzero output biases so that weights differ from one half.
  {
    auto flat = inst.phi.flatten();
    for (auto& v : flat) v += detail::random_values(1, rng, -0.2, 0.2).front();
    inst.phi = inst.phi.unflatten(flat);
  }
  inst.data.dim = d;
  for (int c = 0; c < 3; ++c) {
    for (int n = 0; n < 4; ++n) {
      OrdinalSample s;
      s.label = c;
      s.score = 2.0 + c;
      s.features = detail::random_values(d, rng, -1.5, 1.5);
      s.features[0] += c - 1.0;
      inst.data.samples.push_back(std::move(s));
    }
  }
  const std::size_t n = detail::dim(rng, 4);
  std::vector<std::size_t> all(inst.data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> idx(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  const auto class_index = inst.data.class_index(3);
  std::vector<MetaOrdinalSet> sets;
  for (auto i : idx) sets.push_back(sample_mos(class_index, i, 1, rng));
  inst.batch = make_train_batch(inst.data, idx);
  inst.meta = make_meta_batch(sets, inst.data);
  inst.alpha = detail::random_values(1, rng, 0.1, 1.0).front();
  return inst;
}

namespace detail {

inline double relu_margin(const BilevelInstance& inst) {
  NoGradGuard no_grad;
  auto vs = virtual_step(inst.model, inst.wspec, inst.theta, inst.phi, inst.batch, inst.meta, inst.alpha, inst.weighting);
  std::vector<std::size_t> all(inst.data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto x = inst.data.features(all);
  double margin = std::numeric_limits<double>::infinity();
  for (const ParamSet* theta : {&inst.theta, static_cast<const ParamSet*>(&vs.theta_hat)}) {
    Tensor h = x;
    for (std::size_t l = 0; l + 1 < inst.model.spec().num_layers(); ++l) {
      auto pre = mownet::detail::affine(h, theta->at(mownet::detail::layer_name(l, "weight")),
                                        theta->at(mownet::detail::layer_name(l, "bias")));
      margin = std::min(margin, min_abs(pre));
      h = relu(pre);
    }
  }
  for (int c = 0; c < inst.wspec.num_classes; ++c) {
    auto pre = mownet::detail::affine(vs.meta_inputs[static_cast<std::size_t>(c)],
                                      inst.phi.at(mownet::detail::vnet_name(c, 0, "weight")),
                                      inst.phi.at(mownet::detail::vnet_name(c, 0, "bias")));
    margin = std::min(margin, min_abs(pre));
  }
  return margin;
}

}  // namespace detail

// Random instance whose ReLU pre-activations all sit at least `kink_margin`
// away from zero, so finite differences of the outer objective do not
// straddle a kink. Rejected draws are replaced by fresh ones.
inline BilevelInstance make_bilevel_instance(std::mt19937_64& rng, std::size_t weightnet_hidden = 8,
                                            MceWeighting weighting = MceWeighting::Label, double kink_margin = 0.05) {
  for (;;) {
    auto inst = draw_bilevel_instance(rng, weightnet_hidden, weighting);
    if (detail::relu_margin(inst) >= kink_margin) return inst;
  }
}

// Outer objective after a freshly executed virtual step at `phi`.
inline double outer_objective(const BilevelInstance& inst, const ParamSet& phi) {
  auto vs = virtual_step(inst.model, inst.wspec, inst.theta, phi, inst.batch, inst.meta, inst.alpha, inst.weighting);
  NoGradGuard no_grad;
  return forward_eval(meta_objective(inst.model, vs.theta_hat, inst.meta));
}

// Richardson-extrapolated central differences, (4 D(h/2) - D(h)) / 3. The
// hypergradient is small next to the objective, so plain central differences
// at a step small enough for low truncation error drown in round-off.
inline std::vector<double> outer_objective_fd(const BilevelInstance& inst, double fd_step) {
  auto flat = inst.phi.flatten();
  std::vector<double> out(flat.size());
  auto central = [&](std::size_t i, double h) {
    const double orig = flat[i];
    flat[i] = orig + h;
    const double up = outer_objective(inst, inst.phi.unflatten(flat));
    flat[i] = orig - h;
    const double down = outer_objective(inst, inst.phi.unflatten(flat));
    flat[i] = orig;
    return (up - down) / (2.0 * h);
  };
  for (std::size_t i = 0; i < flat.size(); ++i) out[i] = (4.0 * central(i, fd_step / 2.0) - central(i, fd_step)) / 3.0;
  return out;
}

struct HypergradSuiteOptions {
  std::size_t trials = 50;
  std::uint64_t seed = 2;
  double fd_step = 1e-3;
  double route_tolerance = 1e-8;
  double fd_tolerance = 1e-5;
  bool fault_flip_decomposed_sign = false;
};

inline SuiteReport run_hypergrad_suite(const HypergradSuiteOptions& opts = {}) {
  SuiteReport report;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t t = 0; t < opts.trials; ++t) {
    // Alternate between the two weightings.
    auto inst = make_bilevel_instance(rng, 8, t % 2 == 0 ? MceWeighting::Label : MceWeighting::AllClasses);
    auto vs = virtual_step(inst.model, inst.wspec, inst.theta, inst.phi, inst.batch, inst.meta, inst.alpha, inst.weighting);
    const auto through = hypergradient_through(inst.model, vs).grad.flatten();
    const auto decomposed = hypergradient_decomposed(inst.model, vs, opts.fault_flip_decomposed_sign).grad.flatten();
    const auto fd = outer_objective_fd(inst, opts.fd_step);

    const std::string tag = "instance " + std::to_string(t) + " (N=" + std::to_string(inst.batch.labels.size()) +
                            ", |theta|=" + std::to_string(inst.theta.numel()) + ")";
    const double routes = norm_relative_error(through, decomposed);
    report.cases.push_back({tag + " through vs decomposed", routes, opts.route_tolerance, routes <= opts.route_tolerance});
    const double e1 = max_relative_error(through, fd);
    report.cases.push_back({tag + " through vs finite differences", e1, opts.fd_tolerance, e1 <= opts.fd_tolerance});
    const double e2 = max_relative_error(decomposed, fd);
    report.cases.push_back({tag + " decomposed vs finite differences", e2, opts.fd_tolerance, e2 <= opts.fd_tolerance});
  }
  return report;
}

}  // namespace mownet::selfcheck
