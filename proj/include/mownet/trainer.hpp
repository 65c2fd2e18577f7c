#pragma once

// Bilevel meta training. One iteration on a mini-batch:
//
//   1. virtual step   Theta_hat = Theta - (alpha/N) sum_i sum_c w_ic grad(-log p_ic),
//                     w_ic = V_c(mean meta CE of class c in sample i's set).
//                     The dependence of Theta_hat on Phi is kept in the graph.
//   2. Phi update     Phi' = Phi - beta * dF/dPhi, F = mean meta CE at Theta_hat.
//   3. Theta update   Theta' = step(Theta, grad MCE(Theta; Phi')), where every
//                     V_c reads the training sample's own CE.
//
// The hypergradient dF/dPhi is available two ways: by differentiating through
// the recorded virtual step, or from the product form
//   dF/dPhi = (alpha/N) sum_ic <grad F(Theta_hat), grad log p_ic(Theta)> dw_ic/dPhi.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mownet/data.hpp"
#include "mownet/errors.hpp"
#include "mownet/grad_check.hpp"
#include "mownet/model.hpp"
#include "mownet/mos.hpp"
#include "mownet/optim.hpp"
#include "mownet/param_set.hpp"

namespace mownet {

enum class MosMode { PerSample, BatchShared };
enum class HypergradMode { Through, Decomposed };
enum class OuterOptimizer { Sgd, Adam };
// Which MCE terms a sample's weights multiply: only its labelled class, or
// every class as in -sum_c w_c log p_c with no label.
enum class MceWeighting { Label, AllClasses };

struct TrainConfig {
  double alpha = 1e-4;
  double beta = 1e-4;
  std::size_t batch_size = 16;
  std::size_t k = 5;
  int num_classes = 3;
  int epochs = 100;
  double lr_decay = 0.1;
  int lr_decay_period = 80;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  MosMode mos_mode = MosMode::PerSample;
  HypergradMode hypergrad_mode = HypergradMode::Through;
  OuterOptimizer outer_optimizer = OuterOptimizer::Sgd;
  MceWeighting mce_weighting = MceWeighting::Label;
  std::vector<std::size_t> hidden_dims{32};
  std::size_t weightnet_hidden = 100;
  // Computes both hypergradient routes each iteration and fails on disagreement.
  bool hypergrad_cross_check = false;
  double cross_check_tolerance = 1e-8;
  // Test hook: negates the product-form hypergradient.
  bool fault_flip_decomposed_sign = false;

  void validate() const {
    if (!(alpha > 0.0)) throw ContractError("TrainConfig: alpha must be positive");
    if (!(beta > 0.0)) throw ContractError("TrainConfig: beta must be positive");
    if (batch_size < 1) throw ContractError("TrainConfig: batch size must be at least 1");
    if (k < 1) throw ContractError("TrainConfig: K must be at least 1");
    if (num_classes < 2) throw ContractError("TrainConfig: need at least 2 classes");
    if (epochs < 0) throw ContractError("TrainConfig: epochs must be non-negative");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ContractError("TrainConfig: decay factor must be in (0, 1]");
    if (lr_decay_period < 1) throw ContractError("TrainConfig: decay period must be positive");
  }

  // Multiplier applied to both alpha and beta during `epoch`.
  double lr_scale(int epoch) const { return std::pow(lr_decay, static_cast<double>(epoch / lr_decay_period)); }

  BackboneSpec backbone(std::size_t input_dim) const { return {input_dim, hidden_dims, num_classes}; }
  WeightNetSpec weightnets() const { return {weightnet_hidden, num_classes}; }
};

struct StepTrace {
  long iter = 0;
  int epoch = 0;
  std::vector<double> omega_tr;    // per-class mean of the Theta-update weights
  std::vector<double> omega_meta;  // per-class mean of the virtual-step weights
  double mce = 0.0;
  double meta_loss = 0.0;
  double hypergrad_norm = 0.0;
  // sum over batch samples and classes of <grad F(Theta_hat), grad log p_ic(Theta)>
  double alignment = 0.0;
};

struct TrainBatch {
  std::vector<std::size_t> indices;
  Tensor features;
  std::vector<int> labels;
};

inline TrainBatch make_train_batch(const Dataset& ds, std::vector<std::size_t> indices) {
  TrainBatch b;
  b.features = ds.features(indices);
  b.labels = ds.labels_at(indices);
  b.indices = std::move(indices);
  return b;
}

namespace detail {

inline Tensor weighting_mask(MceWeighting weighting, std::span<const int> labels, int num_classes) {
  if (weighting == MceWeighting::Label) return one_hot(labels, num_classes);
  return Tensor::ones(labels.size(), static_cast<std::size_t>(num_classes));
}

inline void require_finite_map(const GradMap& g, const char* where) {
  auto bad = first_non_finite(g);
  if (!bad.empty()) throw NumericError(std::string(where) + ": non-finite gradient in parameter '" + bad + "'");
}

inline std::vector<double> column_means(const Tensor& t) {
  std::vector<double> out(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[c] += t(r, c);
  for (auto& v : out) v /= static_cast<double>(t.rows());
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Independent seeds for the separate random streams of one run.
struct RunSeeds {
  std::uint64_t theta_init, phi_init, shuffle, mos;
  explicit RunSeeds(std::uint64_t seed)
      : theta_init(detail::splitmix64(seed * 4 + 0)),
        phi_init(detail::splitmix64(seed * 4 + 1)),
        shuffle(detail::splitmix64(seed * 4 + 2)),
        mos(detail::splitmix64(seed * 4 + 3)) {}
};

// Mean CE of all meta samples: the outer objective.
template <Backbone M>
Tensor meta_objective(const M& model, const ParamSet& theta, const MetaBatch& meta) {
  return cross_entropy(model.log_probs(theta, meta.features), meta.labels);
}

// ---------------------------------------------------------------------------
// Virtual step
// ---------------------------------------------------------------------------

struct VirtualStep {
  ParamSet theta;
  ParamSet theta_hat;  // attached to phi through omega
  ParamSet phi;
  TrainBatch batch;
  MetaBatch meta;
  std::vector<Tensor> meta_inputs;  // per class (sets x 1), constants at Theta
  Tensor raw_omega;                 // (N x C) outputs of V_c, attached to phi
  Tensor omega;                     // raw_omega with the weighting mask applied
  double alpha = 0.0;
};

template <Backbone M>
VirtualStep virtual_step(const M& model, const WeightNetSpec& wspec, const ParamSet& theta, const ParamSet& phi,
                         const TrainBatch& batch, const MetaBatch& meta, double alpha,
                         MceWeighting weighting = MceWeighting::Label) {
  const std::size_t n = batch.labels.size();
  if (n == 0) throw ContractError("virtual_step: empty batch");
  if (meta.num_sets != n && meta.num_sets != 1) {
    throw ContractError("virtual_step: need one meta ordinal set per sample or one shared set");
  }
  GradModeGuard recording(true);
  VirtualStep vs;
  vs.theta = theta;
  vs.phi = phi;
  vs.batch = batch;
  vs.meta = meta;
  vs.alpha = alpha;
  {
    NoGradGuard no_grad;
    vs.meta_inputs = meta_class_losses(model, theta, meta);
  }
  vs.raw_omega = forward_weightnets(phi, wspec, vs.meta_inputs).weights;
  if (meta.num_sets == 1 && n > 1) vs.raw_omega = matmul(Tensor::ones(n, 1), vs.raw_omega);
  vs.omega = mul(vs.raw_omega, detail::weighting_mask(weighting, batch.labels, wspec.num_classes));

  auto loss = mce_loss(model.log_probs(theta, batch.features), vs.omega);
  auto g = backward(loss, theta, /*create_graph=*/true);
  detail::require_finite_map(g, "virtual_step");
  vs.theta_hat = sgd_step(theta, g, alpha, /*differentiable=*/true);
  return vs;
}

// ---------------------------------------------------------------------------
// Phi update
// ---------------------------------------------------------------------------

struct Hypergradient {
  GradMap grad;
  double meta_loss = 0.0;
  double alignment = 0.0;
};

// Reverse pass from the meta objective back through the virtual step.
template <Backbone M>
Hypergradient hypergradient_through(const M& model, const VirtualStep& vs) {
  GradModeGuard recording(true);
  auto f = meta_objective(model, vs.theta_hat, vs.meta);
  Hypergradient h;
  h.meta_loss = forward_eval(f);
  h.grad = backward(f, vs.phi);
  return h;
}

namespace detail {

// grad F at Theta_hat, flattened in Theta order.
template <Backbone M>
std::pair<double, std::vector<double>> outer_gradient(const M& model, const VirtualStep& vs) {
  GradModeGuard recording(true);
  auto at = vs.theta_hat.detached();
  auto f = meta_objective(model, at, vs.meta);
  return {forward_eval(f), backward(f, at).flatten()};
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// sum_ic <grad F(Theta_hat), grad log p_ic(Theta)>, from a single reverse pass.
template <Backbone M>
double alignment_score(const M& model, const VirtualStep& vs, std::span<const double> outer_grad) {
  GradModeGuard recording(true);
  auto at = vs.theta.detached();
  auto total = sum(model.log_probs(at, vs.batch.features));
  return detail::dot(outer_grad, backward(total, at).flatten());
}

// Product form: inner products of the outer gradient with per-sample,
// per-class log-probability gradients, weighting dw_ic/dPhi.
template <Backbone M>
Hypergradient hypergradient_decomposed(const M& model, const VirtualStep& vs, bool flip_sign = false) {
  GradModeGuard recording(true);
  auto [meta_loss, outer] = detail::outer_gradient(model, vs);

  const std::size_t n = vs.batch.labels.size();
  const auto C = static_cast<std::size_t>(model.num_classes());
  std::vector<double> inner(n * C, 0.0);
  auto at = vs.theta.detached();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(vs.batch.features.data().begin() + static_cast<std::ptrdiff_t>(i * vs.batch.features.cols()),
                            vs.batch.features.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * vs.batch.features.cols()));
    auto lp = model.log_probs(at, Tensor::row(row));
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> unit(C, 0.0);
      unit[c] = 1.0;
      auto pick = matmul(lp, Tensor::constant(C, 1, std::move(unit)));
      inner[i * C + c] = detail::dot(outer, backward(pick, at).flatten());
    }
  }

  Hypergradient h;
  h.meta_loss = meta_loss;
  for (double v : inner) h.alignment += v;
  const double coef = (flip_sign ? -1.0 : 1.0) * vs.alpha / static_cast<double>(n);
  auto weighted = scale(sum(mul(Tensor::constant(n, C, std::move(inner)), vs.omega)), coef);
  h.grad = backward(weighted, vs.phi);
  return h;
}

struct PhiUpdate {
  ParamSet phi_next;
  GradMap hypergrad;
  double meta_loss = 0.0;
  double hypergrad_norm = 0.0;
  double alignment = 0.0;
};

struct PhiUpdateOptions {
  HypergradMode mode = HypergradMode::Through;
  bool cross_check = false;
  double cross_check_tolerance = 1e-8;
  bool fault_flip_decomposed_sign = false;
};

template <Backbone M>
PhiUpdate phi_update(const M& model, const VirtualStep& vs, double beta, const PhiUpdateOptions& opts = {}) {
  std::optional<Hypergradient> through, decomposed;
  if (opts.mode == HypergradMode::Through || opts.cross_check) through = hypergradient_through(model, vs);
  if (opts.mode == HypergradMode::Decomposed || opts.cross_check)
    decomposed = hypergradient_decomposed(model, vs, opts.fault_flip_decomposed_sign);

  if (opts.cross_check) {
    const double err = norm_relative_error(through->grad.flatten(), decomposed->grad.flatten());
    if (!(err <= opts.cross_check_tolerance)) {
      throw NumericError("hypergradient cross-check failed: relative difference " + std::to_string(err) +
                         " exceeds " + std::to_string(opts.cross_check_tolerance));
    }
  }

  const Hypergradient& h = opts.mode == HypergradMode::Through ? *through : *decomposed;
  detail::require_finite_map(h.grad, "phi_update");
  PhiUpdate out;
  out.hypergrad = h.grad;
  out.meta_loss = h.meta_loss;
  out.hypergrad_norm = std::sqrt(squared_norm(h.grad));
  if (decomposed) {
    out.alignment = decomposed->alignment;
  } else {
    auto [f, outer] = detail::outer_gradient(model, vs);
    out.alignment = alignment_score(model, vs, outer);
  }
  out.phi_next = sgd_step(vs.phi.detached(), h.grad, beta);
  return out;
}

// ---------------------------------------------------------------------------
// Theta update
// ---------------------------------------------------------------------------

struct OuterStep {
  OuterOptimizer optimizer = OuterOptimizer::Sgd;
  AdamConfig adam{};
  AdamState* state = nullptr;  // required for Adam
};

struct ThetaUpdate {
  ParamSet theta_next;
  GradMap grad;
  double mce = 0.0;
  std::vector<double> omega_tr;
};

inline ParamSet apply_outer_step(const ParamSet& theta, const GradMap& g, double lr, const OuterStep& step) {
  if (step.optimizer == OuterOptimizer::Adam) {
    if (step.state == nullptr) throw ContractError("Adam outer step needs optimizer state");
    return adam_step(theta, g, *step.state, lr, step.adam);
  }
  return sgd_step(theta, g, lr);
}

// Each training sample's own CE feeds every V_c; the resulting weights stay
// attached to Theta through that CE.
template <Backbone M>
ThetaUpdate theta_update(const M& model, const WeightNetSpec& wspec, const ParamSet& theta, const ParamSet& phi_next,
                         const TrainBatch& batch, double alpha, const OuterStep& step = {},
                         MceWeighting weighting = MceWeighting::Label) {
  GradModeGuard recording(true);
  auto at = theta.detached();
  auto lp = model.log_probs(at, batch.features);
  auto ce = per_sample_ce(lp, batch.labels);
  auto omega = forward_weightnets_shared(phi_next, wspec, ce).weights;
  auto loss = mce_loss(lp, mul(omega, detail::weighting_mask(weighting, batch.labels, wspec.num_classes)));
  ThetaUpdate out;
  out.mce = forward_eval(loss);
  if (!std::isfinite(out.mce)) throw NumericError("theta_update: non-finite MCE loss");
  out.omega_tr = detail::column_means(omega);
  out.grad = backward(loss, at);
  detail::require_finite_map(out.grad, "theta_update");
  out.theta_next = apply_outer_step(theta, out.grad, alpha, step);
  return out;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainObserver {
  std::function<void(int epoch, const ParamSet& theta, const ParamSet& phi)> on_epoch_end;
  std::function<void(const MetaOrdinalSet&)> on_mos;
};

struct TrainResult {
  ParamSet theta;
  ParamSet phi;
  std::vector<StepTrace> trace;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  return out;
}

inline std::string where(int epoch, long iter) {
  return "epoch " + std::to_string(epoch) + ", iteration " + std::to_string(iter) + ": ";
}

}  // namespace detail

// Meta ordinal sets for one batch, one per sample or one shared by all.
template <class Rng>
std::vector<MetaOrdinalSet> sample_batch_sets(const ClassIndex& class_index, std::span<const std::size_t> batch,
                                              std::size_t k, MosMode mode, Rng& rng) {
  std::vector<MetaOrdinalSet> sets;
  if (mode == MosMode::BatchShared) {
    sets.push_back(sample_mos_excluding(class_index, batch.front(), batch, k, rng));
  } else {
    for (auto i : batch) sets.push_back(sample_mos(class_index, i, k, rng));
  }
  return sets;
}

template <Backbone M>
TrainResult train_with(const M& model, const TrainConfig& cfg, const Dataset& ds, const ParamSet& theta0,
                       const ParamSet& phi0, const TrainObserver& obs = {}) {
  cfg.validate();
  const auto class_index = ds.class_index(cfg.num_classes);
  check_mos_capacity(class_index, cfg.k);
  const auto labels = ds.labels();
  const auto wspec = cfg.weightnets();
  const RunSeeds seeds(cfg.seed);
  std::mt19937_64 shuffle_rng(seeds.shuffle);
  std::mt19937_64 mos_rng(seeds.mos);

  TrainResult res{theta0, phi0, {}};
  AdamState adam_state;
  const OuterStep outer{cfg.outer_optimizer, cfg.adam, &adam_state};
  const PhiUpdateOptions phi_opts{cfg.hypergrad_mode, cfg.hypergrad_cross_check, cfg.cross_check_tolerance,
                                  cfg.fault_flip_decomposed_sign};
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_scale = cfg.lr_scale(epoch);
    for (auto& idx : detail::epoch_batches(ds.size(), cfg.batch_size, shuffle_rng)) {
      try {
        auto sets = sample_batch_sets(class_index, idx, cfg.k, cfg.mos_mode, mos_rng);
        for (const auto& s : sets) {
          std::vector<std::size_t> excluded;
          if (cfg.mos_mode == MosMode::BatchShared) excluded = idx;
          auto bad = mos_violation(s, labels, cfg.k, excluded);
          if (!bad.empty()) throw ContractError("meta ordinal set invariant violated: " + bad);
          if (obs.on_mos) obs.on_mos(s);
        }
        auto batch = make_train_batch(ds, idx);
        auto meta = make_meta_batch(sets, ds);

        auto vs = virtual_step(model, wspec, res.theta, res.phi, batch, meta, cfg.alpha * lr_scale, cfg.mce_weighting);
        auto pu = phi_update(model, vs, cfg.beta * lr_scale, phi_opts);
        auto tu = theta_update(model, wspec, res.theta, pu.phi_next, batch, cfg.alpha * lr_scale, outer, cfg.mce_weighting);

        StepTrace st;
        st.iter = iter;
        st.epoch = epoch;
        st.omega_tr = tu.omega_tr;
        st.omega_meta = detail::column_means(vs.raw_omega);
        st.mce = tu.mce;
        st.meta_loss = pu.meta_loss;
        st.hypergrad_norm = pu.hypergrad_norm;
        st.alignment = pu.alignment;
        res.trace.push_back(std::move(st));
        res.phi = std::move(pu.phi_next);
        res.theta = std::move(tu.theta_next);
      } catch (const NumericError& e) {
        throw NumericError(detail::where(epoch, iter) + e.what());
      } catch (const CapacityError& e) {
        throw CapacityError(detail::where(epoch, iter) + e.what(), e.class_index());
      }
      ++iter;
    }
    if (obs.on_epoch_end) obs.on_epoch_end(epoch, res.theta, res.phi);
  }
  return res;
}

inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, const TrainObserver& obs = {}) {
  cfg.validate();
  const RunSeeds seeds(cfg.seed);
  const auto spec = cfg.backbone(ds.dim);
  return train_with(DenseBackbone(spec), cfg, ds, init_backbone(spec, seeds.theta_init),
                    init_weightnets(cfg.weightnets(), seeds.phi_init), obs);
}

struct CeStepTrace {
  long iter = 0;
  int epoch = 0;
  double loss = 0.0;
};

struct CeTrainResult {
  ParamSet theta;
  std::vector<CeStepTrace> trace;
};

// Plain cross-entropy with the same backbone, initialization, batch order,
// optimizer and schedule as `train`.
inline CeTrainResult train_ce_baseline(const TrainConfig& cfg, const Dataset& ds, const TrainObserver& obs = {}) {
  cfg.validate();
  const RunSeeds seeds(cfg.seed);
  const auto spec = cfg.backbone(ds.dim);
  const DenseBackbone model(spec);
  ds.class_index(cfg.num_classes);
  std::mt19937_64 shuffle_rng(seeds.shuffle);

  CeTrainResult res{init_backbone(spec, seeds.theta_init), {}};
  AdamState adam_state;
  const OuterStep outer{cfg.outer_optimizer, cfg.adam, &adam_state};
  const ParamSet no_phi;
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.alpha * cfg.lr_scale(epoch);
    for (auto& idx : detail::epoch_batches(ds.size(), cfg.batch_size, shuffle_rng)) {
      GradModeGuard recording(true);
      auto batch = make_train_batch(ds, idx);
      auto loss = cross_entropy(model.log_probs(res.theta, batch.features), batch.labels);
      const double value = forward_eval(loss);
      if (!std::isfinite(value)) throw NumericError(detail::where(epoch, iter) + "non-finite CE loss");
      auto g = backward(loss, res.theta);
      detail::require_finite_map(g, "train_ce_baseline");
      res.theta = apply_outer_step(res.theta, g, lr, outer);
      res.trace.push_back({iter, epoch, value});
      ++iter;
    }
    if (obs.on_epoch_end) obs.on_epoch_end(epoch, res.theta, no_phi);
  }
  return res;
}

}  // namespace mownet
