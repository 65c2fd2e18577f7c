#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every tensor is a handle to an immutable node. Operations record their
// inputs and a backward rule when gradient recording is on and at least one
// input requires a gradient. Backward rules are themselves written with the
// same primitives, so a backward pass run with `create_graph = true` yields
// gradients that can be differentiated again. That single re-entry is what a
// differentiable parameter update needs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mownet/errors.hpp"

namespace mownet {

namespace detail {
inline thread_local bool grad_recording = true;
}

inline bool is_recording() { return detail::grad_recording; }

// Scoped override of gradient recording for the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : prev_(detail::grad_recording) {
    detail::grad_recording = enabled;
  }
  ~GradModeGuard() { detail::grad_recording = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

struct Node;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor full(std::size_t rows, std::size_t cols, double value);
  static Tensor zeros(std::size_t rows, std::size_t cols) { return full(rows, cols, 0.0); }
  static Tensor ones(std::size_t rows, std::size_t cols) { return full(rows, cols, 1.0); }
  static Tensor scalar(double value) { return full(1, 1, value); }
  static Tensor row(std::span<const double> values);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::vector<std::size_t> shape() const { return {rows(), cols()}; }
  std::size_t size() const { return rows() * cols(); }
  std::span<const double> data() const;
  double operator()(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
  // Value of a one-element tensor.
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  const std::string& op_name() const;
  // Constant tensor holding a copy of the values; no graph attached.
  Tensor detach() const;

  const Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& out, const Tensor& grad)>;

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  bool requires_grad = false;
  std::string op = "const";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

inline std::string shape_str(const Tensor& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

namespace detail {

inline void require_defined(const Tensor& t, const char* where) {
  if (!t.defined()) throw ContractError(std::string(where) + ": undefined tensor");
}

inline std::shared_ptr<Node> make_node(std::size_t rows, std::size_t cols, std::vector<double> data) {
  if (rows == 0 || cols == 0) throw ContractError("tensor dimensions must be positive");
  if (data.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape (" +
                     std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->data = std::move(data);
  return n;
}

// Result of a primitive: attaches the graph only when it is needed.
inline Tensor make_result(std::size_t rows, std::size_t cols, std::vector<double> data, const char* op,
                          std::vector<Tensor> inputs, BackwardFn backward) {
  auto n = make_node(rows, cols, std::move(data));
  n->op = op;
  bool needs = false;
  if (is_recording()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

inline Tensor Tensor::constant(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor(detail::make_node(rows, cols, std::move(data)));
}

inline Tensor Tensor::parameter(std::size_t rows, std::size_t cols, std::vector<double> data) {
  auto n = detail::make_node(rows, cols, std::move(data));
  n->op = "param";
  n->requires_grad = true;
  return Tensor(std::move(n));
}

inline Tensor Tensor::full(std::size_t rows, std::size_t cols, double value) {
  return constant(rows, cols, std::vector<double>(rows * cols, value));
}

inline Tensor Tensor::row(std::span<const double> values) {
  return constant(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

inline std::size_t Tensor::rows() const {
  detail::require_defined(*this, "rows");
  return node_->rows;
}
inline std::size_t Tensor::cols() const {
  detail::require_defined(*this, "cols");
  return node_->cols;
}
inline std::span<const double> Tensor::data() const {
  detail::require_defined(*this, "data");
  return node_->data;
}
inline double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(*this));
  return node_->data[0];
}
inline bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
inline bool Tensor::is_leaf() const { return !node_ || node_->inputs.empty(); }
inline const std::string& Tensor::op_name() const {
  detail::require_defined(*this, "op_name");
  return node_->op;
}
inline Tensor Tensor::detach() const { return constant(rows(), cols(), node_->data); }

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

enum class Axis { Rows, Cols, All };

inline Tensor matmul(const Tensor& a, const Tensor& b);
inline Tensor transpose(const Tensor& a);
inline Tensor add(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor scale(const Tensor& a, double k);
inline Tensor relu(const Tensor& a);
inline Tensor sigmoid(const Tensor& a);
inline Tensor exp(const Tensor& a);
inline Tensor log_softmax(const Tensor& a);
inline Tensor mean(const Tensor& a, Axis axis);

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double k, const Tensor& a) { return scale(a, k); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result(n, m, std::move(out), "matmul", {a, b}, [](const Tensor& out, const Tensor& g) {
    const auto& in = out.node()->inputs;
    return std::vector<Tensor>{matmul(g, transpose(in[1])), matmul(transpose(in[0]), g)};
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto A = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return detail::make_result(c, r, std::move(out), "transpose", {a},
                             [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), "add", {a, b},
                             [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), "mul", {a, b}, [](const Tensor& out, const Tensor& g) {
    const auto& in = out.node()->inputs;
    return std::vector<Tensor>{mul(g, in[1]), mul(g, in[0])};
  });
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= k;
  return detail::make_result(a.rows(), a.cols(), std::move(out), "scale", {a},
                             [k](const Tensor&, const Tensor& g) { return std::vector<Tensor>{scale(g, k)}; });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  std::vector<double> mask(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool pass = out[i] > 0.0 || std::isnan(out[i]);
    mask[i] = pass ? 1.0 : 0.0;
    out[i] = pass ? out[i] : 0.0;
  }
  // The mask is piecewise constant, so it enters the backward graph as a constant.
  auto m = Tensor::constant(a.rows(), a.cols(), std::move(mask));
  return detail::make_result(a.rows(), a.cols(), std::move(out), "relu", {a},
                             [m](const Tensor&, const Tensor& g) { return std::vector<Tensor>{mul(g, m)}; });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return detail::make_result(a.rows(), a.cols(), std::move(out), "sigmoid", {a}, [](const Tensor& out, const Tensor& g) {
    auto one_minus = sub(Tensor::ones(out.rows(), out.cols()), out);
    return std::vector<Tensor>{mul(g, mul(out, one_minus))};
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = std::exp(v);
  return detail::make_result(a.rows(), a.cols(), std::move(out), "exp", {a},
                             [](const Tensor& out, const Tensor& g) { return std::vector<Tensor>{mul(g, out)}; });
}

// Row-wise log-softmax, computed with the max-shift.
inline Tensor log_softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < r; ++i) {
    double* row = &out[i * c];
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return detail::make_result(r, c, std::move(out), "log_softmax", {a}, [](const Tensor& out, const Tensor& g) {
    // dx = g - softmax * rowsum(g)
    const std::size_t c = out.cols();
    auto row_sum = matmul(matmul(g, Tensor::ones(c, 1)), Tensor::ones(1, c));
    return std::vector<Tensor>{sub(g, mul(exp(out), row_sum))};
  });
}

// Mean over rows gives 1 x cols, over cols gives rows x 1, over all gives 1 x 1.
inline Tensor mean(const Tensor& a, Axis axis) {
  const std::size_t r = a.rows(), c = a.cols();
  auto A = a.data();
  std::vector<double> out;
  std::size_t orows = 1, ocols = 1;
  switch (axis) {
    case Axis::Rows:
      ocols = c;
      out.assign(c, 0.0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += A[i * c + j];
      for (auto& v : out) v /= static_cast<double>(r);
      break;
    case Axis::Cols:
      orows = r;
      out.assign(r, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i] += A[i * c + j];
        out[i] /= static_cast<double>(c);
      }
      break;
    case Axis::All: {
      double s = 0.0;
      for (double v : A) s += v;
      out.assign(1, s / static_cast<double>(r * c));
      break;
    }
  }
  return detail::make_result(orows, ocols, std::move(out), "mean", {a}, [axis, r, c](const Tensor&, const Tensor& g) {
    switch (axis) {
      case Axis::Rows:
        return std::vector<Tensor>{scale(matmul(Tensor::ones(r, 1), g), 1.0 / static_cast<double>(r))};
      case Axis::Cols:
        return std::vector<Tensor>{scale(matmul(g, Tensor::ones(1, c)), 1.0 / static_cast<double>(c))};
      case Axis::All:
      default:
        return std::vector<Tensor>{
            scale(matmul(matmul(Tensor::ones(r, 1), g), Tensor::ones(1, c)), 1.0 / static_cast<double>(r * c))};
    }
  });
}

// Sum of all entries, expressed through mean.
inline Tensor sum(const Tensor& a) { return scale(mean(a, Axis::All), static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Evaluation and reverse pass
// ---------------------------------------------------------------------------

inline double forward_eval(const Tensor& root) {
  detail::require_defined(root, "forward_eval");
  if (root.size() != 1) throw ContractError("forward_eval: root must be scalar, got " + shape_str(root));
  return root.item();
}

namespace detail {

// Nodes reachable from root through requires_grad edges, in post-order.
inline std::vector<std::shared_ptr<Node>> topo_order(const Tensor& root) {
  std::vector<std::shared_ptr<Node>> order;
  if (!root.requires_grad()) return order;
  std::unordered_map<const Node*, bool> seen;
  std::vector<std::pair<const std::shared_ptr<Node>*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  seen[root.id()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& inputs = (*node)->inputs;
    if (next < inputs.size()) {
      const auto& child = inputs[next++].node();
      if (child->requires_grad && !seen[child.get()]) {
        seen[child.get()] = true;
        stack.emplace_back(&child, 0);
      }
    } else {
      order.push_back(*node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Gradients of a scalar root with respect to each tensor in `wrt`. Tensors the
// root does not depend on get exact zeros. With create_graph the returned
// gradients are themselves attached to the graph.
inline std::vector<Tensor> grad(const Tensor& root, std::span<const Tensor> wrt, bool create_graph = false) {
  detail::require_defined(root, "backward");
  if (root.size() != 1) throw ContractError("backward: root must be scalar, got " + shape_str(root));

  GradModeGuard mode(create_graph);
  auto order = detail::topo_order(root);

  // Only nodes with a path to some requested tensor need their backward run.
  std::unordered_map<const Node*, bool> needed;
  for (const auto& w : wrt)
    if (w.defined()) needed[w.id()] = true;
  for (const auto& node : order) {
    bool& flag = needed[node.get()];
    for (const auto& in : node->inputs) flag = flag || (in.requires_grad() && needed[in.id()]);
  }

  std::unordered_map<const Node*, Tensor> grads;
  if (!order.empty()) grads[order.back().get()] = Tensor::ones(1, 1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = *it;
    if (!needed[node.get()] || !node->backward) continue;
    auto found = grads.find(node.get());
    if (found == grads.end()) continue;
    Tensor out(node);
    auto input_grads = node->backward(out, found->second);
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      const auto& in = node->inputs[k];
      if (!in.requires_grad() || !needed[in.id()]) continue;
      auto [slot, inserted] = grads.try_emplace(in.id(), input_grads[k]);
      if (!inserted) slot->second = add(slot->second, input_grads[k]);
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = grads.find(w.id());
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.push_back(Tensor::zeros(w.rows(), w.cols()));
    }
  }
  return result;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace mownet
