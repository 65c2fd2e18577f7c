#pragma once

// Central-difference validation of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mownet/errors.hpp"
#include "mownet/param_set.hpp"

namespace mownet {

// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero entries from
// turning rounding noise into huge relative errors.
inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

using GraphBuilder = std::function<Tensor(const ParamSet&)>;

// Largest entry-wise relative error, with the floor set to `floor_fraction`
// of the largest reference magnitude.
inline double max_relative_error(std::span<const double> actual, std::span<const double> reference,
                                 double floor_fraction = 1e-3) {
  if (actual.size() != reference.size()) throw ContractError("max_relative_error: length mismatch");
  double scale = 0.0;
  for (double v : reference) scale = std::max(scale, std::abs(v));
  const double floor = std::max(floor_fraction * scale, std::numeric_limits<double>::min());
  double worst = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) worst = std::max(worst, relative_error(actual[i], reference[i], floor));
  return worst;
}

// ||a - b|| / max(||a||, ||b||); zero when both vanish.
inline double norm_relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("norm_relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// Central differences of `builder` around `params`, one entry at a time.
inline std::vector<double> finite_difference_gradient(const GraphBuilder& builder, const ParamSet& params,
                                                      double fd_step) {
  NoGradGuard no_grad;
  auto flat = params.flatten();
  std::vector<double> out(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double orig = flat[i];
    flat[i] = orig + fd_step;
    const double up = forward_eval(builder(params.unflatten(flat)));
    flat[i] = orig - fd_step;
    const double down = forward_eval(builder(params.unflatten(flat)));
    flat[i] = orig;
    out[i] = (up - down) / (2.0 * fd_step);
  }
  return out;
}

inline GradCheckReport grad_check(const GraphBuilder& builder, const ParamSet& params, double fd_step = 1e-5,
                                  double tolerance = 1e-6, double floor_fraction = 1e-3) {
  {
    NoGradGuard no_grad;
    const double first = forward_eval(builder(params));
    const double second = forward_eval(builder(params));
    if (first != second && !(std::isnan(first) && std::isnan(second))) {
      throw ContractError("grad_check: builder is not deterministic");
    }
  }
  auto analytic = backward(builder(params), params);
  auto numeric = finite_difference_gradient(builder, params, fd_step);

  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  const double floor = std::max(floor_fraction * scale, std::numeric_limits<double>::min());

  GradCheckReport report;
  report.tolerance = tolerance;
  std::size_t off = 0;
  for (const auto& [name, g] : analytic) {
    GradCheckEntry e;
    e.name = name;
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i, ++off) {
      e.max_abs_error = std::max(e.max_abs_error, std::abs(gd[i] - numeric[off]));
      e.max_rel_error = std::max(e.max_rel_error, relative_error(gd[i], numeric[off], floor));
    }
    e.passed = e.max_rel_error <= tolerance;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace mownet
