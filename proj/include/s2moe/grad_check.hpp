#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2moe/tensor.hpp"

namespace s2moe {

/// |analytic - numeric| / max(|analytic|, |numeric|, floor)
template <class T>
T relative_error(T analytic, T numeric, T floor = T(1e-8)) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Denominator floor for a central difference of f with step epsilon. One
/// ulp of rounding in f moves the quotient by about eps_mach * |f| / epsilon,
/// so slopes within 1e4 of that are compared on an absolute scale.
template <class T>
T difference_floor(T value, T epsilon) {
  const T resolution = std::numeric_limits<T>::epsilon() * std::max(T(1), std::abs(value)) / epsilon;
  return std::max(T(1e-8), T(1e4) * resolution);
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst;  // "<tensor>[<index>]"
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `point`. Returns the maximum relative error over
/// coordinates.
template <class T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& point, T epsilon) {
  if (!(epsilon > T(0))) throw std::invalid_argument("grad_check: epsilon must be positive");
  auto& tape = Tape<T>::active();
  tape.clear();
  Tensor<T> x = Tensor<T>::from(point.shape(), std::vector<T>(point.data().begin(), point.data().end()), true);
  Tensor<T> loss = f(x);
  const T floor = difference_floor(loss.numel() == 1 ? loss.item() : T(0), epsilon);
  std::vector<T> analytic(x.numel(), T(0));
  if (loss.node_id() && !loss.is_leaf()) {
    loss.backward();
    analytic = x.grad_or_zero();
  } else if (loss.numel() != 1) {
    throw TapeError("grad_check: function must return a scalar");
  }
  tape.clear();

  NoGradGuard no_grad;
  NanGuardScope unguarded(false);
  T worst = 0;
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + epsilon;
    const T plus = f(x).item();
    values[i] = saved - epsilon;
    const T minus = f(x).item();
    values[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("grad_check: non-finite function value when perturbing coordinate " + std::to_string(i));
    }
    const T numeric = (plus - minus) / (T(2) * epsilon);
    worst = std::max(worst, relative_error(analytic[i], numeric, floor));
  }
  return worst;
}

/// Same check over the coordinates of several named parameters of a
/// closure. `stride` > 1 samples every stride-th coordinate of each tensor.
template <class T>
GradCheckResult grad_check_params(const std::function<Tensor<T>()>& f, NamedTensors<T>& params, T epsilon,
                                  std::size_t stride = 1) {
  if (!(epsilon > T(0))) throw std::invalid_argument("grad_check: epsilon must be positive");
  auto& tape = Tape<T>::active();
  tape.clear();
  for (auto& [name, p] : params) p.zero_grad();
  Tensor<T> loss = f();
  const T floor = difference_floor(loss.item(), epsilon);
  loss.backward();
  std::vector<std::vector<T>> analytic;
  for (auto& [name, p] : params) analytic.push_back(p.grad_or_zero());
  tape.clear();

  NoGradGuard no_grad;
  NanGuardScope unguarded(false);
  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].second.mutable_data();
    for (std::size_t i = 0; i < values.size(); i += std::max<std::size_t>(stride, 1)) {
      const T saved = values[i];
      values[i] = saved + epsilon;
      const T plus = f().item();
      values[i] = saved - epsilon;
      const T minus = f().item();
      values[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite function value when perturbing " + params[t].first + "[" +
                           std::to_string(i) + "]");
      }
      const T numeric = (plus - minus) / (T(2) * epsilon);
      const double err = static_cast<double>(relative_error(analytic[t][i], numeric, floor));
      ++result.coordinates;
      if (err > result.max_relative_error || result.worst.empty()) {
        result.max_relative_error = std::max(result.max_relative_error, err);
        result.worst = params[t].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace s2moe
