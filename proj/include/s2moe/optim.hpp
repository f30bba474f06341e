#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2moe/tensor.hpp"

namespace s2moe {

struct AdamOptions {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed, ordered parameter list. Parameters with
/// requires_grad == false are skipped and keep their moments untouched.
template <class T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& [name, p] : params_) {
      first_.emplace_back(p.numel(), T(0));
      second_.emplace_back(p.numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
    const T step_size = static_cast<T>(options_.lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(options_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.requires_grad()) continue;
      auto values = p.mutable_data();
      auto grad = p.grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const T g = grad.empty() ? T(0) : grad[j];
        m[j] = b1 * m[j] + (T(1) - b1) * g;
        v[j] = b2 * v[j] + (T(1) - b2) * g * g;
        values[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  const AdamOptions& options() const { return options_; }
  const NamedTensors<T>& parameters() const { return params_; }
  std::vector<T>& first_moment(std::size_t i) { return first_.at(i); }
  std::vector<T>& second_moment(std::size_t i) { return second_.at(i); }

 private:
  NamedTensors<T> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
  std::uint64_t steps_ = 0;
};

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(NamedTensors<T>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double total = 0.0;
  for (const auto& [name, p] : params) {
    for (auto g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

}  // namespace s2moe
