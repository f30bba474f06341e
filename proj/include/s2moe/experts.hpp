#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2moe/ops.hpp"
#include "s2moe/routing.hpp"

namespace s2moe {

template <class T>
struct ExpertWeights {
  Tensor<T> w1;  // [d, d_exp]
  Tensor<T> b1;  // [d_exp]
  Tensor<T> w2;  // [d_exp, d]
  Tensor<T> b2;  // [d]
};

/// N feed-forward experts of identical shape: E_i(x) = W2 relu(W1 x + b1) + b2.
template <class T>
class ExpertBank {
 public:
  ExpertBank(std::size_t experts, std::size_t d_model, std::size_t d_hidden, RngStream& init_rng,
             double init_std = 0.02)
      : d_model_(d_model), d_hidden_(d_hidden), invocations_(experts, 0) {
    if (experts == 0 || d_model == 0 || d_hidden == 0) throw std::invalid_argument("experts: empty dimension");
    for (std::size_t i = 0; i < experts; ++i) {
      ExpertWeights<T> w;
      w.w1 = normal({d_model, d_hidden}, init_std, init_rng);
      w.b1 = Tensor<T>::zeros({d_hidden}, true);
      w.w2 = normal({d_hidden, d_model}, init_std, init_rng);
      w.b2 = Tensor<T>::zeros({d_model}, true);
      weights_.push_back(std::move(w));
    }
  }

  std::size_t size() const { return weights_.size(); }
  std::size_t d_model() const { return d_model_; }
  std::size_t d_hidden() const { return d_hidden_; }
  ExpertWeights<T>& weights(std::size_t i) { return weights_.at(i); }
  const ExpertWeights<T>& weights(std::size_t i) const { return weights_.at(i); }

  /// Applies expert i to every row of `rows` [m, d]; counts m invocations.
  Tensor<T> forward(std::size_t i, const Tensor<T>& rows) const {
    auto y = evaluate(i, rows);
    invocations_[i] += rows.rows();
    return y;
  }

  /// Same as forward() without touching the invocation counters.
  Tensor<T> evaluate(std::size_t i, const Tensor<T>& rows) const {
    const auto& w = weights_.at(i);
    auto hidden = relu(add(matmul(rows, w.w1), w.b1));
    return add(matmul(hidden, w.w2), w.b2);
  }

  /// Pre-activations W1 x + b1 of expert i for a single token (used to keep
  /// finite-difference probes away from ReLU kinks).
  std::vector<T> pre_activation(std::size_t i, std::span<const T> x_token) const {
    NoGradGuard no_grad;
    auto x = Tensor<T>::from({1, d_model_}, std::vector<T>(x_token.begin(), x_token.end()));
    auto h = add(matmul(x, weights_.at(i).w1), weights_.at(i).b1);
    return {h.data().begin(), h.data().end()};
  }

  /// Single-token convenience evaluation (not recorded on the tape and not
  /// counted as an invocation).
  std::vector<T> expert_forward(std::span<const T> x_token, std::size_t i) const {
    if (i >= weights_.size()) throw std::out_of_range("expert index " + std::to_string(i));
    if (x_token.size() != d_model_) throw ShapeError("expert_forward: token width mismatch");
    NoGradGuard no_grad;
    const auto& w = weights_[i];
    auto x = Tensor<T>::from({1, d_model_}, std::vector<T>(x_token.begin(), x_token.end()));
    auto y = add(matmul(relu(add(matmul(x, w.w1), w.b1)), w.w2), w.b2);
    return {y.data().begin(), y.data().end()};
  }

  std::uint64_t invocations() const {
    std::uint64_t total = 0;
    for (auto c : invocations_) total += c;
    return total;
  }
  const std::vector<std::uint64_t>& invocations_per_expert() const { return invocations_; }
  void reset_counters() const { std::fill(invocations_.begin(), invocations_.end(), 0); }

  NamedTensors<T> parameters(const std::string& prefix) const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      const std::string p = prefix + std::to_string(i) + ".";
      out.emplace_back(p + "w1", weights_[i].w1);
      out.emplace_back(p + "b1", weights_[i].b1);
      out.emplace_back(p + "w2", weights_[i].w2);
      out.emplace_back(p + "b2", weights_[i].b2);
    }
    return out;
  }

 private:
  static Tensor<T> normal(Shape shape, double stddev, RngStream& rng) {
    std::vector<T> v(s2moe::numel(shape));
    for (auto& e : v) e = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

  std::size_t d_model_;
  std::size_t d_hidden_;
  std::vector<ExpertWeights<T>> weights_;
  mutable std::vector<std::uint64_t> invocations_;
};

enum class GateMode {
  differentiable,  // gate values flow gradient back into the router
  detached,        // gate values are constants
};

/// Sparse dispatch and weighted combination: for each token, the sum over its
/// selected experts of gate * E_i(x). Unselected experts are never evaluated.
template <class T>
Tensor<T> moe_combine(const Tensor<T>& x, const RouterDecision<T>& decision, const ExpertBank<T>& experts,
                      GateMode mode = GateMode::differentiable) {
  const std::size_t d = x.last_dim();
  const std::size_t tokens = x.rows();
  if (decision.tokens != tokens) {
    throw std::invalid_argument("moe_combine: decision covers " + std::to_string(decision.tokens) +
                                " tokens but input has " + std::to_string(tokens));
  }
  if (decision.experts != experts.size() || decision.indices.size() != tokens * decision.k_used ||
      decision.gates.size() != tokens * decision.experts) {
    throw std::invalid_argument("moe_combine: decision is inconsistent with " + std::to_string(experts.size()) +
                                " experts");
  }
  if (d != experts.d_model()) throw ShapeError("moe_combine: token width does not match experts");

  std::vector<std::vector<std::size_t>> rows(experts.size());
  for (std::size_t m = 0; m < tokens; ++m) {
    for (auto i : decision.row_indices(m)) {
      if (i < 0 || static_cast<std::size_t>(i) >= experts.size()) {
        throw std::invalid_argument("moe_combine: expert index " + std::to_string(i) + " out of range");
      }
      rows[static_cast<std::size_t>(i)].push_back(m);
    }
  }

  const Tensor<T> flat = x.rank() == 2 ? x : reshape(x, Shape{tokens, d});
  std::vector<Tensor<T>> parts;
  std::vector<std::vector<std::size_t>> targets;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (rows[i].empty()) continue;
    auto out = experts.forward(i, gather_rows(flat, std::span<const std::size_t>(rows[i])));
    Tensor<T> gate;
    if (mode == GateMode::differentiable) {
      std::vector<std::size_t> cols(rows[i].size(), i);
      gate = gather_elements(decision.probs, std::span<const std::size_t>(rows[i]), std::span<const std::size_t>(cols));
    } else {
      std::vector<T> g(rows[i].size());
      for (std::size_t r = 0; r < g.size(); ++r) g[r] = decision.gates[rows[i][r] * decision.experts + i];
      gate = Tensor<T>::from({rows[i].size(), 1}, std::move(g));
    }
    parts.push_back(mul(out, gate));
    targets.push_back(std::move(rows[i]));
  }
  auto combined = combine_rows(tokens, d, parts, targets);
  return x.rank() == 2 ? combined : reshape(combined, x.shape());
}

}  // namespace s2moe
