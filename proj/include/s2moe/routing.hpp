#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "s2moe/ops.hpp"
#include "s2moe/rng.hpp"
#include "s2moe/tensor.hpp"

namespace s2moe {

enum class RouterVariant { smoe, smoe_dropout, xmoe, stablemoe };

inline std::string_view to_string(RouterVariant v) {
  switch (v) {
    case RouterVariant::smoe: return "smoe";
    case RouterVariant::smoe_dropout: return "smoe-dropout";
    case RouterVariant::xmoe: return "xmoe";
    case RouterVariant::stablemoe: return "stablemoe";
  }
  return "smoe";
}

enum class RouterStage { learned, frozen };

/// Selected experts of one probability row.
template <class T>
struct TopK {
  std::vector<std::int32_t> indices;  // by descending probability, ties by lower index
  std::vector<T> gates;               // same length as the row, zero off the selection
};

/// Keeps the k largest entries of `probs` and zeroes the rest. Kept values
/// are not renormalized.
template <class T>
TopK<T> topk_mask(std::span<const T> probs, std::size_t k) {
  if (k < 1 || k > probs.size()) {
    throw std::out_of_range("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(probs.size()) + "]");
  }
  std::vector<std::int32_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                    [&](std::int32_t a, std::int32_t b) {
                      if (probs[a] != probs[b]) return probs[a] > probs[b];
                      return a < b;
                    });
  TopK<T> out;
  out.indices.assign(order.begin(), order.begin() + static_cast<long>(k));
  out.gates.assign(probs.size(), T(0));
  for (auto i : out.indices) out.gates[static_cast<std::size_t>(i)] = probs[static_cast<std::size_t>(i)];
  return out;
}

/// Linear SMoE-Dropout schedule: clamp(ceil(N * step / total), 1, N).
inline std::size_t dropout_schedule_k(std::size_t step, std::size_t total_steps, std::size_t experts) {
  if (total_steps == 0) throw std::invalid_argument("dropout schedule: total_steps must be positive");
  if (step > total_steps) throw std::out_of_range("dropout schedule: step beyond total_steps");
  const auto num = static_cast<unsigned __int128>(experts) * step;
  const auto k = static_cast<std::size_t>((num + total_steps - 1) / total_steps);
  return std::clamp<std::size_t>(k, 1, experts);
}

inline RouterStage stablemoe_mode(std::size_t step, std::size_t stage_boundary) {
  return step < stage_boundary ? RouterStage::learned : RouterStage::frozen;
}

/// Routing output for M tokens over N experts.
template <class T>
struct RouterDecision {
  Tensor<T> probs;                    // [M, N], differentiable
  std::vector<std::int32_t> indices;  // [M, k_used]
  std::vector<T> gates;               // [M, N], zero off the selected set
  std::size_t tokens = 0;
  std::size_t experts = 0;
  std::size_t k_used = 0;

  std::span<const std::int32_t> row_indices(std::size_t m) const {
    return std::span<const std::int32_t>(indices).subspan(m * k_used, k_used);
  }
  std::span<const T> row_gates(std::size_t m) const { return std::span<const T>(gates).subspan(m * experts, experts); }
  std::span<const T> row_probs(std::size_t m) const { return probs.data().subspan(m * experts, experts); }

  /// Gap between the k-th and (k+1)-th largest probability of a row;
  /// infinite when every expert is selected.
  T selection_gap(std::size_t m) const {
    if (k_used >= experts) return std::numeric_limits<T>::infinity();
    std::vector<T> row(row_probs(m).begin(), row_probs(m).end());
    std::sort(row.begin(), row.end(), std::greater<T>());
    return row[k_used - 1] - row[k_used];
  }
};

/// Softmax over routing scores [M, N] followed by top-k masking.
template <class T>
RouterDecision<T> route_from_scores(const Tensor<T>& scores, std::size_t k) {
  if (scores.rank() != 2) throw ShapeError("route: scores must be [tokens, experts], got " + to_string(scores.shape()));
  const std::size_t experts = scores.dim(1);
  if (k < 1 || k > experts) {
    throw std::out_of_range("route: k=" + std::to_string(k) + " outside [1, " + std::to_string(experts) + "]");
  }
  RouterDecision<T> d;
  d.probs = softmax(scores, -1);
  d.tokens = scores.dim(0);
  d.experts = experts;
  d.k_used = k;
  d.indices.reserve(d.tokens * k);
  d.gates.reserve(d.tokens * experts);
  for (std::size_t m = 0; m < d.tokens; ++m) {
    auto sel = topk_mask<T>(d.row_probs(m), k);
    d.indices.insert(d.indices.end(), sel.indices.begin(), sel.indices.end());
    d.gates.insert(d.gates.end(), sel.gates.begin(), sel.gates.end());
  }
  return d;
}

struct RouterConfig {
  RouterVariant variant = RouterVariant::smoe;
  std::size_t experts = 16;
  std::size_t d_model = 256;
  std::size_t d_low = 8;              // xmoe routing dimension
  double tau_r = 0.07;                // xmoe initial temperature
  std::size_t stage_boundary = 0;     // stablemoe: first frozen step
  double init_std = 0.02;

  void validate() const {
    if (experts < 2) throw std::invalid_argument("router: need at least 2 experts");
    if (d_model == 0) throw std::invalid_argument("router: d_model must be positive");
    if (!(tau_r > 0.0)) throw std::invalid_argument("router: tau_r must be positive");
    if (variant == RouterVariant::xmoe && (d_low == 0 || d_low >= d_model)) {
      throw std::invalid_argument("router: xmoe needs 0 < d_low < d_model");
    }
  }
};

/// Expert-embedding router for every baseline variant.
template <class T>
class Router {
 public:
  Router(const RouterConfig& config, RngStream& init_rng) : config_(config) {
    config_.validate();
    const std::size_t n = config_.experts, d = config_.d_model;
    expert_embeddings_ = normal_tensor({n, d}, config_.init_std, init_rng);
    if (config_.variant == RouterVariant::xmoe) {
      down_projection_ = normal_tensor({config_.d_low, d}, 1.0 / std::sqrt(static_cast<double>(d)), init_rng);
      low_embeddings_ = normal_tensor({n, config_.d_low}, 1.0, init_rng);
      // Scores are cosine * exp(log_inv_tau), so the temperature stays positive.
      log_inv_tau_ = Tensor<T>::scalar(static_cast<T>(std::log(1.0 / config_.tau_r)), true);
    }
    if (config_.variant == RouterVariant::smoe_dropout) expert_embeddings_.set_requires_grad(false);
  }

  const RouterConfig& config() const { return config_; }
  RouterVariant variant() const { return config_.variant; }
  std::size_t experts() const { return config_.experts; }

  Tensor<T> scores(const Tensor<T>& x) const {
    if (x.last_dim() != config_.d_model) {
      throw ShapeError("route: token width " + std::to_string(x.last_dim()) + " but router expects " +
                       std::to_string(config_.d_model));
    }
    const Tensor<T> rows = x.rank() == 2 ? x : reshape(x, Shape{x.rows(), x.last_dim()});
    if (config_.variant != RouterVariant::xmoe) return matmul_bt(rows, expert_embeddings_);
    auto low = l2_normalize(matmul_bt(rows, down_projection_));
    auto cosine = matmul_bt(low, l2_normalize(low_embeddings_));
    return mul(cosine, exp(log_inv_tau_));
  }

  RouterDecision<T> route(const Tensor<T>& x, std::size_t k) const { return route_from_scores(scores(x), k); }

  /// Applies the StableMoE stage for `step`: the first step at or past the
  /// boundary snapshots and freezes the expert embeddings.
  void advance_to(std::size_t step) {
    if (config_.variant != RouterVariant::stablemoe || frozen_) return;
    if (stablemoe_mode(step, config_.stage_boundary) == RouterStage::frozen) {
      snapshot_.assign(expert_embeddings_.data().begin(), expert_embeddings_.data().end());
      expert_embeddings_.set_requires_grad(false);
      frozen_ = true;
      ++snapshot_events_;
    }
  }

  bool frozen() const { return !expert_embeddings_.requires_grad(); }
  std::size_t snapshot_events() const { return snapshot_events_; }
  const std::vector<T>& snapshot() const { return snapshot_; }
  RouterStage stage() const { return frozen_ ? RouterStage::frozen : RouterStage::learned; }

  Tensor<T>& expert_embeddings() { return expert_embeddings_; }
  const Tensor<T>& expert_embeddings() const { return expert_embeddings_; }

  NamedTensors<T> parameters(const std::string& prefix) const {
    if (config_.variant != RouterVariant::xmoe) return {{prefix + "w_e", expert_embeddings_}};
    return {{prefix + "w_down", down_projection_},
            {prefix + "e_low", low_embeddings_},
            {prefix + "log_inv_tau", log_inv_tau_}};
  }

  double temperature() const {
    if (config_.variant != RouterVariant::xmoe) return 1.0;
    return std::exp(-static_cast<double>(log_inv_tau_.item()));
  }

 private:
  static Tensor<T> normal_tensor(Shape shape, double stddev, RngStream& rng) {
    std::vector<T> v(s2moe::numel(shape));
    for (auto& e : v) e = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

  RouterConfig config_;
  Tensor<T> expert_embeddings_;
  Tensor<T> down_projection_;
  Tensor<T> low_embeddings_;
  Tensor<T> log_inv_tau_;
  std::vector<T> snapshot_;
  bool frozen_ = false;
  std::size_t snapshot_events_ = 0;
};

}  // namespace s2moe
