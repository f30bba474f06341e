#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "s2moe/ops.hpp"
#include "s2moe/routing.hpp"

namespace s2moe {

/// Per-sequence mean-pooled MoE-layer inputs and their noisy counterparts.
template <class T>
struct PooledPair {
  Tensor<T> x_pool;     // [B, d]
  Tensor<T> xhat_pool;  // [B, d]
  double tau_u = 1.0;
};

template <class T>
struct TaskLoss {
  Tensor<T> nats;  // differentiable scalar
  double bpc = 0.0;
  double ppl = 0.0;
};

struct LossBreakdown {
  double task_nats = 0.0;
  double bpc = 0.0;
  double ppl = 0.0;
  double balance = 0.0;
  double uncertainty = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

inline double nats_to_bpc(double nats) { return nats / std::numbers::ln2; }

/// Mean token cross-entropy of logits [..., V] against targets.
template <class T>
TaskLoss<T> task_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  TaskLoss<T> out;
  out.nats = cross_entropy(logits, targets);
  const double nats = static_cast<double>(out.nats.item());
  out.bpc = nats_to_bpc(nats);
  out.ppl = std::exp(nats);
  return out;
}

/// Switch-style load balancing: N * sum_i f_i * P_i, with f_i the fraction of
/// tokens whose top-1 expert is i and P_i the mean router probability.
template <class T>
Tensor<T> balance_loss(const RouterDecision<T>& decision) {
  if (decision.tokens == 0) throw std::invalid_argument("balance_loss: decision has no tokens");
  const std::size_t n = decision.experts;
  std::vector<T> fraction(n, T(0));
  for (std::size_t m = 0; m < decision.tokens; ++m) {
    fraction[static_cast<std::size_t>(decision.row_indices(m)[0])] += T(1);
  }
  for (auto& f : fraction) f /= static_cast<T>(decision.tokens);
  auto mean_probs = mean(decision.probs, 0);
  auto weighted = mul(mean_probs, Tensor<T>::from({n}, std::move(fraction)));
  return affine(sum(weighted), static_cast<T>(n));
}

/// InfoNCE over a similarity matrix kappa [B, B]: the mean over rows i of
/// -log(exp(kappa_ii) / sum_j exp(kappa_ij)).
template <class T>
Tensor<T> info_nce(const Tensor<T>& kappa) {
  if (kappa.rank() != 2 || kappa.dim(0) != kappa.dim(1) || kappa.dim(0) == 0) {
    throw ShapeError("info_nce: kernel must be square and non-empty, got " + to_string(kappa.shape()));
  }
  std::vector<std::int32_t> diagonal(kappa.dim(0));
  std::iota(diagonal.begin(), diagonal.end(), 0);
  return cross_entropy(kappa, std::span<const std::int32_t>(diagonal));
}

/// Uncertainty loss with kappa(a, b) = cosine(a, b) / tau_u.
template <class T>
Tensor<T> uncertainty_loss(const PooledPair<T>& pair) {
  if (pair.x_pool.shape() != pair.xhat_pool.shape() || pair.x_pool.rank() != 2 || pair.x_pool.dim(0) == 0) {
    throw ShapeError("uncertainty_loss: pooled shapes " + to_string(pair.x_pool.shape()) + " and " +
                     to_string(pair.xhat_pool.shape()));
  }
  if (!(pair.tau_u > 0.0)) throw std::invalid_argument("uncertainty_loss: tau_u must be positive");
  auto kappa = matmul_bt(l2_normalize(pair.x_pool), l2_normalize(pair.xhat_pool));
  return info_nce(affine(kappa, static_cast<T>(1.0 / pair.tau_u)));
}

/// task + alpha * balance + beta * uncertainty
template <class T>
Tensor<T> total_loss(const Tensor<T>& task, const Tensor<T>& balance, const Tensor<T>& uncertainty, double alpha,
                     double beta) {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("total_loss: coefficients must be non-negative");
  auto total = add(task, affine(balance, static_cast<T>(alpha)));
  return add(total, affine(uncertainty, static_cast<T>(beta)));
}

inline LossBreakdown make_breakdown(double task_nats, double balance, double uncertainty, double alpha, double beta) {
  LossBreakdown b;
  b.task_nats = task_nats;
  b.bpc = nats_to_bpc(task_nats);
  b.ppl = std::exp(task_nats);
  b.balance = balance;
  b.uncertainty = uncertainty;
  b.alpha = alpha;
  b.beta = beta;
  b.total = task_nats + alpha * balance + beta * uncertainty;
  return b;
}

}  // namespace s2moe
