#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "s2moe/experts.hpp"
#include "s2moe/losses.hpp"
#include "s2moe/ops.hpp"
#include "s2moe/rng.hpp"
#include "s2moe/routing.hpp"

namespace s2moe {

enum class Mode { train, eval };

inline Mode parse_mode(std::string_view s) {
  if (s == "train") return Mode::train;
  if (s == "eval") return Mode::eval;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "' (expected train or eval)");
}

/// Per-dimension mean and population standard deviation over every token of
/// a batch. Carries no gradient.
template <class T>
struct NoiseStats {
  std::vector<T> mu;
  std::vector<T> sigma;
};

template <class T>
NoiseStats<T> compute_batch_stats(const Tensor<T>& x) {
  const std::size_t d = x.last_dim();
  const std::size_t rows = x.numel() == 0 ? 0 : x.rows();
  if (rows == 0 || d == 0) throw std::invalid_argument("batch stats: empty batch");
  NoiseStats<T> s{std::vector<T>(d, T(0)), std::vector<T>(d, T(0))};
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) s.mu[j] += xv[r * d + j];
  for (auto& m : s.mu) m /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xv[r * d + j] - s.mu[j];
      s.sigma[j] += c * c;
    }
  for (auto& v : s.sigma) v = std::sqrt(v / static_cast<T>(rows));
  return s;
}

/// One realization of the multiplicative (n1) and additive (n2) noise.
template <class T>
struct NoiseDraw {
  Tensor<T> scale;  // n1 ~ N(1, sigma^2)
  Tensor<T> shift;  // n2 ~ N(mu, sigma^2)
};

/// Draws n1 and n2 per element of `shape`, row-major, alternating n1 then n2.
template <class T>
NoiseDraw<T> draw_noise(const Shape& shape, const NoiseStats<T>& stats, RngStream& rng) {
  const std::size_t d = shape.empty() ? 1 : shape.back();
  if (stats.mu.size() != d || stats.sigma.size() != d) {
    throw ShapeError("noise draw: stats width " + std::to_string(stats.mu.size()) + " for shape " + to_string(shape));
  }
  const std::size_t n = numel(shape);
  std::vector<T> n1(n), n2(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i % d;
    const double sd = static_cast<double>(stats.sigma[j]);
    n1[i] = static_cast<T>(rng.normal(1.0, sd));
    n2[i] = static_cast<T>(rng.normal(static_cast<double>(stats.mu[j]), sd));
  }
  return {Tensor<T>::from(shape, std::move(n1)), Tensor<T>::from(shape, std::move(n2))};
}

/// x_hat = n1 * x + n2; gradient reaches x through the product only.
template <class T>
Tensor<T> apply_noise(const Tensor<T>& x, const NoiseDraw<T>& draw) {
  return add(mul(x, draw.scale), draw.shift);
}

template <class T>
Tensor<T> perturb(const Tensor<T>& x, const NoiseStats<T>& stats, RngStream& rng) {
  return apply_noise(x, draw_noise(x.shape(), stats, rng));
}

/// One-layer gate g(x) = sigmoid(w . x + b), one scalar per token.
template <class T>
class BlendGate {
 public:
  BlendGate() = default;
  BlendGate(std::size_t d_model, double bias_init)
      : weight_(Tensor<T>::zeros({d_model, 1}, true)), bias_(Tensor<T>::scalar(static_cast<T>(bias_init), true)) {}

  /// x [M, d] -> g [M, 1]
  Tensor<T> operator()(const Tensor<T>& x) const { return sigmoid(add(matmul(x, weight_), bias_)); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

  NamedTensors<T> parameters(const std::string& prefix) const {
    return {{prefix + "w", weight_}, {prefix + "b", bias_}};
  }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <class T>
Tensor<T> blend_gate(const Tensor<T>& x, const BlendGate<T>& gate) {
  return gate(x);
}

struct MoeLayerConfig {
  RouterConfig router;
  std::size_t d_hidden = 512;
  bool stochastic = false;  // S2MoE two-path layer
  bool noise_enabled = true;
  double blend_bias_init = 0.0;
  double tau_u = 1.0;
  double init_std = 0.02;
};

template <class T>
struct MoeForward {
  Tensor<T> output;                            // [M, d]
  std::vector<RouterDecision<T>> decisions;    // clean path first, noisy path second
  std::optional<PooledPair<T>> pooled;         // train-mode S2MoE only
  Tensor<T> blend;                             // [M, 1] when the noisy path ran
  Tensor<T> noisy_input;                       // x_hat when the noisy path ran
};

/// Sparse MoE sublayer. With `stochastic` set it is the S2MoE layer:
/// y = g(x) * SMoE(x) + (1 - g(x)) * SMoE(x_hat) in training, and plain
/// SMoE(x) in evaluation.
template <class T>
class MoeLayer {
 public:
  MoeLayer(const MoeLayerConfig& config, RngStream& init_rng, RngStream noise_rng)
      : config_(config),
        router_(config.router, init_rng),
        experts_(config.router.experts, config.router.d_model, config.d_hidden, init_rng, config.init_std),
        noise_rng_(noise_rng) {
    if (config_.stochastic) blend_ = BlendGate<T>(config.router.d_model, config.blend_bias_init);
  }

  const MoeLayerConfig& config() const { return config_; }
  bool stochastic() const { return config_.stochastic; }
  void set_noise_enabled(bool on) { config_.noise_enabled = on; }

  Router<T>& router() { return router_; }
  const Router<T>& router() const { return router_; }
  ExpertBank<T>& experts() { return experts_; }
  const ExpertBank<T>& experts() const { return experts_; }
  BlendGate<T>& blend_gate() { return blend_; }
  const BlendGate<T>& blend_gate() const { return blend_; }
  RngStream& noise_rng() { return noise_rng_; }
  const RngStream& noise_rng() const { return noise_rng_; }

  /// Number of forwards that executed the noisy path.
  std::uint64_t stochastic_passes() const { return stochastic_passes_; }

  /// Plain SMoE: route then combine.
  Tensor<T> smoe(const Tensor<T>& x, std::size_t k, RouterDecision<T>* decision_out = nullptr) const {
    auto decision = router_.route(x, k);
    auto y = moe_combine(x, decision, experts_);
    if (decision_out) *decision_out = std::move(decision);
    return y;
  }

  /// x is [batch * seq, d]. `batch` groups rows into sequences for pooling.
  MoeForward<T> forward(const Tensor<T>& x, std::size_t batch, Mode mode, std::size_t k) {
    if (!config_.stochastic || mode == Mode::eval) {
      MoeForward<T> out;
      RouterDecision<T> decision;
      out.output = smoe(x, k, &decision);
      out.decisions.push_back(std::move(decision));
      return out;
    }
    if (!config_.noise_enabled) return two_path(x, batch, k, x);
    if (fixed_draw_) {
      if (fixed_draw_->scale.shape() != x.shape()) {
        throw ShapeError("fixed noise draw " + to_string(fixed_draw_->scale.shape()) + " does not match input " +
                         to_string(x.shape()));
      }
      return two_path(x, batch, k, apply_noise(x, *fixed_draw_));
    }
    const auto stats = compute_batch_stats(x);
    return two_path(x, batch, k, apply_noise(x, draw_noise(x.shape(), stats, noise_rng_)));
  }

  /// Training-mode S2MoE with a caller-supplied noise realization.
  MoeForward<T> forward_with_draw(const Tensor<T>& x, std::size_t batch, std::size_t k, const NoiseDraw<T>& draw) {
    if (!config_.stochastic) throw std::logic_error("forward_with_draw on a non-stochastic layer");
    return two_path(x, batch, k, apply_noise(x, draw));
  }

  /// Replaces sampling with a fixed realization in train-mode forwards
  /// (for gradient checks, where re-sampling between evaluations is not allowed).
  void fix_noise(NoiseDraw<T> draw) { fixed_draw_ = std::move(draw); }
  void release_noise() { fixed_draw_.reset(); }

  NamedTensors<T> parameters(const std::string& prefix) const {
    auto out = router_.parameters(prefix + "router.");
    auto ex = experts_.parameters(prefix + "experts.");
    out.insert(out.end(), ex.begin(), ex.end());
    if (config_.stochastic) {
      auto bg = blend_.parameters(prefix + "blend.");
      out.insert(out.end(), bg.begin(), bg.end());
    }
    return out;
  }

 private:
  MoeForward<T> two_path(const Tensor<T>& x, std::size_t batch, std::size_t k, const Tensor<T>& x_hat) {
    if (batch == 0 || x.rows() % batch != 0) {
      throw std::invalid_argument("s2moe: " + std::to_string(x.rows()) + " rows do not split into " +
                                  std::to_string(batch) + " sequences");
    }
    ++stochastic_passes_;
    MoeForward<T> out;
    RouterDecision<T> clean, noisy;
    auto y_clean = smoe(x, k, &clean);
    auto y_noisy = smoe(x_hat, k, &noisy);
    auto g = blend_(x);
    out.output = add(mul(y_clean, g), mul(y_noisy, affine(g, T(-1), T(1))));
    out.decisions.push_back(std::move(clean));
    out.decisions.push_back(std::move(noisy));
    out.blend = g;
    out.noisy_input = x_hat;

    const std::size_t d = x.last_dim();
    const std::size_t seq = x.rows() / batch;
    PooledPair<T> pair;
    pair.x_pool = mean(reshape(x, Shape{batch, seq, d}), 1);
    pair.xhat_pool = mean(reshape(x_hat, Shape{batch, seq, d}), 1);
    pair.tau_u = config_.tau_u;
    out.pooled = std::move(pair);
    return out;
  }

  MoeLayerConfig config_;
  Router<T> router_;
  ExpertBank<T> experts_;
  BlendGate<T> blend_;
  RngStream noise_rng_;
  std::optional<NoiseDraw<T>> fixed_draw_;
  std::uint64_t stochastic_passes_ = 0;
};

}  // namespace s2moe
