#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "s2moe/grad_check.hpp"
#include "s2moe/model.hpp"
#include "s2moe/report.hpp"
#include "s2moe/stochastic.hpp"

namespace s2moe {

/// Raised when a Jacobian probe point sits too close to a routing decision
/// boundary or a ReLU kink for finite differences to be meaningful.
struct ProbeBoundaryError : std::runtime_error {
  ProbeBoundaryError(const std::string& what, double gap_value) : std::runtime_error(what), gap(gap_value) {}
  double gap;
};

struct JacobianReport {
  std::size_t d = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  bool stochastic = false;
  std::vector<double> jacobian;      // [d, d] central differences, J[out][in]
  std::vector<double> expert_term;   // gates (and blend gate) held at the probe point
  std::vector<double> routing_term;  // jacobian - expert_term
  std::vector<double> singular_values;
  double rank_tolerance = 0.0;  // absolute threshold on singular values of R
  std::size_t routing_rank = 0;
  double autodiff_max_rel_error = 0.0;
  double selection_gap = 0.0;
  double kink_gap = 0.0;

  std::string to_text() const {
    return ReportWriter("jacobian")
        .field("d", static_cast<std::uint64_t>(d))
        .field("experts", static_cast<std::uint64_t>(experts))
        .field("k", static_cast<std::uint64_t>(k))
        .field("path", stochastic ? "s2moe-fixed-draw" : "smoe")
        .field("routing_rank", static_cast<std::uint64_t>(routing_rank))
        .field("rank_tolerance", rank_tolerance)
        .field("singular_values", format_list(singular_values))
        .field("autodiff_vs_fd_max_rel_error", autodiff_max_rel_error)
        .field("selection_gap", selection_gap)
        .field("relu_kink_gap", kink_gap)
        .str();
  }
};

struct ProbeOptions {
  double eps = 1e-5;
  double min_selection_gap = 1e-3;
  double min_kink_gap = 1e-3;
  double rank_relative_tolerance = 1e-6;
  // Singular values below this multiple of max(1, max |J|) are treated as
  // finite-difference noise even when R has no structural part at all.
  double rank_noise_floor = 1e-8;
};

namespace detail {

using DenseMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class F>
std::vector<double> central_jacobian(F&& f, std::span<const double> x0, double eps) {
  const std::size_t d = x0.size();
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> jac;
  for (std::size_t c = 0; c < d; ++c) {
    x[c] = x0[c] + eps;
    const auto plus = f(std::span<const double>(x));
    x[c] = x0[c] - eps;
    const auto minus = f(std::span<const double>(x));
    x[c] = x0[c];
    if (jac.empty()) jac.assign(plus.size() * d, 0.0);
    for (std::size_t r = 0; r < plus.size(); ++r) jac[r * d + c] = (plus[r] - minus[r]) / (2.0 * eps);
  }
  return jac;
}

inline double min_abs(std::span<const double> v) {
  double m = std::numeric_limits<double>::infinity();
  for (auto e : v) m = std::min(m, std::abs(e));
  return m;
}

}  // namespace detail

/// Numerically decomposes the Jacobian of an MoE layer at one token into the
/// expert term (gates frozen at the probe point) and the routing term.
///
/// Without `draw` the clean SMoE path is probed. With `draw` the layer must
/// be stochastic and the full two-path output under that fixed noise
/// realization is probed, which adds a second routing term and the blend
/// gate term.
inline JacobianReport jacobian_probe(MoeLayer<double>& layer, std::span<const double> x_token, std::size_t k,
                                     const ProbeOptions& options = {}, const NoiseDraw<double>* draw = nullptr) {
  const auto& experts = layer.experts();
  const std::size_t d = experts.d_model();
  if (x_token.size() != d) throw ShapeError("jacobian_probe: token width mismatch");
  if (draw && !layer.stochastic()) throw std::invalid_argument("jacobian_probe: noise draw given for a plain layer");
  if (draw && (draw->scale.numel() != d || draw->shift.numel() != d)) {
    throw ShapeError("jacobian_probe: noise draw must cover exactly one token");
  }

  NoGradGuard no_grad;
  auto as_tensor = [d](std::span<const double> v) {
    return Tensor<double>::from({1, d}, std::vector<double>(v.begin(), v.end()));
  };
  std::vector<double> x_hat0;
  if (draw) {
    x_hat0.resize(d);
    for (std::size_t j = 0; j < d; ++j) x_hat0[j] = draw->scale[j] * x_token[j] + draw->shift[j];
  }

  JacobianReport rep;
  rep.d = d;
  rep.experts = experts.size();
  rep.k = k;
  rep.stochastic = draw != nullptr;

  // Boundary checks on every routed point.
  struct Frozen {
    std::vector<std::int32_t> selected;
    std::vector<double> gates;  // dense [N]
  };
  auto freeze = [&](std::span<const double> point) {
    auto dec = layer.router().route(as_tensor(point), k);
    const double gap = dec.selection_gap(0);
    if (gap <= options.min_selection_gap) {
      throw ProbeBoundaryError("probe point within " + format_double(gap) + " of a top-k decision boundary", gap);
    }
    Frozen fz{{dec.row_indices(0).begin(), dec.row_indices(0).end()}, {dec.gates.begin(), dec.gates.end()}};
    double kink = std::numeric_limits<double>::infinity();
    for (auto i : fz.selected) kink = std::min(kink, detail::min_abs(experts.pre_activation(static_cast<std::size_t>(i), point)));
    if (kink <= options.min_kink_gap) {
      throw ProbeBoundaryError("probe point within " + format_double(kink) + " of a ReLU kink", kink);
    }
    rep.selection_gap = rep.selection_gap == 0.0 ? gap : std::min(rep.selection_gap, gap);
    rep.kink_gap = rep.kink_gap == 0.0 ? kink : std::min(rep.kink_gap, kink);
    return fz;
  };
  const Frozen clean = freeze(x_token);
  std::optional<Frozen> noisy;
  double g0 = 1.0;
  if (draw) {
    noisy = freeze(x_hat0);
    g0 = layer.blend_gate()(as_tensor(x_token)).item();
  }

  auto full = [&](std::span<const double> x) {
    auto t = as_tensor(x);
    auto y = draw ? layer.forward_with_draw(t, 1, k, *draw).output : layer.smoe(t, k);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  auto frozen_sum = [&](const Frozen& fz, std::span<const double> x, double weight, std::vector<double>& acc) {
    for (auto i : fz.selected) {
      const auto e = experts.expert_forward(x, static_cast<std::size_t>(i));
      const double gate = fz.gates[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < d; ++j) acc[j] += weight * gate * e[j];
    }
  };
  auto expert_only = [&](std::span<const double> x) {
    std::vector<double> acc(d, 0.0);
    frozen_sum(clean, x, g0, acc);
    if (draw) {
      std::vector<double> xh(d);
      for (std::size_t j = 0; j < d; ++j) xh[j] = draw->scale[j] * x[j] + draw->shift[j];
      frozen_sum(*noisy, xh, 1.0 - g0, acc);
    }
    return acc;
  };

  rep.jacobian = detail::central_jacobian(full, x_token, options.eps);
  rep.expert_term = detail::central_jacobian(expert_only, x_token, options.eps);
  rep.routing_term.resize(d * d);
  for (std::size_t i = 0; i < d * d; ++i) rep.routing_term[i] = rep.jacobian[i] - rep.expert_term[i];

  Eigen::Map<const detail::DenseMatrix> r(rep.routing_term.data(), static_cast<Eigen::Index>(d),
                                          static_cast<Eigen::Index>(d));
  Eigen::JacobiSVD<detail::DenseMatrix> svd(r);
  const auto& sv = svd.singularValues();
  rep.singular_values.assign(sv.data(), sv.data() + sv.size());
  const double sigma_max = rep.singular_values.empty() ? 0.0 : rep.singular_values.front();
  double jac_scale = 0.0;
  for (auto v : rep.jacobian) jac_scale = std::max(jac_scale, std::abs(v));
  rep.rank_tolerance = std::max(options.rank_relative_tolerance * sigma_max,
                                options.rank_noise_floor * std::max(1.0, jac_scale));
  rep.routing_rank = 0;
  for (auto s : rep.singular_values) rep.routing_rank += s > rep.rank_tolerance ? 1 : 0;

  // Reverse-mode Jacobian, one output row at a time.
  const double floor = std::max(1e-6 * jac_scale, 1e-12);
  {
    GradModeGuard recording(true);
    auto& tape = Tape<double>::active();
    for (std::size_t r = 0; r < d; ++r) {
      tape.clear();
      auto x = Tensor<double>::from({1, d}, std::vector<double>(x_token.begin(), x_token.end()), true);
      auto y = draw ? layer.forward_with_draw(x, 1, k, *draw).output : layer.smoe(x, k);
      std::vector<double> pick(d, 0.0);
      pick[r] = 1.0;
      auto out = sum(mul(y, Tensor<double>::from({1, d}, std::move(pick))));
      out.backward();
      const auto g = x.grad_or_zero();
      for (std::size_t c = 0; c < d; ++c) {
        const double a = g[c];
        const double n = rep.jacobian[r * d + c];
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        rep.autodiff_max_rel_error = std::max(rep.autodiff_max_rel_error, std::abs(a - n) / denom);
      }
    }
    tape.clear();
  }
  return rep;
}

struct CollapseReport {
  double mean_expert_cosine = 0.0;  // averaged over layers, tokens and expert pairs
  double router_entropy = 0.0;      // nats, mean over layers and tokens
  std::vector<double> layer_cosine;
  std::vector<double> layer_entropy;
  std::vector<std::vector<std::uint64_t>> load;  // [layer][expert] selections
  std::vector<std::pair<std::size_t, double>> bpc_by_k;
  std::size_t tokens = 0;

  std::string to_text() const {
    ReportWriter w("collapse");
    w.field("tokens", static_cast<std::uint64_t>(tokens))
        .field("mean_expert_cosine", mean_expert_cosine)
        .field("router_entropy_nats", router_entropy)
        .field("layer_cosine", format_list(layer_cosine))
        .field("layer_entropy", format_list(layer_entropy));
    for (std::size_t l = 0; l < load.size(); ++l) w.field("load." + std::to_string(l), format_list(load[l]));
    for (const auto& [k, bpc] : bpc_by_k) w.field("bpc.k" + std::to_string(k), bpc);
    return w.str();
  }
};

/// Mean pairwise cosine similarity of expert outputs when every expert sees
/// the same inputs `rows` [M, d].
template <class T>
double expert_output_cosine(const ExpertBank<T>& experts, const Tensor<T>& rows) {
  NoGradGuard no_grad;
  const std::size_t n = experts.size();
  const std::size_t d = experts.d_model();
  const std::size_t m = rows.rows();
  std::vector<Tensor<T>> outs;
  for (std::size_t i = 0; i < n; ++i) outs.push_back(experts.evaluate(i, rows));
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const double u = outs[a][t * d + j], v = outs[b][t * d + j];
          dot += u * v;
          na += u * u;
          nb += v * v;
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        total += denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : (na == nb ? 1.0 : 0.0);
        ++count;
      }
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Mean entropy (nats) of the router probability rows.
template <class T>
double router_entropy(const RouterDecision<T>& decision) {
  double total = 0.0;
  for (std::size_t m = 0; m < decision.tokens; ++m) {
    for (auto p : decision.row_probs(m)) {
      if (p > T(0)) total -= static_cast<double>(p) * std::log(static_cast<double>(p));
    }
  }
  return decision.tokens ? total / static_cast<double>(decision.tokens) : 0.0;
}

/// Gini coefficient of a load histogram (0 = perfectly even).
inline double gini(std::span<const std::uint64_t> load) {
  if (load.empty()) return 0.0;
  double sum = 0.0, diff = 0.0;
  for (auto a : load) {
    sum += static_cast<double>(a);
    for (auto b : load) diff += std::abs(static_cast<double>(a) - static_cast<double>(b));
  }
  if (sum == 0.0) return 0.0;
  const double n = static_cast<double>(load.size());
  return diff / (2.0 * n * sum);
}

template <class T>
std::vector<std::uint64_t> expert_load(const RouterDecision<T>& decision) {
  std::vector<std::uint64_t> load(decision.experts, 0);
  for (auto i : decision.indices) ++load[static_cast<std::size_t>(i)];
  return load;
}

/// Collapse indicators of a model on one token batch (eval mode).
template <class T>
CollapseReport collapse_metrics(LanguageModel<T>& model, std::span<const std::int32_t> tokens, std::size_t batch,
                                std::size_t seq) {
  if (tokens.size() < 64) throw std::invalid_argument("collapse_metrics: need at least 64 tokens");
  NoGradGuard no_grad;
  auto fwd = model.forward(tokens, batch, seq, Mode::eval);
  CollapseReport rep;
  rep.tokens = tokens.size();
  for (std::size_t l = 0; l < fwd.blocks.size(); ++l) {
    const auto& block = fwd.blocks[l];
    rep.layer_cosine.push_back(expert_output_cosine(model.moe(l).experts(), block.moe_input));
    rep.layer_entropy.push_back(router_entropy(block.moe.decisions.front()));
    rep.load.push_back(expert_load(block.moe.decisions.front()));
  }
  for (std::size_t l = 0; l < rep.layer_cosine.size(); ++l) {
    rep.mean_expert_cosine += rep.layer_cosine[l] / static_cast<double>(rep.layer_cosine.size());
    rep.router_entropy += rep.layer_entropy[l] / static_cast<double>(rep.layer_entropy.size());
  }
  return rep;
}

/// Per-token forward multiply-accumulate counts of linear maps.
struct FlopsReport {
  std::size_t layers = 0;
  std::size_t d_model = 0;
  std::size_t d_exp = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  std::size_t seq_len = 0;
  std::string variant;
  std::string mode;
  // Per layer.
  std::uint64_t attention_projections = 0;  // q, k, v, o: 4 d^2
  std::uint64_t attention_mixing = 0;       // scores and values at seq_len: 2 T d
  std::uint64_t router = 0;                 // N d (xmoe: d_low d + N d_low), per routed path
  std::uint64_t experts_macs = 0;           // 2 d d_exp per selected expert, per routed path
  std::uint64_t blend_gate = 0;             // d when the noisy path runs

  std::uint64_t per_layer() const {
    return attention_projections + attention_mixing + router + experts_macs + blend_gate;
  }
  std::uint64_t total() const { return per_layer() * layers; }

  std::string to_text() const {
    return ReportWriter("flops")
        .field("variant", variant)
        .field("mode", mode)
        .field("layers", static_cast<std::uint64_t>(layers))
        .field("d_model", static_cast<std::uint64_t>(d_model))
        .field("d_exp", static_cast<std::uint64_t>(d_exp))
        .field("experts", static_cast<std::uint64_t>(experts))
        .field("k", static_cast<std::uint64_t>(k))
        .field("seq_len", static_cast<std::uint64_t>(seq_len))
        .field("convention", "multiply-accumulates of linear maps per token; norms and activations excluded")
        .field("attention_projections_per_layer", attention_projections)
        .field("attention_mixing_per_layer", attention_mixing)
        .field("router_per_layer", router)
        .field("experts_per_layer", experts_macs)
        .field("blend_gate_per_layer", blend_gate)
        .field("per_layer", per_layer())
        .field("total", total())
        .str();
  }
};

inline FlopsReport flops_per_token(const ModelConfig& cfg, std::size_t k, std::size_t seq_len, Mode mode = Mode::eval) {
  if (k > cfg.experts) {
    throw std::out_of_range("flops: k=" + std::to_string(k) + " exceeds " + std::to_string(cfg.experts) + " experts");
  }
  using U = std::uint64_t;
  const U d = cfg.d_model, n = cfg.experts;
  FlopsReport r;
  r.layers = cfg.n_layers;
  r.d_model = cfg.d_model;
  r.d_exp = cfg.d_exp;
  r.experts = cfg.experts;
  r.k = k;
  r.seq_len = seq_len;
  r.variant = std::string(to_string(cfg.variant));
  r.mode = mode == Mode::train ? "train" : "eval";
  const U paths = (cfg.variant == Variant::s2moe && mode == Mode::train) ? 2 : 1;
  r.attention_projections = 4 * d * d;
  r.attention_mixing = 2 * static_cast<U>(seq_len) * d;
  const U router_once = cfg.variant == Variant::xmoe ? static_cast<U>(cfg.d_low) * d + n * cfg.d_low : n * d;
  r.router = paths * router_once;
  r.experts_macs = paths * 2 * d * static_cast<U>(cfg.d_exp) * k;
  r.blend_gate = paths == 2 ? d : 0;
  return r;
}

/// 1 - total(k_low) / total(k_high)
inline double flops_reduction(const ModelConfig& cfg, std::size_t k_high, std::size_t k_low, std::size_t seq_len) {
  const double hi = static_cast<double>(flops_per_token(cfg, k_high, seq_len).total());
  const double lo = static_cast<double>(flops_per_token(cfg, k_low, seq_len).total());
  return 1.0 - lo / hi;
}

}  // namespace s2moe
