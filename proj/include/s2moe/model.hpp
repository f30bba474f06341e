#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "s2moe/losses.hpp"
#include "s2moe/ops.hpp"
#include "s2moe/rng.hpp"
#include "s2moe/routing.hpp"
#include "s2moe/stochastic.hpp"

namespace s2moe {

enum class Variant { smoe, s2moe, smoe_dropout, xmoe, stablemoe };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::smoe: return "smoe";
    case Variant::s2moe: return "s2moe";
    case Variant::smoe_dropout: return "smoe-dropout";
    case Variant::xmoe: return "xmoe";
    case Variant::stablemoe: return "stablemoe";
  }
  return "smoe";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "smoe") return Variant::smoe;
  if (s == "s2moe") return Variant::s2moe;
  if (s == "smoe-dropout") return Variant::smoe_dropout;
  if (s == "xmoe") return Variant::xmoe;
  if (s == "stablemoe") return Variant::stablemoe;
  throw std::invalid_argument("unknown variant '" + std::string(s) +
                              "' (expected smoe, s2moe, smoe-dropout, xmoe or stablemoe)");
}

inline RouterVariant router_variant(Variant v) {
  switch (v) {
    case Variant::smoe:
    case Variant::s2moe: return RouterVariant::smoe;
    case Variant::smoe_dropout: return RouterVariant::smoe_dropout;
    case Variant::xmoe: return RouterVariant::xmoe;
    case Variant::stablemoe: return RouterVariant::stablemoe;
  }
  return RouterVariant::smoe;
}

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t d_exp = 512;
  std::size_t experts = 16;
  std::size_t k_train = 2;
  std::size_t k_eval = 2;
  std::size_t vocab = 257;
  std::size_t seq_len = 512;
  double dropout = 0.1;
  Variant variant = Variant::s2moe;
  double alpha = 0.01;
  double beta = 0.1;
  double tau_u = 1.0;
  double tau_r = 0.07;
  std::size_t d_low = 8;
  std::size_t stage_boundary = 0;
  bool noise_enabled = true;
  double blend_bias_init = 0.0;
  double init_std = 0.02;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (n_layers == 0 || d_model == 0 || d_exp == 0 || vocab == 0 || seq_len == 0) fail("dimensions must be positive");
    if (n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (experts < 2) fail("need at least 2 experts");
    if (k_train < 1 || k_train > experts) fail("k_train must lie in [1, experts]");
    if (k_eval < 1 || k_eval > experts) fail("k_eval must lie in [1, experts]");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
    if (alpha < 0.0 || beta < 0.0) fail("alpha and beta must be non-negative");
    if (!(tau_u > 0.0)) fail("tau_u must be positive");
    if (!(tau_r > 0.0)) fail("tau_r must be positive");
    if (variant == Variant::xmoe && (d_low == 0 || d_low >= d_model)) fail("xmoe needs 0 < d_low < d_model");
  }
};

template <class T>
struct BlockTrace {
  Tensor<T> attention_out;  // attention sublayer output before the residual add
  Tensor<T> moe_input;      // normalized input of the MoE sublayer
  MoeForward<T> moe;
};

template <class T>
struct ForwardResult {
  Tensor<T> logits;  // [B * T, V]
  std::vector<BlockTrace<T>> blocks;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t k = 0;
};

template <class T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> task;
  Tensor<T> balance;
  Tensor<T> uncertainty;
  LossBreakdown breakdown;
};

/// Pre-norm causal decoder whose feed-forward sublayers are MoE layers.
template <class T>
class LanguageModel {
 public:
  explicit LanguageModel(const ModelConfig& config)
      : config_(config), dropout_rng_(RngStream(config.seed).fork(2)), train_k_(config.k_train) {
    config_.validate();
    RngStream init = RngStream(config_.seed).fork(1);
    const std::size_t d = config_.d_model;
    tok_emb_ = normal({config_.vocab, d}, init);
    pos_emb_ = normal({config_.seq_len, d}, init);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      Block b;
      b.ln1_gain = Tensor<T>::full({d}, T(1), true);
      b.ln1_bias = Tensor<T>::zeros({d}, true);
      b.wq = normal({d, d}, init);
      b.wk = normal({d, d}, init);
      b.wv = normal({d, d}, init);
      b.wo = normal({d, d}, init);
      b.ln2_gain = Tensor<T>::full({d}, T(1), true);
      b.ln2_bias = Tensor<T>::zeros({d}, true);
      MoeLayerConfig mc;
      mc.router.variant = router_variant(config_.variant);
      mc.router.experts = config_.experts;
      mc.router.d_model = d;
      mc.router.d_low = config_.d_low;
      mc.router.tau_r = config_.tau_r;
      mc.router.stage_boundary = config_.stage_boundary;
      mc.router.init_std = config_.init_std;
      mc.d_hidden = config_.d_exp;
      mc.stochastic = config_.variant == Variant::s2moe;
      mc.noise_enabled = config_.noise_enabled;
      mc.blend_bias_init = config_.blend_bias_init;
      mc.tau_u = config_.tau_u;
      mc.init_std = config_.init_std;
      b.moe = std::make_unique<MoeLayer<T>>(mc, init, RngStream(config_.seed).fork(100 + l));
      blocks_.push_back(std::move(b));
    }
    lnf_gain_ = Tensor<T>::full({d}, T(1), true);
    lnf_bias_ = Tensor<T>::zeros({d}, true);
  }

  const ModelConfig& config() const { return config_; }
  std::size_t layers() const { return blocks_.size(); }
  MoeLayer<T>& moe(std::size_t layer) { return *blocks_.at(layer).moe; }
  const MoeLayer<T>& moe(std::size_t layer) const { return *blocks_.at(layer).moe; }

  /// Routing width for subsequent eval-mode forwards.
  void set_inference_k(std::size_t k) {
    if (k < 1 || k > config_.experts) {
      throw std::out_of_range("inference k=" + std::to_string(k) + " outside [1, " + std::to_string(config_.experts) +
                              "]");
    }
    config_.k_eval = k;
  }
  std::size_t inference_k() const { return config_.k_eval; }
  std::size_t training_k() const { return train_k_; }

  /// Applies per-step routing schedules before the training step `step`
  /// (0-based) of `total_steps`.
  void begin_step(std::size_t step, std::size_t total_steps) {
    if (config_.variant == Variant::smoe_dropout) {
      train_k_ = dropout_schedule_k(step, total_steps, config_.experts);
    }
    for (auto& b : blocks_) b.moe->router().advance_to(step);
  }

  ForwardResult<T> forward(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq, Mode mode) {
    if (seq > config_.seq_len) {
      throw std::invalid_argument("sequence length " + std::to_string(seq) + " exceeds seq_len " +
                                  std::to_string(config_.seq_len));
    }
    if (batch == 0 || seq == 0 || tokens.size() != batch * seq) {
      throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                       " x seq " + std::to_string(seq));
    }
    const bool training = mode == Mode::train;
    const double p = training ? config_.dropout : 0.0;
    ForwardResult<T> out;
    out.batch = batch;
    out.seq = seq;
    out.k = training ? train_k_ : config_.k_eval;

    std::vector<std::int32_t> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % seq);
    auto h = add(embedding(tok_emb_, tokens), embedding(pos_emb_, std::span<const std::int32_t>(positions)));
    h = dropout(h, p, dropout_rng_);

    for (auto& b : blocks_) {
      BlockTrace<T> trace;
      auto a = layer_norm(h, b.ln1_gain, b.ln1_bias);
      auto att = causal_attention(matmul(a, b.wq), matmul(a, b.wk), matmul(a, b.wv), batch, seq, config_.n_heads);
      trace.attention_out = matmul(att, b.wo);
      h = add(h, dropout(trace.attention_out, p, dropout_rng_));
      trace.moe_input = layer_norm(h, b.ln2_gain, b.ln2_bias);
      trace.moe = b.moe->forward(trace.moe_input, batch, mode, out.k);
      h = add(h, dropout(trace.moe.output, p, dropout_rng_));
      out.blocks.push_back(std::move(trace));
    }
    out.logits = matmul_bt(layer_norm(h, lnf_gain_, lnf_bias_), tok_emb_);
    return out;
  }

  /// Task loss plus balance loss (mean over every routing decision of every
  /// layer) plus uncertainty loss (mean over layers that produced a pooled
  /// pair; zero when none did).
  LossTerms<T> loss(const ForwardResult<T>& fwd, std::span<const std::int32_t> targets) const {
    LossTerms<T> terms;
    auto task = task_loss(fwd.logits, targets);
    terms.task = task.nats;

    Tensor<T> balance;
    std::size_t decisions = 0;
    Tensor<T> uncertainty;
    std::size_t pooled = 0;
    for (const auto& b : fwd.blocks) {
      for (const auto& dcs : b.moe.decisions) {
        auto lb = balance_loss(dcs);
        balance = balance.defined() ? add(balance, lb) : lb;
        ++decisions;
      }
      if (b.moe.pooled) {
        auto lu = uncertainty_loss(*b.moe.pooled);
        uncertainty = uncertainty.defined() ? add(uncertainty, lu) : lu;
        ++pooled;
      }
    }
    terms.balance = affine(balance, T(1) / static_cast<T>(decisions));
    terms.uncertainty = pooled ? affine(uncertainty, T(1) / static_cast<T>(pooled)) : Tensor<T>::scalar(T(0));
    terms.total = total_loss(terms.task, terms.balance, terms.uncertainty, config_.alpha, config_.beta);
    terms.breakdown = make_breakdown(static_cast<double>(terms.task.item()), static_cast<double>(terms.balance.item()),
                                     static_cast<double>(terms.uncertainty.item()), config_.alpha, config_.beta);
    return terms;
  }

  NamedTensors<T> parameters() const {
    NamedTensors<T> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gain", b.ln1_gain);
      out.emplace_back(p + "ln1.bias", b.ln1_bias);
      out.emplace_back(p + "attn.wq", b.wq);
      out.emplace_back(p + "attn.wk", b.wk);
      out.emplace_back(p + "attn.wv", b.wv);
      out.emplace_back(p + "attn.wo", b.wo);
      out.emplace_back(p + "ln2.gain", b.ln2_gain);
      out.emplace_back(p + "ln2.bias", b.ln2_bias);
      auto moe = b.moe->parameters(p + "moe.");
      out.insert(out.end(), moe.begin(), moe.end());
    }
    out.emplace_back("ln_f.gain", lnf_gain_);
    out.emplace_back("ln_f.bias", lnf_bias_);
    return out;
  }

  /// Every random stream the model owns, by checkpoint name.
  std::vector<std::pair<std::string, RngStream*>> rng_streams() {
    std::vector<std::pair<std::string, RngStream*>> out{{"dropout", &dropout_rng_}};
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      out.emplace_back("noise." + std::to_string(l), &blocks_[l].moe->noise_rng());
    }
    return out;
  }

  std::uint64_t expert_invocations() const {
    std::uint64_t total = 0;
    for (const auto& b : blocks_) total += b.moe->experts().invocations();
    return total;
  }
  void reset_counters() const {
    for (const auto& b : blocks_) b.moe->experts().reset_counters();
  }
  std::uint64_t stochastic_passes() const {
    std::uint64_t total = 0;
    for (const auto& b : blocks_) total += b.moe->stochastic_passes();
    return total;
  }

 private:
  struct Block {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> wq, wk, wv, wo;
    Tensor<T> ln2_gain, ln2_bias;
    std::unique_ptr<MoeLayer<T>> moe;
  };

  Tensor<T> normal(Shape shape, RngStream& rng) const {
    std::vector<T> v(s2moe::numel(shape));
    for (auto& e : v) e = static_cast<T>(rng.normal(0.0, config_.init_std));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

  ModelConfig config_;
  RngStream dropout_rng_;
  std::size_t train_k_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor<T> lnf_gain_, lnf_bias_;
};

}  // namespace s2moe
