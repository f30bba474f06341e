#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2moe/checkpoint.hpp"
#include "s2moe/config.hpp"
#include "s2moe/corpus.hpp"
#include "s2moe/diagnostics.hpp"
#include "s2moe/metrics.hpp"
#include "s2moe/model.hpp"
#include "s2moe/optim.hpp"

namespace s2moe {

/// Input/target pairs of a batch of corpus windows: inputs are positions
/// 0..T-2 of each window, targets positions 1..T-1.
struct TokenBatch {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

inline TokenBatch make_batch(const Corpus& corpus, Split split, std::span<const std::size_t> sample_ids) {
  TokenBatch b;
  b.batch = sample_ids.size();
  b.seq = corpus.seq_len - 1;
  for (auto id : sample_ids) {
    auto s = corpus.sample(split, id);
    b.inputs.insert(b.inputs.end(), s.begin(), s.end() - 1);
    b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
  }
  return b;
}

/// Mean router entropy and mean load Gini over every routing decision.
template <class T>
std::pair<double, double> routing_summary(const ForwardResult<T>& fwd) {
  double entropy = 0.0, g = 0.0;
  std::size_t n = 0;
  for (const auto& b : fwd.blocks) {
    for (const auto& d : b.moe.decisions) {
      entropy += router_entropy(d);
      const auto load = expert_load(d);
      g += gini(load);
      ++n;
    }
  }
  return n ? std::pair{entropy / static_cast<double>(n), g / static_cast<double>(n)} : std::pair{0.0, 0.0};
}

/// Fills in settings derived from the corpus and the step budget.
inline RunConfig resolve_config(RunConfig cfg, const Corpus& corpus) {
  cfg.model.vocab = corpus.vocab.size();
  if (cfg.model.variant == Variant::stablemoe && cfg.model.stage_boundary == 0) cfg.model.stage_boundary = cfg.steps / 2;
  cfg.validate();
  return cfg;
}

template <class T>
class Trainer {
 public:
  /// Fresh run. `corpus` must be ingested with sample length cfg.model.seq_len.
  Trainer(const RunConfig& cfg, Corpus corpus)
      : cfg_(resolve_config(cfg, corpus)),
        corpus_(std::move(corpus)),
        model_(cfg_.model),
        params_(model_.parameters()),
        adam_(params_, AdamOptions{cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps}),
        data_rng_(RngStream(cfg_.model.seed).fork(3)) {
    if (corpus_.seq_len != cfg_.model.seq_len) {
      throw std::invalid_argument("corpus sample length " + std::to_string(corpus_.seq_len) + " != seq_len " +
                                  std::to_string(cfg_.model.seq_len));
    }
    if (corpus_.sample_count(Split::train) == 0) throw std::invalid_argument("train split holds no full sample");
  }

  /// Continues a run from a checkpoint. `corpus` must use the checkpoint's vocabulary.
  static Trainer resume(const Checkpoint& ckpt, Corpus corpus) {
    auto cfg = parse_config(ckpt.config);
    if (corpus.vocab.bytes() != ckpt.vocabulary) throw CheckpointError("corpus vocabulary differs from checkpoint");
    Trainer t(cfg, std::move(corpus));
    t.load(ckpt);
    return t;
  }

  const RunConfig& config() const { return cfg_; }
  const Corpus& corpus() const { return corpus_; }
  LanguageModel<T>& model() { return model_; }
  Adam<T>& optimizer() { return adam_; }
  std::uint64_t completed_steps() const { return step_; }

  /// One optimization step on a freshly sampled batch; returns the
  /// training-batch metrics measured before the update.
  MetricsRow step() {
    model_.begin_step(step_, cfg_.steps);
    std::vector<std::size_t> ids(cfg_.batch);
    const auto count = corpus_.sample_count(Split::train);
    for (auto& id : ids) id = static_cast<std::size_t>(data_rng_.below(count));
    const auto batch = make_batch(corpus_, Split::train, ids);

    auto& tape = Tape<T>::active();
    tape.clear();
    auto fwd = model_.forward(batch.inputs, batch.batch, batch.seq, Mode::train);
    auto terms = model_.loss(fwd, batch.targets);
    const double total = terms.breakdown.total;
    if (!std::isfinite(total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step_ + 1));
    }
    adam_.zero_grad();
    terms.total.backward();
    clip_grad_norm(params_, cfg_.grad_clip);
    adam_.step();
    ++step_;

    MetricsRow row;
    row.step = step_;
    row.task_nats = terms.breakdown.task_nats;
    row.bpc = terms.breakdown.bpc;
    row.balance = terms.breakdown.balance;
    row.uncertainty = terms.breakdown.uncertainty;
    row.total = total;
    std::tie(row.router_entropy, row.expert_load_gini) = routing_summary(fwd);
    row.k = fwd.k;
    return row;
  }

  bool logs_at(std::uint64_t step) const {
    return step == 1 || step % cfg_.eval_interval == 0 || step == cfg_.steps;
  }

  Checkpoint checkpoint() {
    Checkpoint c;
    c.config = config_text(cfg_);
    c.vocabulary = corpus_.vocab.bytes();
    c.step = step_;
    c.optimizer_steps = adam_.steps();
    for (auto& [name, rng] : model_.rng_streams()) c.rngs.push_back({name, rng->seed(), rng->counter()});
    c.rngs.push_back({"data", data_rng_.seed(), data_rng_.counter()});
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, p] = params_[i];
      c.tensors.push_back(StoredTensor::template from<T>(name, p.shape(), p.data()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, p] = params_[i];
      c.tensors.push_back(StoredTensor::template from<T>("adam.m." + name, p.shape(), adam_.first_moment(i)));
      c.tensors.push_back(StoredTensor::template from<T>("adam.v." + name, p.shape(), adam_.second_moment(i)));
    }
    return c;
  }

 private:
  void load(const Checkpoint& c) {
    for (auto& [name, p] : params_) restore_tensor(c, name, p);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, p] = params_[i];
      Tensor<T> m = Tensor<T>::zeros(p.shape()), v = Tensor<T>::zeros(p.shape());
      restore_tensor(c, "adam.m." + name, m);
      restore_tensor(c, "adam.v." + name, v);
      std::copy(m.data().begin(), m.data().end(), adam_.first_moment(i).begin());
      std::copy(v.data().begin(), v.data().end(), adam_.second_moment(i).begin());
    }
    for (auto& [name, rng] : model_.rng_streams()) restore_rng(c, name, *rng);
    restore_rng(c, "data", data_rng_);
    adam_.set_steps(c.optimizer_steps);
    step_ = c.step;
    if (step_ > cfg_.steps) throw CheckpointError("checkpoint step exceeds the configured step budget");
  }

  RunConfig cfg_;
  Corpus corpus_;
  LanguageModel<T> model_;
  NamedTensors<T> params_;
  Adam<T> adam_;
  RngStream data_rng_;
  std::uint64_t step_ = 0;
};

struct TrainSummary {
  std::vector<MetricsRow> rows;
  std::string metrics_path;
  std::string checkpoint_path;
};

/// Runs (or continues) training until the configured step budget, writing
/// metrics.csv and checkpoint.bin under the output directory.
template <class T>
TrainSummary run_training(Trainer<T>& trainer, std::uint64_t stop_after = 0,
                          const std::function<void(const MetricsRow&)>& on_row = {}) {
  const auto& cfg = trainer.config();
  std::filesystem::create_directories(cfg.out_dir);
  TrainSummary s;
  s.metrics_path = (std::filesystem::path(cfg.out_dir) / "metrics.csv").string();
  s.checkpoint_path = (std::filesystem::path(cfg.out_dir) / "checkpoint.bin").string();
  MetricsWriter writer(s.metrics_path, trainer.completed_steps() == 0);
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t end = stop_after ? std::min<std::uint64_t>(stop_after, cfg.steps) : cfg.steps;
  while (trainer.completed_steps() < end) {
    auto row = trainer.step();
    if (cfg.log_wall_ms) {
      row.wall_ms = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count());
    }
    if (trainer.logs_at(row.step)) {
      writer.append(row);
      s.rows.push_back(row);
      if (on_row) on_row(row);
    }
    if (row.step % cfg.checkpoint_interval == 0 || row.step == end) {
      save_checkpoint(s.checkpoint_path, trainer.checkpoint());
    }
  }
  return s;
}

struct EvalResult {
  double nats = 0.0;
  double bpc = 0.0;
  double ppl = 0.0;
  std::size_t tokens = 0;
  MetricsRow row;
  std::optional<CollapseReport> collapse;
};

/// Teacher-forced evaluation over every full sample of a split at
/// inference width k. `max_samples` = 0 means the whole split.
template <class T>
EvalResult evaluate(LanguageModel<T>& model, const Corpus& corpus, Split split, std::size_t k, std::size_t batch,
                    std::size_t max_samples = 0) {
  model.set_inference_k(k);
  NoGradGuard no_grad;
  std::size_t count = corpus.sample_count(split);
  if (max_samples) count = std::min(count, max_samples);
  if (count == 0) throw std::invalid_argument("split holds no full sample");
  if (batch == 0) throw std::invalid_argument("batch must be positive");

  EvalResult r;
  double nats_sum = 0.0, balance_sum = 0.0, entropy_sum = 0.0, gini_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t first = 0; first < count; first += batch) {
    std::vector<std::size_t> ids;
    for (std::size_t i = first; i < std::min(count, first + batch); ++i) ids.push_back(i);
    const auto b = make_batch(corpus, split, ids);
    auto fwd = model.forward(b.inputs, b.batch, b.seq, Mode::eval);
    auto terms = model.loss(fwd, b.targets);
    nats_sum += terms.breakdown.task_nats * static_cast<double>(b.targets.size());
    r.tokens += b.targets.size();
    balance_sum += terms.breakdown.balance;
    const auto [ent, g] = routing_summary(fwd);
    entropy_sum += ent;
    gini_sum += g;
    ++batches;
    if (!r.collapse && b.inputs.size() >= 64) r.collapse = collapse_metrics(model, b.inputs, b.batch, b.seq);
  }
  r.nats = nats_sum / static_cast<double>(r.tokens);
  r.bpc = nats_to_bpc(r.nats);
  r.ppl = std::exp(r.nats);
  r.row.task_nats = r.nats;
  r.row.bpc = r.bpc;
  r.row.balance = balance_sum / static_cast<double>(batches);
  r.row.uncertainty = 0.0;
  r.row.total = r.nats + model.config().alpha * r.row.balance;
  r.row.router_entropy = entropy_sum / static_cast<double>(batches);
  r.row.expert_load_gini = gini_sum / static_cast<double>(batches);
  r.row.k = k;
  if (r.collapse) r.collapse->bpc_by_k.emplace_back(k, r.bpc);
  return r;
}

/// Rebuilds a model from a checkpoint, converting stored tensors to T.
template <class T>
LanguageModel<T> model_from_checkpoint(const Checkpoint& c) {
  const auto cfg = parse_config(c.config);
  cfg.validate();
  LanguageModel<T> model(cfg.model);
  for (auto& [name, p] : model.parameters()) {
    auto t = p;
    restore_tensor(c, name, t);
  }
  for (std::size_t l = 0; l < model.layers(); ++l) model.moe(l).router().advance_to(c.step);
  return model;
}

}  // namespace s2moe
