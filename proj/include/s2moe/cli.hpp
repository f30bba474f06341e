#pragma once

#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "s2moe/checkpoint.hpp"
#include "s2moe/config.hpp"
#include "s2moe/corpus.hpp"
#include "s2moe/diagnostics.hpp"
#include "s2moe/trainer.hpp"

namespace s2moe {

/// Invalid command-line input detected after parsing (exit status 1).
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace cli {

struct TrainArgs {
  std::string config, preset = "desk", variant, corpus, out, precision, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

struct EvalArgs {
  std::string ckpt, split, corpus;
  std::size_t k = 0;
  std::size_t batch = 8;
  std::size_t max_samples = 0;
};

struct ProbeArgs {
  std::string ckpt, corpus;
  std::size_t layer = 0;
};

struct FlopsArgs {
  std::string config, preset;
  std::size_t k = 0;
  std::optional<std::size_t> baseline_k, seq_len;
  std::string mode = "eval";
};

inline RunConfig build_train_config(const TrainArgs& a) {
  RunConfig cfg = preset(a.preset);
  if (!a.config.empty()) cfg = load_config_file(a.config, cfg);
  if (!a.variant.empty()) cfg.model.variant = parse_variant(a.variant);
  if (a.seed) cfg.model.seed = *a.seed;
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.steps) cfg.steps = *a.steps;
  if (a.precision == "f32") cfg.precision = Precision::f32;
  if (a.precision == "f64") cfg.precision = Precision::f64;
  if (cfg.corpus.empty()) {
    if (const char* env = std::getenv("S2MOE_CORPUS")) cfg.corpus = env;
  }
  if (cfg.corpus.empty()) throw UsageError("no corpus given (use --corpus PATH or corpus= in the config)");
  return cfg;
}

inline void print_row(std::ostream& out, const MetricsRow& r) {
  out << "step " << r.step << " bpc " << format_double(r.bpc) << " balance " << format_double(r.balance)
      << " uncertainty " << format_double(r.uncertainty) << " k " << r.k << '\n';
}

template <class T>
int train_with(const TrainArgs& a, std::ostream& out) {
  std::optional<Trainer<T>> trainer;
  if (!a.resume.empty()) {
    const auto ckpt = load_checkpoint(a.resume);
    auto cfg = parse_config(ckpt.config);
    const auto vocab = ByteVocabulary::from_alphabet(ckpt.vocabulary);
    auto corpus = ingest_corpus(cfg.corpus, cfg.splits, cfg.model.seq_len, &vocab);
    trainer.emplace(Trainer<T>::resume(ckpt, std::move(corpus)));
    out << "resumed at step " << trainer->completed_steps() << '\n';
  } else {
    const auto cfg = build_train_config(a);
    auto corpus = ingest_corpus(cfg.corpus, cfg.splits, cfg.model.seq_len);
    trainer.emplace(cfg, std::move(corpus));
  }
  const auto summary = run_training(*trainer, 0, [&](const MetricsRow& r) { print_row(out, r); });
  out << "metrics: " << summary.metrics_path << '\n' << "checkpoint: " << summary.checkpoint_path << '\n';
  return 0;
}

inline int run_train(const TrainArgs& a, std::ostream& out) {
  Precision p = Precision::f32;
  if (!a.resume.empty()) {
    p = parse_config(load_checkpoint(a.resume).config).precision;
  } else {
    p = build_train_config(a).precision;
  }
  return p == Precision::f64 ? train_with<double>(a, out) : train_with<float>(a, out);
}

inline Corpus corpus_for_checkpoint(const Checkpoint& ckpt, const RunConfig& cfg, const std::string& override_path) {
  const auto vocab = ByteVocabulary::from_alphabet(ckpt.vocabulary);
  const std::string path = override_path.empty() ? cfg.corpus : override_path;
  return ingest_corpus(path, cfg.splits, cfg.model.seq_len, &vocab);
}

template <class T>
int eval_with(const EvalArgs& a, const Checkpoint& ckpt, const RunConfig& cfg, std::ostream& out) {
  auto model = model_from_checkpoint<T>(ckpt);
  const auto corpus = corpus_for_checkpoint(ckpt, cfg, a.corpus);
  auto r = evaluate(model, corpus, parse_split(a.split), a.k, a.batch, a.max_samples);
  r.row.step = ckpt.step;
  out << kMetricsHeader << '\n' << format_metrics_row(r.row) << '\n';
  out << ReportWriter("eval")
             .field("split", a.split)
             .field("k", static_cast<std::uint64_t>(a.k))
             .field("tokens", static_cast<std::uint64_t>(r.tokens))
             .field("nats", r.nats)
             .field("bpc", r.bpc)
             .field("ppl", r.ppl)
             .str();
  if (r.collapse) out << r.collapse->to_text();
  out << flops_per_token(cfg.model, a.k, cfg.model.seq_len - 1).to_text();
  return 0;
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto ckpt = load_checkpoint(a.ckpt);
  const auto cfg = parse_config(ckpt.config);
  if (a.k < 1 || a.k > cfg.model.experts) {
    throw UsageError("--k " + std::to_string(a.k) + " outside [1, " + std::to_string(cfg.model.experts) + "]");
  }
  return cfg.precision == Precision::f64 ? eval_with<double>(a, ckpt, cfg, out) : eval_with<float>(a, ckpt, cfg, out);
}

inline int run_probe(const ProbeArgs& a, std::ostream& out) {
  const auto ckpt = load_checkpoint(a.ckpt);
  const auto cfg = parse_config(ckpt.config);
  if (a.layer >= cfg.model.n_layers) {
    throw UsageError("--layer " + std::to_string(a.layer) + " outside [0, " + std::to_string(cfg.model.n_layers) + ")");
  }
  auto model = model_from_checkpoint<double>(ckpt);
  const auto corpus = corpus_for_checkpoint(ckpt, cfg, a.corpus);
  const Split split = corpus.sample_count(Split::val) > 0 ? Split::val : Split::train;
  // enough samples for at least 256 tokens of collapse statistics
  const std::size_t per_sample = cfg.model.seq_len - 1;
  const std::size_t want = std::max<std::size_t>(4, (256 + per_sample - 1) / per_sample);
  const std::size_t n = std::min(corpus.sample_count(split), want);
  if (n == 0) throw std::runtime_error("corpus holds no full sample to probe");
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  const auto batch = make_batch(corpus, split, ids);

  Tensor<double> inputs;
  {
    NoGradGuard no_grad;
    auto fwd = model.forward(batch.inputs, batch.batch, batch.seq, Mode::eval);
    inputs = fwd.blocks.at(a.layer).moe_input;
  }
  auto& layer = model.moe(a.layer);
  const std::size_t d = inputs.last_dim();
  const std::size_t k = model.inference_k();
  const auto stats = compute_batch_stats(inputs);
  RngStream draw_rng = RngStream(cfg.model.seed).fork(99);

  bool smoe_done = false, s2moe_done = !layer.stochastic();
  std::size_t rejected = 0;
  for (std::size_t m = 0; m < inputs.rows() && !(smoe_done && s2moe_done); ++m) {
    std::span<const double> token = inputs.data().subspan(m * d, d);
    try {
      if (!smoe_done) {
        out << jacobian_probe(layer, token, k).to_text();
        smoe_done = true;
      }
      if (!s2moe_done) {
        const auto draw = draw_noise(Shape{1, d}, stats, draw_rng);
        out << jacobian_probe(layer, token, k, ProbeOptions{}, &draw).to_text();
        s2moe_done = true;
      }
    } catch (const ProbeBoundaryError&) {
      ++rejected;
    }
  }
  if (!smoe_done || !s2moe_done) throw std::runtime_error("every probe point was rejected as a boundary point");
  out << ReportWriter("probe").field("layer", static_cast<std::uint64_t>(a.layer))
             .field("rejected_points", static_cast<std::uint64_t>(rejected)).str();
  out << collapse_metrics(model, batch.inputs, batch.batch, batch.seq).to_text();
  return 0;
}

inline int run_flops(const FlopsArgs& a, std::ostream& out) {
  if (a.config.empty() && a.preset.empty()) throw UsageError("flops needs --config or --preset");
  RunConfig cfg = preset(a.preset.empty() ? "desk" : a.preset);
  if (!a.config.empty()) cfg = load_config_file(a.config, cfg);
  const Mode mode = parse_mode(a.mode);
  if (a.k > cfg.model.experts) {
    throw UsageError("--k " + std::to_string(a.k) + " exceeds " + std::to_string(cfg.model.experts) + " experts");
  }
  const std::size_t seq = a.seq_len.value_or(cfg.model.seq_len);
  const std::size_t base_k = a.baseline_k.value_or(cfg.model.k_train);
  if (base_k > cfg.model.experts) throw UsageError("--baseline-k exceeds the expert count");
  const auto report = flops_per_token(cfg.model, a.k, seq, mode);
  const auto baseline = flops_per_token(cfg.model, base_k, seq, mode);
  out << report.to_text();
  const double reduction =
      baseline.total() ? 1.0 - static_cast<double>(report.total()) / static_cast<double>(baseline.total()) : 0.0;
  out << ReportWriter("flops-comparison")
             .field("baseline_k", static_cast<std::uint64_t>(base_k))
             .field("baseline_total", baseline.total())
             .field("reduction_vs_baseline", reduction)
             .field("reduction_percent", 100.0 * reduction)
             .str();
  return 0;
}

}  // namespace cli

/// Entry point of the s2moe tool. Returns 0 on success, 1 on usage errors
/// and 2 on runtime failures.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sparse mixture-of-experts language model toolkit", "s2moe"};
  app.require_subcommand(1);

  cli::TrainArgs train;
  auto* tr = app.add_subcommand("train", "train a model and write metrics and checkpoints");
  tr->add_option("--config", train.config, "key=value configuration file");
  tr->add_option("--preset", train.preset, "base settings")->check(CLI::IsMember({"desk", "paper-base"}));
  tr->add_option("--variant", train.variant, "routing variant")
      ->check(CLI::IsMember({"smoe", "s2moe", "smoe-dropout", "xmoe", "stablemoe"}));
  tr->add_option("--seed", train.seed, "random seed");
  tr->add_option("--corpus", train.corpus, "corpus file, or builtin:<bytes>");
  tr->add_option("--out", train.out, "output directory");
  tr->add_option("--steps", train.steps, "training steps");
  tr->add_option("--precision", train.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  tr->add_option("--resume", train.resume, "continue from a checkpoint (other options ignored)");

  cli::EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "evaluate a checkpoint at a given inference k");
  evc->add_option("--ckpt", ev.ckpt, "checkpoint file")->required();
  evc->add_option("--k", ev.k, "experts per token")->required();
  evc->add_option("--split", ev.split, "evaluation split")->required()->check(CLI::IsMember({"val", "test"}));
  evc->add_option("--corpus", ev.corpus, "corpus override");
  evc->add_option("--batch", ev.batch, "evaluation batch size")->check(CLI::PositiveNumber);
  evc->add_option("--max-samples", ev.max_samples, "limit on evaluated samples (0 = all)");

  cli::ProbeArgs pr;
  auto* prc = app.add_subcommand("probe", "Jacobian and collapse reports for one MoE layer");
  prc->add_option("--ckpt", pr.ckpt, "checkpoint file")->required();
  prc->add_option("--layer", pr.layer, "layer index")->required();
  prc->add_option("--corpus", pr.corpus, "corpus override");

  cli::FlopsArgs fl;
  auto* flc = app.add_subcommand("flops", "per-token multiply-accumulate counts");
  flc->add_option("--config", fl.config, "key=value configuration file");
  flc->add_option("--preset", fl.preset, "base settings")->check(CLI::IsMember({"desk", "paper-base"}));
  flc->add_option("--k", fl.k, "experts per token")->required();
  flc->add_option("--baseline-k", fl.baseline_k, "k to compare against (default: training k)");
  flc->add_option("--seq-len", fl.seq_len, "attention context length");
  flc->add_option("--mode", fl.mode, "train or eval")->check(CLI::IsMember({"train", "eval"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*tr) return cli::run_train(train, out);
    if (*evc) return cli::run_eval(ev, out);
    if (*prc) return cli::run_probe(pr, out);
    if (*flc) return cli::run_flops(fl, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace s2moe
