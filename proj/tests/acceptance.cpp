// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any of them fails.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include "CLI11.hpp"
#include "s2moe/s2moe.hpp"

using namespace s2moe;
namespace fs = std::filesystem;

namespace {

using Vec = std::vector<double>;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> notes;
};

std::string fmt(double v) { return format_double(v); }

template <class T>
Vec to_vec(const Tensor<T>& t) {
  return Vec(t.data().begin(), t.data().end());
}

double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor<double> random_tensor(const Shape& shape, RngStream& rng, double sd = 1.0) {
  Vec v(numel(shape));
  for (auto& e : v) e = rng.normal(0.0, sd);
  return Tensor<double>::from(shape, std::move(v));
}

void randomize(const NamedTensors<double>& params, RngStream& rng, double sd) {
  for (const auto& [name, p] : params) {
    auto t = p;
    for (auto& v : t.mutable_data()) v = rng.normal(0.0, sd);
  }
}

std::size_t uniform_int(RngStream& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

MoeLayerConfig layer_config(std::size_t d, std::size_t n, std::size_t h, bool stochastic, double init_std) {
  MoeLayerConfig c;
  c.router.experts = n;
  c.router.d_model = d;
  c.router.init_std = init_std;
  c.d_hidden = h;
  c.stochastic = stochastic;
  c.init_std = init_std;
  return c;
}

class Scratch {
 public:
  Scratch() : root_(fs::temp_directory_path() / ("s2moe_acceptance_" + std::to_string(::getpid()))) {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Scratch() { fs::remove_all(root_); }
  std::string operator/(const std::string& leaf) const { return (root_ / leaf).string(); }

 private:
  fs::path root_;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 1. Noise off and blend gate at 1: the two-path layer is plain SMoE.
Outcome reduction_equivalence() {
  Outcome o;
  RngStream rng(101);
  double worst_out = 0.0, worst_grad = 0.0;
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const std::size_t n = uniform_int(rng, 2, 8), d = uniform_int(rng, 2, 32), h = uniform_int(rng, 1, 16);
    const std::size_t k = uniform_int(rng, 1, n), seq = uniform_int(rng, 1, 8), batch = 2;
    auto cfg = layer_config(d, n, h, true, 0.3);
    cfg.noise_enabled = false;
    cfg.blend_bias_init = 40.0;
    RngStream init_s(500 + trial), init_p(900 + trial);
    MoeLayer<double> s2(cfg, init_s, RngStream(trial).fork(100));
    cfg.stochastic = false;
    MoeLayer<double> plain(cfg, init_p, RngStream(trial).fork(100));
    std::map<std::string, Tensor<double>> by_name;
    for (const auto& [name, p] : s2.parameters("")) by_name.emplace(name, p);
    for (const auto& [name, p] : plain.parameters("")) {
      auto dst = by_name.at(name);
      std::copy(p.data().begin(), p.data().end(), dst.mutable_data().begin());
    }
    auto x = random_tensor({batch * seq, d}, rng);
    auto proj = random_tensor({batch * seq, d}, rng);

    auto ys = s2.forward(x, batch, Mode::train, k);
    const auto out_s = to_vec(ys.output);
    sum(mul(ys.output, proj)).backward();
    auto yp = plain.forward(x, batch, Mode::train, k);
    worst_out = std::max(worst_out, max_abs_diff(out_s, to_vec(yp.output)));
    sum(mul(yp.output, proj)).backward();
    for (const auto& [name, p] : plain.parameters("")) {
      worst_grad = std::max(worst_grad, max_abs_diff(by_name.at(name).grad_or_zero(), p.grad_or_zero()));
    }
  }
  o.pass = worst_out <= 1e-12 && worst_grad <= 1e-10;
  o.detail = "50 configs, max |dy| " + fmt(worst_out) + " (tol 1e-12), max |dgrad| " + fmt(worst_grad) + " (tol 1e-10)";
  return o;
}

// 2. Reverse-mode gradients against central differences.
Outcome gradient_integrity() {
  Outcome o;
  double worst = 0.0;
  std::string where;
  auto record = [&](double err, const std::string& what) {
    if (err > worst) {
      worst = err;
      where = what;
    }
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(7000 + seed);
    const std::string tag = " seed " + std::to_string(seed);

    std::vector<std::int32_t> targets(6);
    for (auto& t : targets) t = static_cast<std::int32_t>(rng.below(5));
    auto logits = random_tensor({6, 5}, rng);
    record(grad_check<double>([&](const Tensor<double>& z) { return task_loss(z, targets).nats; }, logits, 1e-6),
           "task" + tag);

    auto scores = random_tensor({8, 4}, rng);
    const auto fixed = route_from_scores(scores, 1);
    record(grad_check<double>(
               [&](const Tensor<double>& s) {
                 auto dec = fixed;
                 dec.probs = softmax(s, -1);
                 return balance_loss(dec);
               },
               scores, 1e-6),
           "balance" + tag);

    auto pooled = random_tensor({4, 6}, rng), noisy = random_tensor({4, 6}, rng);
    record(grad_check<double>(
               [&](const Tensor<double>& x) { return uncertainty_loss(PooledPair<double>{x, noisy, 0.7}); }, pooled,
               1e-6),
           "uncertainty(x)" + tag);
    record(grad_check<double>(
               [&](const Tensor<double>& xh) { return uncertainty_loss(PooledPair<double>{pooled, xh, 0.7}); },
               noisy, 1e-6),
           "uncertainty(xhat)" + tag);

    for (auto variant : {Variant::s2moe, Variant::smoe}) {
      ModelConfig c;
      c.n_layers = 1;
      c.d_model = 8;
      c.n_heads = 2;
      c.d_exp = 6;
      c.experts = 2;
      c.k_train = 1;
      c.k_eval = 1;
      c.vocab = 5;
      c.seq_len = 4;
      c.dropout = 0.0;
      c.variant = variant;
      c.alpha = 0.5;
      c.beta = 0.5;
      c.seed = seed;
      LanguageModel<double> model(c);
      randomize(model.parameters(), rng, 0.5);
      std::vector<std::int32_t> tokens(8), next(8);
      for (auto& t : tokens) t = static_cast<std::int32_t>(rng.below(5));
      for (auto& t : next) t = static_cast<std::int32_t>(rng.below(5));
      if (variant == Variant::s2moe) {
        NoiseStats<double> stats{Vec(8, 0.1), Vec(8, 0.3)};
        model.moe(0).fix_noise(draw_noise<double>({8, 8}, stats, rng));
      }
      auto params = model.parameters();
      const auto r = grad_check_params<double>(
          [&] {
            auto fwd = model.forward(tokens, 2, 4, Mode::train);
            return model.loss(fwd, next).total;
          },
          params, 1e-6);
      record(r.max_relative_error, "end-to-end " + std::string(to_string(variant)) + " " + r.worst + tag);
    }
  }
  o.pass = worst < 1e-3;
  o.detail = "20 seeds, max rel err " + fmt(worst) + " at " + where + " (tol 1e-3)";
  return o;
}

// 3. Router output invariants over 10^4 tokens.
Outcome routing_invariants() {
  Outcome o;
  std::size_t tokens = 0, violations = 0;
  double worst_sum = 0.0, worst_shift = 0.0;
  const std::size_t n = 8, d = 16;
  for (auto v : {RouterVariant::smoe, RouterVariant::smoe_dropout, RouterVariant::xmoe, RouterVariant::stablemoe}) {
    RngStream rng(300 + static_cast<int>(v));
    RouterConfig rc;
    rc.variant = v;
    rc.experts = n;
    rc.d_model = d;
    rc.d_low = 8;
    rc.init_std = 0.5;
    Router<double> router(rc, rng);
    for (std::size_t k = 1; k <= n; ++k) {
      const std::size_t m = k == n ? 2500 - 7 * 312 : 312;
      auto x = random_tensor({m, d}, rng, 2.0);
      const auto dec = router.route(x, k);
      for (std::size_t r = 0; r < m; ++r) {
        double s = 0.0;
        for (auto p : dec.row_probs(r)) s += p;
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        std::size_t nonzero = 0;
        const auto gates = dec.row_gates(r);
        const auto probs = dec.row_probs(r);
        for (std::size_t i = 0; i < n; ++i) {
          if (gates[i] != 0.0) {
            ++nonzero;
            if (gates[i] != probs[i]) ++violations;
          }
        }
        if (nonzero != k) ++violations;
      }
      auto sc = router.scores(x);
      auto shifted = Tensor<double>::from(sc.shape(), to_vec(sc));
      for (std::size_t r = 0; r < m; ++r) {
        const double c = rng.normal(0.0, 50.0);
        for (std::size_t i = 0; i < n; ++i) shifted.mutable_data()[r * n + i] += c;
      }
      const auto a = route_from_scores(sc, k), b = route_from_scores(shifted, k);
      if (a.indices != b.indices) ++violations;
      worst_shift = std::max(worst_shift, max_abs_diff(to_vec(a.probs), to_vec(b.probs)));
      tokens += m;
    }
  }
  o.pass = tokens == 10000 && violations == 0 && worst_sum <= 1e-6 && worst_shift <= 1e-9;
  o.detail = std::to_string(tokens) + " tokens, 4 variants, max |sum p - 1| " + fmt(worst_sum) + ", " +
             std::to_string(violations) + " gate/selection violations, max shift drift " + fmt(worst_shift);
  return o;
}

// 4. Closed-form loss values.
Outcome loss_identities() {
  Outcome o;
  const double single =
      uncertainty_loss(PooledPair<double>{Tensor<double>::from({1, 3}, {1.0, 2.0, 3.0}),
                                          Tensor<double>::from({1, 3}, {-1.0, 0.5, 0.0}), 1.0})
          .item();
  const double diag = info_nce(Tensor<double>::from({2, 2}, {10.0, 0.0, 0.0, 10.0})).item();
  const double diag_ref = std::log1p(std::exp(-10.0));

  const std::size_t n = 16, m = 64;
  RouterDecision<double> uniform;
  uniform.tokens = m;
  uniform.experts = n;
  uniform.k_used = 1;
  uniform.probs = Tensor<double>::from({m, n}, Vec(m * n, 1.0 / n));
  RouterDecision<double> collapsed = uniform;
  Vec onehot(m * n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    uniform.indices.push_back(static_cast<std::int32_t>(r % n));
    uniform.gates.push_back(1.0 / n);
    onehot[r * n + 3] = 1.0;
    collapsed.indices.push_back(3);
    collapsed.gates.push_back(1.0);
  }
  collapsed.probs = Tensor<double>::from({m, n}, onehot);
  const double lb_uniform = balance_loss(uniform).item();
  const double lb_collapse = balance_loss(collapsed).item();

  o.pass = single == 0.0 && std::abs(diag - diag_ref) <= 1e-9 && std::abs(lb_uniform - 1.0) <= 1e-6 &&
           std::abs(lb_collapse - static_cast<double>(n)) <= 1e-3;
  o.detail = "L_u(B=1) " + fmt(single) + ", L_u(10I) - ln(1+e^-10) " + fmt(diag - diag_ref) + ", L_b uniform " +
             fmt(lb_uniform) + ", L_b collapse " + fmt(lb_collapse) + " (N=16)";
  return o;
}

// 5. Rank of the routing part of the layer Jacobian.
Outcome jacobian_rank() {
  Outcome o;
  const std::size_t d = 32, n = 4, points = 10;
  std::size_t max_smoe = 0, max_s2 = 0, accepted_smoe = 0, accepted_s2 = 0, rejected = 0;
  for (bool stochastic : {false, true}) {
    const std::uint64_t seed = stochastic ? 12 : 11;
    auto cfg = layer_config(d, n, 2 * d, stochastic, 1.0 / std::sqrt(static_cast<double>(d)));
    RngStream init(seed);
    MoeLayer<double> layer(cfg, init, RngStream(seed).fork(100));
    if (stochastic) {
      RngStream g(seed + 1);
      for (auto& v : layer.blend_gate().weight().mutable_data()) v = g.normal(0.0, 0.3);
    }
    RngStream rng(seed + 7);
    std::size_t& accepted = stochastic ? accepted_s2 : accepted_smoe;
    std::size_t& max_rank = stochastic ? max_s2 : max_smoe;
    for (std::size_t attempt = 0; accepted < points && attempt < 20 * points; ++attempt) {
      auto x = to_vec(random_tensor({d}, rng));
      NoiseDraw<double> nd;
      if (stochastic) nd = draw_noise<double>({d}, NoiseStats<double>{Vec(d, 0.1), Vec(d, 0.5)}, rng);
      try {
        const auto rep = jacobian_probe(layer, x, 2, {}, stochastic ? &nd : nullptr);
        const auto& sv = rep.singular_values;
        const double top = sv.empty() ? 0.0 : *std::max_element(sv.begin(), sv.end());
        std::size_t rank = 0;
        for (auto s : sv) rank += s > 1e-6 * top ? 1 : 0;
        max_rank = std::max(max_rank, rank);
        ++accepted;
      } catch (const ProbeBoundaryError&) {
        ++rejected;
      }
    }
  }
  o.pass = accepted_smoe == points && accepted_s2 == points && max_smoe <= n && max_s2 <= 2 * n;
  o.detail = "d=32 N=4, max rank SMoE " + std::to_string(max_smoe) + " (<= 4) over " + std::to_string(accepted_smoe) +
             " points, fixed-draw S2MoE " + std::to_string(max_s2) + " (<= 8) over " + std::to_string(accepted_s2) +
             " points, " + std::to_string(rejected) + " boundary points redrawn";
  return o;
}

// 6. Inference cost of dropping from two experts to one.
Outcome flops_claim() {
  Outcome o;
  const auto cfg = preset("paper-base").model;
  const double reduction = flops_reduction(cfg, 2, 1, cfg.seq_len);
  auto s2 = cfg, plain = cfg;
  s2.variant = Variant::s2moe;
  plain.variant = Variant::smoe;
  bool equal = true;
  for (std::size_t k = 0; k <= cfg.experts; ++k) {
    equal = equal && flops_per_token(s2, k, cfg.seq_len, Mode::eval).total() ==
                         flops_per_token(plain, k, cfg.seq_len, Mode::eval).total();
  }
  o.pass = reduction >= 0.24 && reduction <= 0.33 && equal;
  o.detail = "k 2 -> 1 reduction " + fmt(100.0 * reduction) + "% (in [24, 33]), eval S2MoE == SMoE at every k: " +
             (equal ? "yes" : "no");
  return o;
}

struct DeskRun {
  double initial_bpc = 0.0, final_bpc = 0.0, val_bpc = 0.0, cosine = 0.0, seconds = 0.0;
};

DeskRun desk_run(Variant variant, const Corpus& corpus, const std::string& corpus_path, const std::string& out) {
  auto cfg = preset("desk");
  cfg.model.variant = variant;
  cfg.model.seed = 7;
  cfg.corpus = corpus_path;
  cfg.out_dir = out;
  const auto start = Clock::now();
  Trainer<float> trainer(cfg, corpus);
  const auto summary = run_training(trainer);
  DeskRun r;
  r.initial_bpc = summary.rows.front().bpc;
  r.final_bpc = summary.rows.back().bpc;
  const auto ev = evaluate(trainer.model(), corpus, Split::val, cfg.model.k_eval, cfg.batch);
  r.val_bpc = ev.bpc;
  r.cosine = ev.collapse ? ev.collapse->mean_expert_cosine : std::nan("");
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

// 7. Desk-scale training of S2MoE and SMoE at the same budget and seed.
Outcome desk_training(const Scratch& scratch) {
  Outcome o;
  const char* env = std::getenv("S2MOE_CORPUS");
  const std::string path = env && *env ? env : "builtin:1000000";
  const auto desk = preset("desk");
  const auto corpus = ingest_corpus(path, desk.splits, desk.model.seq_len);
  const auto start = Clock::now();
  const auto s2 = desk_run(Variant::s2moe, corpus, path, scratch / "desk_s2moe");
  const auto plain = desk_run(Variant::smoe, corpus, path, scratch / "desk_smoe");
  const double minutes = std::chrono::duration<double>(Clock::now() - start).count() / 60.0;

  const bool a = s2.final_bpc <= 0.8 * s2.initial_bpc;
  o.pass = a && minutes < 30.0;
  o.detail = "corpus " + path + ", S2MoE train BPC " + fmt(s2.initial_bpc) + " -> " + fmt(s2.final_bpc) +
             " (ratio " + fmt(s2.final_bpc / s2.initial_bpc) + ", <= 0.8), both runs " + fmt(minutes) +
             " min (< 30)";
  const bool b = s2.val_bpc <= plain.val_bpc + 0.02;
  const bool c = s2.cosine <= plain.cosine;
  o.notes.push_back(std::string("soft 7b ") + (b ? "holds" : "does not hold") + ": val BPC S2MoE " + fmt(s2.val_bpc) +
                    ", SMoE " + fmt(plain.val_bpc) + " (need S2MoE <= SMoE + 0.02)");
  o.notes.push_back(std::string("soft 7c ") + (c ? "holds" : "does not hold") + ": mean expert cosine S2MoE " +
                    fmt(s2.cosine) + ", SMoE " + fmt(plain.cosine) + " (need S2MoE <= SMoE)");
  return o;
}

RunConfig persistence_config(const std::string& out) {
  RunConfig c = preset("desk");
  c.model.n_layers = 1;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_exp = 16;
  c.model.experts = 4;
  c.model.seq_len = 17;
  c.model.dropout = 0.1;
  c.model.seed = 11;
  c.corpus = "builtin:40000";
  c.batch = 4;
  c.steps = 40;
  c.lr = 1e-2;
  c.eval_interval = 5;
  c.checkpoint_interval = 10;
  c.precision = Precision::f64;
  c.out_dir = out;
  return c;
}

// Checkpoint bytes with the output directory normalized away.
std::vector<std::uint8_t> state_bytes(const std::string& path) {
  auto c = load_checkpoint(path);
  auto cfg = parse_config(c.config);
  cfg.out_dir = "-";
  c.config = config_text(cfg);
  return c.encode();
}

// 8. Determinism, resume and checkpoint round trip.
Outcome determinism(const Scratch& scratch) {
  Outcome o;
  const auto corpus = ingest_corpus("builtin:40000", SplitFractions{}, 17);
  std::size_t mismatches = 0;
  std::vector<std::string> failed;
  for (auto variant : {Variant::s2moe, Variant::smoe, Variant::smoe_dropout, Variant::xmoe, Variant::stablemoe}) {
    const std::string v(to_string(variant));
    auto cfg_for = [&](const std::string& leaf) {
      auto c = persistence_config(scratch / (v + "_" + leaf));
      c.model.variant = variant;
      return c;
    };
    Trainer<double> a(cfg_for("a"), corpus), b(cfg_for("b"), corpus);
    run_training(a);
    run_training(b);
    if (slurp(scratch / (v + "_a/metrics.csv")) != slurp(scratch / (v + "_b/metrics.csv"))) failed.push_back(v + " seed");

    Trainer<double> first(cfg_for("part"), corpus);
    run_training(first, 20);
    auto resumed = Trainer<double>::resume(load_checkpoint(scratch / (v + "_part/checkpoint.bin")), corpus);
    run_training(resumed);
    if (slurp(scratch / (v + "_a/metrics.csv")) != slurp(scratch / (v + "_part/metrics.csv")) ||
        state_bytes(scratch / (v + "_a/checkpoint.bin")) != state_bytes(scratch / (v + "_part/checkpoint.bin")))
      failed.push_back(v + " resume");

    const auto path = scratch / (v + "_a/checkpoint.bin");
    const auto bytes = read_file_bytes(path);
    const auto copy = scratch / (v + "_copy.bin");
    save_checkpoint(copy, load_checkpoint(path));
    if (read_file_bytes(copy) != bytes || Checkpoint::decode(bytes).encode() != bytes) failed.push_back(v + " round-trip");
  }
  mismatches = failed.size();
  o.pass = mismatches == 0;
  o.detail = "5 variants at 64-bit: seed replay, resume at step 20 of 40, save/load round trip; " +
             std::to_string(mismatches) + " mismatches";
  for (const auto& f : failed) o.notes.push_back("mismatch: " + f);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks", "s2moe_acceptance"};
  std::set<int> only;
  app.add_option("--only", only, "run just these criteria (1-8)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  Scratch scratch;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"reduction equivalence", reduction_equivalence},
      {"gradient integrity", gradient_integrity},
      {"routing invariants", routing_invariants},
      {"loss identities", loss_identities},
      {"jacobian rank structure", jacobian_rank},
      {"flops claim", flops_claim},
      {"desk-scale training", [&] { return desk_training(scratch); }},
      {"determinism and persistence", [&] { return determinism(scratch); }},
  };
  const std::vector<double> budget_s{60, 300, 60, 60, 300, 1, 1800, 300};

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
    const bool in_time = seconds < budget_s[i];
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::cout << (pass ? "PASS " : "FAIL ") << id << ' ' << criteria[i].first << ": " << o.detail << " ["
              << fmt(seconds) << " s" << (in_time ? "" : ", over budget") << "]\n";
    for (const auto& note : o.notes) std::cout << "     " << note << '\n';
    std::cout.flush();
  }
  return failures == 0 ? 0 : 1;
}
