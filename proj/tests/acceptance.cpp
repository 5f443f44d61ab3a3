// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dlplora/bench.hpp"
#include "dlplora/engine.hpp"
#include "dlplora/evaluation.hpp"
#include "dlplora/metrics.hpp"
#include "dlplora/pipeline.hpp"
#include "support.hpp"

using namespace dlplora;
using testing_support::naive_matmul;
using testing_support::norm_relative_error;
using testing_support::random_matrix;
using testing_support::TempDir;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome fused_forward_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const std::string layer = "layer0.query";
  double worst_naive = 0.0, worst_batch = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = std::vector<std::size_t>{2, 8, 32}[rng.below(3)];
    const std::size_t r = rng.below(2) ? 8 : 2;
    const std::size_t h = rng.below(2) ? 64 : 16;
    const std::uint64_t seed = 1000 * trial;
    LoraRegistry reg;
    std::vector<LoraAdapter> ads;
    for (std::size_t i = 0; i < n; ++i) {
      LoraAdapter ad("a" + std::to_string(i), "t" + std::to_string(i), r, 0.5f + rng.uniform01());
      ad.add_layer(layer, random_matrix(h, r, seed + 2 * i, 0.3f), random_matrix(r, h, seed + 2 * i + 1, 0.3f));
      ads.push_back(ad);
      reg.register_adapter(ad);
    }
    const Matrix base = random_matrix(h, h, seed + 999, 0.3f);
    std::vector<PlannedInput> inputs;
    for (int b = 0; b < 4; ++b) {
      FusionPlan plan;
      std::vector<std::size_t> slots(n);
      std::iota(slots.begin(), slots.end(), 0);
      for (std::size_t i = n; i > 1; --i) std::swap(slots[i - 1], slots[rng.below(i)]);
      const std::size_t k = 1 + rng.below(std::min<std::size_t>(4, n));
      std::vector<float> raw(k);
      for (auto& w : raw) w = 0.05f + rng.uniform01();
      const float s = std::accumulate(raw.begin(), raw.end(), 0.0f);
      for (std::size_t i = 0; i < k; ++i) {
        plan.selected_slots.push_back(slots[i]);
        plan.weights.push_back(raw[i] / s);
      }
      inputs.push_back({random_matrix(1 + rng.below(8), h, seed + 500 + b), plan});
    }
    const auto batched = batched_fused_forward(inputs, base, reg, layer, false);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto& in = inputs[i];
      Matrix naive = naive_matmul(in.x, base);
      for (std::size_t j = 0; j < in.plan.selected_slots.size(); ++j) {
        const LoraAdapter& ad = ads[in.plan.selected_slots[j]];
        const Matrix d = naive_matmul(naive_matmul(in.x, ad.layer(layer).a), ad.layer(layer).b);
        const float c = in.plan.weights[j] * ad.scale();
        for (std::size_t q = 0; q < naive.size(); ++q) naive.data()[q] += c * d.data()[q];
      }
      const Matrix fused = fused_forward(in.x, base, reg, in.plan, layer);
      worst_naive = std::max(worst_naive, norm_relative_error(fused, naive));
      worst_batch = std::max(worst_batch, max_abs_difference(batched[i], fused));
    }
  }
  const double secs = seconds_since(t0);
  return {worst_naive < 1e-5 && worst_batch < 1e-6 && secs < 30.0,
          "fused vs naive " + fmt("%.2e", worst_naive) + ", batched vs per-call " + fmt("%.2e", worst_batch) +
              ", " + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------------------

LoraAdapter random_full_adapter(const Backbone& bb, std::size_t rank, bool ffn, std::uint64_t seed,
                                bool zero_b = false) {
  LoraAdapter ad("x", "t", rank, 0.5f + 0.25f * static_cast<float>(seed % 4));
  std::uint64_t k = seed * 97;
  for (const auto& name : bb.list_injection_points(ffn)) {
    const Matrix& w = bb.projection_weight(InjectionPoint::parse(name));
    Matrix a = random_matrix(w.rows(), rank, ++k, 0.2f);
    Matrix b = zero_b ? Matrix(rank, w.cols()) : random_matrix(rank, w.cols(), ++k, 0.2f);
    ad.add_layer(name, std::move(a), std::move(b));
  }
  return ad;
}

Outcome merge_equivalence() {
  Rng rng(202);
  double worst_side = 0.0, worst_unmerge = 0.0, worst_zero = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    BackboneConfig c;
    c.vocab_size = 64;
    c.d_model = std::vector<std::size_t>{8, 16, 32}[rng.below(3)];
    c.n_heads = 2;
    c.n_layers = 1 + rng.below(2);
    c.ffn_dim = 2 * c.d_model;
    c.max_seq_len = 16;
    c.seed = 300 + trial;
    const Backbone bb(c);
    const bool ffn = trial % 2 == 1;
    const LoraAdapter ad = random_full_adapter(bb, 1 + rng.below(4), ffn, trial);
    std::vector<TokenId> toks(1 + rng.below(12));
    for (auto& t : toks) t = static_cast<TokenId>(Vocabulary::kReservedCount + rng.below(64 - Vocabulary::kReservedCount));

    const SingleAdapterPath side(ad, c);
    worst_side = std::max(worst_side, norm_relative_error(bb.forward(toks, &side), bb.merged_with(ad).forward(toks)));
    for (const auto& [name, pair] : ad.layers()) {
      const Matrix& w = bb.projection_weight(InjectionPoint::parse(name));
      worst_unmerge = std::max(worst_unmerge, max_abs_difference(unmerge(merge(w, ad, name), ad, name), w));
    }
    const LoraAdapter zero = random_full_adapter(bb, 2, ffn, trial, true);
    const SingleAdapterPath zpath(zero, c);
    worst_zero = std::max(worst_zero, max_abs_difference(bb.forward(toks, &zpath), bb.forward(toks)));
  }
  return {worst_side < 1e-5 && worst_unmerge < 1e-6 && worst_zero < 1e-6,
          "side vs merged " + fmt("%.2e", worst_side) + ", merge/unmerge " + fmt("%.2e", worst_unmerge) +
              ", zero-B " + fmt("%.2e", worst_zero)};
}

// ---------------------------------------------------------------------------

Outcome router_accuracy() {
  const auto t0 = Clock::now();
  const auto tasks = generate_tasks(8, 200, 7);
  RouterTrainConfig cfg;
  cfg.vectorizer.dim = 1024;
  cfg.hidden_dims = {256, 128, 64};
  cfg.seed = 3;
  const auto result = train_router(router_sentences(tasks), cfg);
  const double secs = seconds_since(t0);
  return {result.held_out_accuracy >= 0.95 && secs <= 120.0,
          "held-out accuracy " + fmt("%.4f", result.held_out_accuracy) + " on " +
              std::to_string(result.test_size) + " sentences, " + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------------------

Outcome top_p_weights() {
  const auto t0 = Clock::now();
  Rng rng(404);
  double worst_sum = 0.0, worst_perm = 0.0;
  std::size_t cases = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(15);
    std::vector<float> logits(n);
    for (auto& v : logits) v = rng.uniform(-4.0f, 4.0f);
    const std::vector<float> probs = softmax(logits);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<float> permuted(n);
    for (std::size_t i = 0; i < n; ++i) permuted[i] = probs[perm[i]];
    for (float p : {0.1f, 0.3f, 0.5f, 0.9f}) {
      const auto sel = select_top_p(probs, p);
      const auto w = fusion_weights(probs, sel);
      worst_sum = std::max(worst_sum, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
      std::vector<float> by_index(n, 0.0f);
      for (std::size_t i = 0; i < sel.size(); ++i) by_index[sel[i]] = w[i];
      const auto psel = select_top_p(permuted, p);
      const auto pw = fusion_weights(permuted, psel);
      std::vector<float> by_index_p(n, 0.0f);
      for (std::size_t i = 0; i < psel.size(); ++i) by_index_p[perm[psel[i]]] = pw[i];
      for (std::size_t i = 0; i < n; ++i)
        worst_perm = std::max(worst_perm, static_cast<double>(std::abs(by_index[i] - by_index_p[i])));
      ++cases;
    }
  }
  const double secs = seconds_since(t0);
  return {worst_sum <= 1e-6 && worst_perm <= 1e-6 && secs < 5.0,
          std::to_string(cases) + " cases, sum error " + fmt("%.2e", worst_sum) + ", permutation error " +
              fmt("%.2e", worst_perm) + ", " + fmt("%.2fs", secs)};
}

// ---------------------------------------------------------------------------

Outcome invocation_counts() {
  const auto tasks = generate_tasks(4, 40, 7);
  BackboneConfig c;
  c.vocab_size = 256;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 16;
  c.max_seq_len = 192;
  c.seed = 5;
  const Backbone bb = init_backbone(tasks, c);
  RouterTrainConfig rc;
  rc.vectorizer.dim = 256;
  rc.hidden_dims = {32, 16, 8};
  rc.epochs = 5;
  const RouterModel router = build_router(tasks, rc, RouterConfig{}).model;
  LoraRegistry reg;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    LoraAdapter ad = random_full_adapter(bb, 2, false, 700 + t);
    ad.set_adapter_id(tasks[t].task_label);
    ad.set_task_label(tasks[t].task_label);
    reg.register_adapter(ad);
  }
  const std::vector<TokenId> delims = EngineConfig{}.delimiters;
  const TokenId word = bb.vocab().encode(tasks[0].examples[0].prompt).front();

  Rng rng(505);
  std::size_t mismatches = 0, variant = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t sentences = 1 + rng.below(6);
    const std::string prompt = tasks[trial % 4].examples[trial % 40].prompt;
    const std::vector<TokenId> prompt_ids = bb.vocab().encode(prompt);
    std::size_t first_count = 0;
    for (std::size_t per : {std::size_t{2}, std::size_t{5}, std::size_t{12}}) {
      std::vector<TokenId> forced;
      for (std::size_t s = 0; s < sentences; ++s) {
        for (std::size_t i = 0; i < per; ++i) forced.push_back(word);
        forced.push_back(delims[rng.below(delims.size())]);
      }
      EngineConfig cfg;
      cfg.max_new_tokens = forced.size();
      SessionState session;
      run_inference(prompt, session, bb, &reg, &router, cfg, forced);
      std::vector<TokenId> all = prompt_ids;
      all.insert(all.end(), forced.begin(), forced.end());
      mismatches += session.router_invocations != count_sentence_starts(all, delims);
      if (per == 2) first_count = session.router_invocations;
      variant += session.router_invocations != first_count;
    }
  }
  return {mismatches == 0 && variant == 0,
          "50 streams x 3 sentence lengths, " + std::to_string(mismatches) + " count mismatches, " +
              std::to_string(variant) + " length-dependent counts"};
}

// ---------------------------------------------------------------------------

Outcome bench_overheads() {
  const auto t0 = Clock::now();
  BenchConfig cfg;  // reference defaults
  const auto scaling = scaling_ablation({50, 100}, cfg);
  bool a = true;
  std::ostringstream detail;
  for (const auto& row : scaling) {
    a = a && row.ratio_vs_single_lora < 2.0;
    detail << "N=" << row.n_adapters << " dlp/single " << fmt("%.2f", row.ratio_vs_single_lora) << "; ";
  }

  BenchConfig cmp = cfg;
  cmp.methods = {BenchMethod::single_lora_merged, BenchMethod::dlp_sentence, BenchMethod::token_rerouting_baseline};
  const BenchReport report = run_bench(cmp);
  const double dlp = report.method(BenchMethod::dlp_sentence).stats.median_ms;
  const double token = report.method(BenchMethod::token_rerouting_baseline).stats.median_ms;
  const bool b = token > dlp;
  detail << "token/dlp " << fmt("%.2f", token / dlp) << "; ";

  const auto lengths = sentence_length_ablation({4, 16, 64}, cfg);
  bool c = true;
  detail << "k=4/16/64 ratios";
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    detail << " " << fmt("%.2f", lengths[i].ratio_vs_single_lora);
    if (i > 0) c = c && lengths[i].ratio_vs_single_lora <= lengths[i - 1].ratio_vs_single_lora;
  }
  const double secs = seconds_since(t0);
  detail << "; " << fmt("%.0fs", secs);
  return {a && b && c && secs < 600.0, detail.str()};
}

// ---------------------------------------------------------------------------

Outcome pipeline_quality() {
  const auto t0 = Clock::now();
  const auto tasks = generate_tasks(8, 200, 7);
  const auto splits = split_all(tasks, 7);
  const auto train = train_parts(splits), test = test_parts(splits);
  BackboneConfig bc;
  bc.d_model = 64;
  bc.n_layers = 2;
  bc.n_heads = 4;
  bc.ffn_dim = 128;
  bc.max_seq_len = 64;
  bc.seed = 1;
  const Backbone bb = init_backbone(tasks, bc);
  const RouterModel router = build_router(train, RouterTrainConfig{}, RouterConfig{}).model;
  LoraTrainConfig lc;
  lc.rank = 8;
  lc.epochs = 20;
  const LoraRegistry reg = train_adapters(bb, train, lc);
  std::map<EvalMode, double> acc;
  for (auto m : {EvalMode::base, EvalMode::oracle, EvalMode::dlp}) {
    EvalOptions opt;
    opt.mode = m;
    acc[m] = *evaluate(test, bb, &reg, &router, opt).report.aggregate.accuracy;
  }
  const double base = acc[EvalMode::base], oracle = acc[EvalMode::oracle], dlp = acc[EvalMode::dlp];
  return {dlp >= base + 0.20 && dlp >= oracle - 0.03,
          "accuracy base " + fmt("%.3f", base) + ", oracle " + fmt("%.3f", oracle) + ", dlp " + fmt("%.3f", dlp) +
              ", " + fmt("%.0fs", seconds_since(t0))};
}

// ---------------------------------------------------------------------------

std::size_t lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b, std::size_t i,
                      std::size_t j) {
  if (i == a.size() || j == b.size()) return 0;
  if (a[i] == b[j]) return 1 + lcs_brute(a, b, i + 1, j + 1);
  return std::max(lcs_brute(a, b, i + 1, j), lcs_brute(a, b, i, j + 1));
}

Outcome metric_fixtures() {
  std::vector<std::string> failed;
  auto expect = [&](const char* what, double got, double want) {
    if (std::abs(got - want) > 1e-9) failed.push_back(what);
  };
  expect("accuracy", accuracy({"a", "b", "c", "x"}, {"a", "b", "c", "d"}), 0.75);
  expect("accuracy whitespace", accuracy({"  flour   butter \n"}, {"flour butter"}), 1.0);
  expect("bleu identical", bleu("the cat sat on the mat", "the cat sat on the mat"), 1.0);
  expect("bleu disjoint", bleu("dog ran", "the cat sat"), 0.0);
  expect("bleu brevity", bleu("the cat sat", "the cat sat down"), std::exp(1.0 - 4.0 / 3.0));
  const auto r1 = rouge1("a b c", "a c d e");
  expect("rouge1 precision", r1.precision, 2.0 / 3.0);
  expect("rouge1 recall", r1.recall, 0.5);
  expect("rouge1 f1", r1.f1, 4.0 / 7.0);
  const auto rl = rouge_l("a b c d", "a c d");
  expect("rougeL precision", rl.precision, 0.75);
  expect("rougeL recall", rl.recall, 1.0);
  expect("rougeL f1", rl.f1, 6.0 / 7.0);

  Rng rng(17);
  const std::vector<std::string> alphabet = {"a", "b", "c", "d"};
  std::size_t lcs_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> x(rng.below(11)), y(rng.below(11));
    for (auto& t : x) t = alphabet[rng.below(alphabet.size())];
    for (auto& t : y) t = alphabet[rng.below(alphabet.size())];
    lcs_bad += lcs_length(x, y) != lcs_brute(x, y, 0, 0);
  }
  std::string detail = std::to_string(11 - failed.size()) + "/11 fixtures, LCS " +
                       std::to_string(200 - lcs_bad) + "/200 against brute force";
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty() && lcs_bad == 0, detail};
}

// ---------------------------------------------------------------------------

double mlp_gradient_error() {
  MiniMlp m = MiniMlp::random({16, 8, 8, 8, 3}, 21, true);
  for (auto& b : m.biases())
    for (float& v : b.flat()) v = 0.1f;
  const Matrix x = random_matrix(5, 16, 22);
  const std::vector<std::size_t> labels = {0, 2, 1, 1, 0};
  auto loss_of = [&] {
    Matrix z = m.logits(x);
    return softmax_cross_entropy(z, labels);
  };
  MiniMlp::Activations acts;
  Matrix dz = m.logits(x, &acts);
  softmax_cross_entropy(dz, labels);
  const auto g = m.backward(acts, dz);
  const float h = 1e-3f;
  double worst = 0.0;
  for (std::size_t l = 0; l < MiniMlp::kLayers; ++l) {
    for (int which = 0; which < 2; ++which) {
      Matrix& p = which == 0 ? m.weights()[l] : m.biases()[l];
      const Matrix& gp = which == 0 ? g.weights[l] : g.biases[l];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const float saved = p.data()[i];
        p.data()[i] = saved + h;
        const double up = loss_of();
        p.data()[i] = saved - h;
        const double down = loss_of();
        p.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(gp.data()[i] - numeric) / std::max(1e-1, std::abs(numeric)));
      }
    }
  }
  return worst;
}

double lora_gradient_error() {
  BackboneConfig c;
  c.vocab_size = 64;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 8;
  c.max_seq_len = 16;
  c.seed = 2;
  const Backbone bb(c);
  LoraAdapter ad("g", "t", 2);
  std::uint64_t k = 40;
  for (const auto& name : bb.list_injection_points(true)) {
    const Matrix& w = bb.projection_weight(InjectionPoint::parse(name));
    Matrix a = random_matrix(w.rows(), 2, ++k, 0.5f);
    Matrix b = random_matrix(2, w.cols(), ++k, 0.5f);
    ad.add_layer(name, std::move(a), std::move(b));
  }
  const TrainingSequence seq{{10, 11, 12, 13, 14, 15}, 3};
  auto loss_of = [&] {
    const SingleAdapterPath path(ad, c);
    return sequence_loss(bb, seq, &path, nullptr, nullptr);
  };
  LoraGradients grads;
  {
    const SingleAdapterPath path(ad, c);
    sequence_loss(bb, seq, &path, nullptr, &grads);
  }
  const float h = 1e-3f;
  double worst = 0.0;
  for (const auto& name : bb.list_injection_points(true)) {
    const auto& pair = *grads.pairs[InjectionPoint::parse(name).id()];
    for (int which = 0; which < 2; ++which) {
      Matrix& m = which == 0 ? ad.mutable_layer(name).a : ad.mutable_layer(name).b;
      const Matrix& g = which == 0 ? pair.a : pair.b;
      for (std::size_t i = 0; i < m.size(); ++i) {
        const float saved = m.data()[i];
        m.data()[i] = saved + h;
        const double up = loss_of();
        m.data()[i] = saved - h;
        const double down = loss_of();
        m.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(g.data()[i] - numeric) / std::max(1e-1, std::abs(numeric)));
      }
    }
  }
  return worst;
}

Outcome gradient_checks() {
  const double mlp = mlp_gradient_error(), lora = lora_gradient_error();
  return {mlp <= 1e-2 && lora <= 1e-2,
          "router MLP relative error " + fmt("%.2e", mlp) + ", LoRA relative error " + fmt("%.2e", lora)};
}

// ---------------------------------------------------------------------------

Outcome roundtrips() {
  TempDir dir;
  std::vector<std::string> failed;
  auto check = [&](const char* what, bool ok) {
    if (!ok) failed.push_back(what);
  };

  BackboneConfig c;
  c.vocab_size = 128;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_dim = 32;
  c.max_seq_len = 64;
  const auto tasks = generate_tasks(3, 30, 11);
  const Backbone bb = init_backbone(tasks, c);

  const LoraAdapter ad = random_full_adapter(bb, 3, true, 9);
  save_adapter(ad, dir / "adapter.json");
  check("adapter", load_adapter(dir / "adapter.json") == ad);

  RouterTrainConfig rc;
  rc.vectorizer.dim = 128;
  rc.hidden_dims = {16, 8, 8};
  rc.epochs = 2;
  const RouterModel router = build_router(tasks, rc, RouterConfig{}).model;
  save_router(router, dir / "router.json");
  check("router", load_router(dir / "router.json") == router);

  LoraRegistry reg;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    LoraAdapter a = random_full_adapter(bb, 3, false, 20 + t);
    a.set_adapter_id(tasks[t].task_label);
    a.set_task_label(tasks[t].task_label);
    reg.register_adapter(a);
  }
  save_registry(reg, dir / "registry");
  const LoraRegistry loaded = load_registry(dir / "registry");
  bool reg_ok = loaded.size() == reg.size();
  for (std::size_t s = 0; reg_ok && s < reg.size(); ++s) reg_ok = loaded.adapter_at(s) == reg.adapter_at(s);
  check("registry", reg_ok);

  save_jsonl(tasks, dir / "corpus.jsonl");
  check("corpus", load_jsonl(dir / "corpus.jsonl") == tasks);

  EngineConfig cfg;
  cfg.max_new_tokens = 6;
  SessionState session;
  const auto out = run_inference(tasks[0].examples[0].prompt + " " + tasks[1].examples[0].prompt, session, bb,
                                 &reg, &router, cfg);
  save_trace_jsonl(out.trace, dir / "trace.jsonl");
  check("trace", !out.trace.entries.empty() && load_trace_jsonl(dir / "trace.jsonl") == out.trace);

  std::string detail = std::to_string(5 - failed.size()) + "/5 artifacts reload identically";
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty(), detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"fused-forward equivalence", fused_forward_equivalence},
      {"merged/side-path equivalence", merge_equivalence},
      {"router held-out accuracy", router_accuracy},
      {"top-p fusion weights", top_p_weights},
      {"router invocations per sentence", invocation_counts},
      {"latency overheads", bench_overheads},
      {"routed task quality", pipeline_quality},
      {"metric fixtures", metric_fixtures},
      {"gradient checks", gradient_checks},
      {"artifact roundtrips", roundtrips},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
