#include <gtest/gtest.h>

#include "dlplora/engine.hpp"
#include "dlplora/pipeline.hpp"
#include "support.hpp"

using namespace dlplora;
using testing_support::TempDir;

namespace {

// Small backbone over a generated corpus, a trained router and one random
// (non-zero) adapter per task.
struct EngineFixture {
  std::vector<TaskCorpus> tasks = generate_tasks(4, 60, 7);
  Backbone backbone;
  RouterModel router;
  LoraRegistry registry;

  EngineFixture() {
    BackboneConfig c;
    c.vocab_size = 256;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.ffn_dim = 32;
    c.max_seq_len = 96;
    c.seed = 4;
    backbone = init_backbone(tasks, c);
    RouterTrainConfig rc;
    rc.vectorizer.dim = 512;
    rc.hidden_dims = {64, 32, 16};
    rc.epochs = 15;
    rc.seed = 1;
    router = build_router(tasks, rc, RouterConfig{}).model;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      LoraAdapter ad(tasks[t].task_label, tasks[t].task_label, 2);
      std::uint64_t k = 1000 * (t + 1);
      for (const auto& name : backbone.list_injection_points()) {
        Matrix a = testing_support::random_matrix(16, 2, ++k, 0.3f);
        Matrix b = testing_support::random_matrix(2, 16, ++k, 0.3f);
        ad.add_layer(name, std::move(a), std::move(b));
      }
      registry.register_adapter(ad);
    }
  }

  TokenId word(std::size_t task, std::size_t i) const {
    return backbone.vocab().encode(tasks[task].examples[i].prompt).front();
  }
};

const EngineFixture& fixture() {
  static const EngineFixture f;
  return f;
}

EngineConfig forced_config(std::size_t n) {
  EngineConfig cfg;
  cfg.max_new_tokens = n;
  return cfg;
}

}  // namespace

TEST(SentenceStart, DelimiterRule) {
  EXPECT_TRUE(detect_sentence_start(std::nullopt, 42));
  EXPECT_TRUE(detect_sentence_start(Vocabulary::kPeriod, 42));
  EXPECT_TRUE(detect_sentence_start(Vocabulary::kNewline, 42));
  EXPECT_TRUE(detect_sentence_start(Vocabulary::kQuestion, 42));
  EXPECT_TRUE(detect_sentence_start(Vocabulary::kBang, 42));
  EXPECT_FALSE(detect_sentence_start(TokenId{40}, 41));
  const std::vector<TokenId> custom = {40};
  EXPECT_TRUE(detect_sentence_start(TokenId{40}, 41, custom));
  EXPECT_FALSE(detect_sentence_start(Vocabulary::kPeriod, 41, custom));
  const std::vector<TokenId> stream = {9, 9, Vocabulary::kPeriod, 9, Vocabulary::kBang, Vocabulary::kPeriod};
  const std::vector<TokenId> delims = {Vocabulary::kPeriod, Vocabulary::kBang};
  EXPECT_EQ(count_sentence_starts(stream, delims), 3u);  // positions 0, 3, 5
}

TEST(Engine, OneSentenceWithoutDelimiterRoutesOnce) {
  const auto& f = fixture();
  SessionState s;
  const TokenId w = f.word(0, 0);
  const std::vector<TokenId> forced(6, w);
  const auto out = run_inference("alpha beta gamma", s, f.backbone, &f.registry, &f.router,
                                 forced_config(6), forced);
  EXPECT_EQ(out.generated, forced);
  EXPECT_EQ(s.router_invocations, 1u);
  EXPECT_EQ(out.trace.entries.size(), 1u);
  EXPECT_EQ(s.sentence_index, 1u);
}

TEST(Engine, TwoGeneratedDelimitersGiveThreeInvocations) {
  const auto& f = fixture();
  SessionState s;
  const TokenId w = f.word(1, 0);
  const std::vector<TokenId> forced = {w, Vocabulary::kPeriod, w, w, Vocabulary::kQuestion, w, w};
  const auto out = run_inference("alpha beta", s, f.backbone, &f.registry, &f.router,
                                 forced_config(forced.size()), forced);
  EXPECT_EQ(s.router_invocations, 3u);
  ASSERT_EQ(out.trace.entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out.trace.entries[i].sentence_index, i);
  EXPECT_EQ(out.trace.entries[1].position, 4u);
  EXPECT_EQ(out.trace.entries[2].position, 7u);
}

TEST(Engine, InvocationsEqualSentenceStartsForAnyLength) {
  const auto& f = fixture();
  const std::vector<TokenId> delims = EngineConfig{}.delimiters;
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<TokenId> forced;
    for (std::size_t n = 0, len = 5 + rng.below(30); n < len; ++n)
      forced.push_back(rng.below(4) == 0 ? delims[rng.below(delims.size())] : f.word(rng.below(4), rng.below(20)));
    SessionState s;
    const std::string prompt = f.tasks[0].examples[trial].prompt;
    run_inference(prompt, s, f.backbone, &f.registry, &f.router, forced_config(forced.size()), forced);
    std::vector<TokenId> all = f.backbone.vocab().encode(prompt);
    all.insert(all.end(), forced.begin(), forced.end());
    EXPECT_EQ(s.router_invocations, count_sentence_starts(all, delims));
    EXPECT_EQ(s.trace.entries.size(), s.router_invocations);
  }
}

TEST(Engine, TokenModeRoutesEveryToken) {
  const auto& f = fixture();
  SessionState s;
  EngineConfig cfg = forced_config(5);
  cfg.mode = RoutingMode::token;
  const std::vector<TokenId> forced(5, f.word(2, 1));
  run_inference("alpha beta gamma", s, f.backbone, &f.registry, &f.router, cfg, forced);
  EXPECT_EQ(s.router_invocations, 3u + 5u);
}

TEST(Engine, NoneModeNeverRoutes) {
  const auto& f = fixture();
  SessionState s;
  EngineConfig cfg = forced_config(4);
  cfg.mode = RoutingMode::none;
  const auto out = run_inference("alpha . beta", s, f.backbone, nullptr, nullptr, cfg);
  EXPECT_EQ(s.router_invocations, 0u);
  EXPECT_TRUE(out.trace.entries.empty());
  const auto plain = f.backbone.generate(f.backbone.vocab().encode("alpha . beta"), 4);
  std::vector<TokenId> expect(plain.begin() + 3, plain.end());
  std::erase(expect, Vocabulary::kEos);
  EXPECT_EQ(out.generated, expect);
}

TEST(Engine, PlanIsStableBetweenTriggers) {
  const auto& f = fixture();
  SessionState s;
  const TokenId w = f.word(3, 2);
  const std::vector<TokenId> forced = {w, w, Vocabulary::kPeriod, w, w, w, Vocabulary::kNewline, w, w};
  const std::string prompt = f.tasks[1].examples[0].prompt + " " + f.tasks[2].examples[0].prompt;
  const auto out = run_inference(prompt, s, f.backbone, &f.registry, &f.router,
                                 forced_config(forced.size()), forced);
  const std::size_t n_prompt = f.backbone.vocab().encode(prompt).size();
  // One forward step per fed token: the prompt plus all but the last emission.
  ASSERT_EQ(s.step_plan_ids.size(), n_prompt + forced.size() - 1);
  const auto& entries = out.trace.entries;
  // Two prompt sentences; the first emission follows a delimiter, then two more starts.
  ASSERT_EQ(entries.size(), 5u);
  for (std::size_t pos = 0; pos < s.step_plan_ids.size(); ++pos) {
    std::uint64_t expected = 0;
    for (const auto& e : entries)
      if (e.position <= pos) expected = e.plan_id;
    ASSERT_EQ(s.step_plan_ids[pos], expected) << "step " << pos;
  }
  for (std::size_t i = 1; i < entries.size(); ++i) EXPECT_GT(entries[i].plan_id, entries[i - 1].plan_id);
}

TEST(Engine, SingleAdapterMatchesMergedGeneration) {
  const auto& f = fixture();
  LoraRegistry one;
  one.register_adapter(f.registry.adapter_at(0));
  RouterModel r;
  r.vectorizer.dim = 64;
  r.mlp = MiniMlp({64, 4, 4, 4, 1});
  r.task_labels = {f.registry.label_at(0)};
  const Backbone merged = f.backbone.merged_with(one.adapter_at(0));
  for (std::size_t i = 0; i < 5; ++i) {
    const std::string prompt = f.tasks[i % 4].examples[i].prompt;
    SessionState s;
    EngineConfig cfg;
    cfg.max_new_tokens = 12;
    const auto out = run_inference(prompt, s, f.backbone, &one, &r, cfg);
    auto expect = merged.generate(f.backbone.vocab().encode(prompt), 12);
    expect.erase(expect.begin(), expect.begin() + static_cast<std::ptrdiff_t>(f.backbone.vocab().encode(prompt).size()));
    std::erase(expect, Vocabulary::kEos);
    EXPECT_EQ(out.generated, expect) << prompt;
  }
}

TEST(Engine, ResetGivesFreshSession) {
  const auto& f = fixture();
  SessionState s;
  const std::string prompt = f.tasks[0].examples[3].prompt;
  const auto first = run_inference(prompt, s, f.backbone, &f.registry, &f.router, forced_config(4));
  run_inference(prompt, s, f.backbone, &f.registry, &f.router, forced_config(4));
  EXPECT_GT(s.history_tokens.size(), 0u);
  EXPECT_EQ(s.router_invocations, s.trace.entries.size());
  reset(s);
  EXPECT_EQ(s.router_invocations, 0u);
  EXPECT_TRUE(s.trace.entries.empty());
  EXPECT_TRUE(s.history_tokens.empty());
  EXPECT_FALSE(s.active_plan);
  const auto again = run_inference(prompt, s, f.backbone, &f.registry, &f.router, forced_config(4));
  EXPECT_EQ(again.generated, first.generated);
  ASSERT_EQ(again.trace.entries.size(), first.trace.entries.size());
  for (std::size_t i = 0; i < again.trace.entries.size(); ++i) {
    EXPECT_EQ(again.trace.entries[i].probs, first.trace.entries[i].probs);
    EXPECT_EQ(again.trace.entries[i].plan_id, first.trace.entries[i].plan_id);
  }
}

TEST(Engine, HistoryFeedsRouterAcrossCalls) {
  const auto& f = fixture();
  SessionState s;
  const std::string prompt = f.tasks[2].examples[4].prompt;
  run_inference(f.tasks[0].examples[0].prompt, s, f.backbone, &f.registry, &f.router, forced_config(2));
  const std::size_t after_first = s.history_tokens.size();
  const std::size_t sentences_before = s.sentence_index;
  const auto second = run_inference(prompt, s, f.backbone, &f.registry, &f.router, forced_config(2));
  EXPECT_GT(s.history_tokens.size(), after_first);
  SessionState fresh;
  const auto alone = run_inference(prompt, fresh, f.backbone, &f.registry, &f.router, forced_config(2));
  EXPECT_NE(second.trace.entries.front().probs, alone.trace.entries.front().probs);
  EXPECT_EQ(second.trace.entries.front().sentence_index, sentences_before);
}

TEST(Engine, ErrorContracts) {
  const auto& f = fixture();
  SessionState s;
  EXPECT_THROW(run_inference("", s, f.backbone, &f.registry, &f.router, forced_config(2)), InputError);
  EXPECT_THROW(run_inference("a", s, f.backbone, nullptr, &f.router, forced_config(2)), ConfigError);
  EXPECT_THROW(run_inference("a", s, f.backbone, &f.registry, nullptr, forced_config(2)), ConfigError);
  EngineConfig bad = forced_config(2);
  bad.p_threshold = 1.5f;
  EXPECT_THROW(run_inference("a", s, f.backbone, &f.registry, &f.router, bad), ContractError);
  LoraRegistry partial = f.registry;
  partial.remove(f.registry.id_at(0));
  RouterModel peaked = f.router;
  peaked.config.p_threshold = 1e-6f;  // every task selected, including the missing one
  try {
    run_inference("a", s, f.backbone, &partial, &peaked, forced_config(2));
    FAIL() << "expected routing error";
  } catch (const RoutingError& e) {
    EXPECT_NE(std::string(e.what()).find(f.registry.label_at(0)), std::string::npos);
  }
}

TEST(Engine, CompositePromptRoutesEachSentenceToItsTask) {
  const auto& f = fixture();
  const std::vector<std::size_t> order = {2, 0, 3};
  std::string prompt;
  for (std::size_t t : order) prompt += f.tasks[t].examples[50].prompt + " ";
  SessionState s;
  EngineConfig cfg = forced_config(1);
  const std::vector<TokenId> forced = {f.word(0, 0)};
  const auto out = run_inference(prompt, s, f.backbone, &f.registry, &f.router, cfg, forced);
  // The emitted token follows the final delimiter and opens a fourth sentence.
  ASSERT_EQ(out.trace.entries.size(), 4u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& e = out.trace.entries[i];
    ASSERT_FALSE(e.selected.empty());
    const auto best = std::max_element(e.probs.begin(), e.probs.end()) - e.probs.begin();
    EXPECT_EQ(f.router.task_labels[static_cast<std::size_t>(best)], f.tasks[order[i]].task_label);
    EXPECT_NE(std::find(e.selected.begin(), e.selected.end(), f.tasks[order[i]].task_label), e.selected.end());
    EXPECT_EQ(e.prefix, f.backbone.vocab().decode(f.backbone.vocab().encode(f.tasks[order[i]].examples[50].prompt)));
  }
  const std::string table = format_trace(out.trace);
  for (std::size_t t : order) EXPECT_NE(table.find(f.tasks[t].task_label), std::string::npos);
}

TEST(TracePersistence, JsonlRoundtripAndErrors) {
  const auto& f = fixture();
  SessionState s;
  const TokenId w = f.word(0, 0);
  const std::vector<TokenId> forced = {w, Vocabulary::kPeriod, w};
  const auto out = run_inference("alpha beta", s, f.backbone, &f.registry, &f.router, forced_config(3), forced);
  TempDir dir;
  save_trace_jsonl(out.trace, dir / "trace.jsonl");
  EXPECT_EQ(load_trace_jsonl(dir / "trace.jsonl"), out.trace);
  write_text_file(dir / "bad.jsonl", trace_entry_to_json(out.trace.entries[0]).dump() + "\n{oops\n");
  try {
    load_trace_jsonl(dir / "bad.jsonl");
    FAIL() << "expected parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(load_trace_jsonl(dir / "missing.jsonl"), IoError);
}
