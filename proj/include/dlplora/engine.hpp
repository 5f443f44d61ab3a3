#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlplora/backbone.hpp"
#include "dlplora/errors.hpp"
#include "dlplora/fusion.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/router.hpp"
#include "dlplora/vocabulary.hpp"

namespace dlplora {

enum class RoutingMode {
  none,      // plain backbone, no classifier calls
  sentence,  // classify once per sentence start
  token,     // classify and re-plan at every token (per-token gating cost baseline)
};

inline std::string_view to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::none: return "none";
    case RoutingMode::sentence: return "sentence";
    case RoutingMode::token: return "token";
  }
  return "?";
}

struct EngineConfig {
  RoutingMode mode = RoutingMode::sentence;
  std::size_t max_new_tokens = 32;
  std::vector<TokenId> delimiters = {Vocabulary::kPeriod, Vocabulary::kBang, Vocabulary::kQuestion,
                                     Vocabulary::kNewline};
  std::optional<float> p_threshold;  // overrides the router's configured p
};

struct TraceEntry {
  std::size_t sentence_index = 0;
  std::size_t position = 0;  // token position (within this call's stream) that triggered routing
  std::string prefix;        // sentence text the classifier saw
  std::vector<float> probs;
  std::vector<std::string> selected;
  std::vector<float> weights;
  double classify_us = 0.0;
  std::uint64_t plan_id = 0;

  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

struct RoutingTrace {
  std::vector<TraceEntry> entries;
  friend bool operator==(const RoutingTrace&, const RoutingTrace&) = default;
};

struct SessionState {
  std::vector<TokenId> history_tokens;
  std::size_t sentence_index = 0;  // sentences started so far
  std::optional<FusionPlan> active_plan;
  std::size_t router_invocations = 0;
  RoutingTrace trace;
  std::vector<std::uint64_t> step_plan_ids;  // plan in effect at each forward step
  std::uint64_t next_plan_id = 0;
};

inline void reset(SessionState& session) { session = SessionState{}; }

// True iff `next` opens a sentence: it is the first token of the stream or
// follows a delimiter.
inline bool detect_sentence_start(std::optional<TokenId> prev, TokenId next,
                                  std::span<const TokenId> delimiters) {
  (void)next;
  if (!prev) return true;
  return std::find(delimiters.begin(), delimiters.end(), *prev) != delimiters.end();
}

inline bool detect_sentence_start(std::optional<TokenId> prev, TokenId next) {
  static constexpr std::array<TokenId, 4> kDefault = {Vocabulary::kPeriod, Vocabulary::kBang,
                                                      Vocabulary::kQuestion, Vocabulary::kNewline};
  return detect_sentence_start(prev, next, kDefault);
}

// Number of sentence starts in a token stream.
inline std::size_t count_sentence_starts(std::span<const TokenId> stream,
                                         std::span<const TokenId> delimiters) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < stream.size(); ++i)
    n += detect_sentence_start(i == 0 ? std::nullopt : std::optional<TokenId>(stream[i - 1]),
                               stream[i], delimiters);
  return n;
}

struct InferenceResult {
  std::string text;                // decoded generated tokens (without <eos>)
  std::vector<TokenId> generated;  // generated tokens (without <eos>)
  RoutingTrace trace;              // routing events of this call
};

namespace detail {

// Forwards to the currently active fused path; swapped at routing events.
class SwitchablePath final : public AdapterPath {
 public:
  explicit SwitchablePath(std::vector<std::uint64_t>* step_log) : step_log_(step_log) {}

  void set(std::unique_ptr<FusedPath> p) { current_ = std::move(p); }

  void add_delta(std::size_t point_id, const Matrix& in, Matrix& out) const override {
    if (point_id == 0 && step_log_) step_log_->push_back(current_ ? current_->plan_id() : 0);
    if (current_) current_->add_delta(point_id, in, out);
  }

 private:
  std::unique_ptr<FusedPath> current_;
  std::vector<std::uint64_t>* step_log_;
};

}  // namespace detail

// Generates a continuation of `prompt`. In sentence mode, each sentence start
// in prompt ++ generated stream triggers one classification and a new fusion
// plan, which then drives every injection point until the next trigger.
// Sentence starts inside the prompt classify the whole prompt sentence; a
// generated sentence is classified from its first token plus history. The
// backbone context is the prompt; the session history feeds the router only.
inline InferenceResult run_inference(std::string_view prompt, SessionState& session,
                                     const Backbone& backbone, const LoraRegistry* registry,
                                     const RouterModel* router, const EngineConfig& cfg,
                                     std::span<const TokenId> forced = {}) {
  const Vocabulary& vocab = backbone.vocab();
  const std::vector<TokenId> prompt_ids = vocab.encode(prompt);
  if (prompt_ids.empty()) throw InputError("empty prompt");
  const bool routed = cfg.mode != RoutingMode::none;
  if (routed && (!registry || !router)) throw ConfigError("routing needs a registry and a router");
  const float p = cfg.p_threshold.value_or(router ? router->config.p_threshold : 1.0f);
  if (routed && !(p > 0.0f && p <= 1.0f)) {
    throw ContractError("p threshold must lie in (0, 1], got " + std::to_string(p));
  }

  InferenceResult result;
  std::vector<TokenId> stream = prompt_ids;  // this call's prompt ++ generated
  const std::size_t history_base = session.history_tokens.size();
  std::size_t sentence_start = 0;
  detail::SwitchablePath path(&session.step_plan_ids);

  auto history_text = [&](std::size_t pos) {
    const std::size_t window = router->config.history_window;
    std::vector<TokenId> h;
    const std::size_t total = history_base + pos;
    const std::size_t from = total > window ? total - window : 0;
    for (std::size_t i = from; i < total; ++i)
      h.push_back(i < history_base ? session.history_tokens[i] : stream[i - history_base]);
    return vocab.decode(h);
  };

  auto route = [&](std::size_t pos, const std::vector<TokenId>& sentence_tokens) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string prefix = vocab.decode(sentence_tokens);
    const std::vector<float> probs = router->classify(prefix, history_text(pos));
    FusionPlan plan = plan_for_sentence(probs, p, router->task_labels, *registry,
                                        session.sentence_index - 1, router->config.weighting);
    plan.plan_id = ++session.next_plan_id;
    path.set(std::make_unique<FusedPath>(*registry, plan, backbone.config().point_count()));
    const auto t1 = std::chrono::steady_clock::now();
    ++session.router_invocations;
    TraceEntry e{plan.source_sentence_index, pos, prefix, probs, plan.selected_labels, plan.weights,
                 std::chrono::duration<double, std::micro>(t1 - t0).count(), plan.plan_id};
    session.trace.entries.push_back(e);
    result.trace.entries.push_back(std::move(e));
    session.active_plan = std::move(plan);
  };

  auto is_start = [&](std::size_t pos) {
    return detect_sentence_start(pos == 0 ? std::nullopt : std::optional<TokenId>(stream[pos - 1]),
                                 stream[pos], cfg.delimiters);
  };
  auto is_delim = [&](TokenId t) {
    return std::find(cfg.delimiters.begin(), cfg.delimiters.end(), t) != cfg.delimiters.end();
  };

  GenerationHooks hooks;
  if (routed) {
    hooks.before_prompt_token = [&](std::size_t pos, TokenId) {
      const bool start = is_start(pos);
      if (start) {
        sentence_start = pos;
        ++session.sentence_index;
      }
      if (start && cfg.mode == RoutingMode::sentence) {
        std::size_t end = pos;
        while (end < prompt_ids.size() && !is_delim(prompt_ids[end])) ++end;
        if (end < prompt_ids.size()) ++end;
        route(pos, std::vector<TokenId>(prompt_ids.begin() + static_cast<std::ptrdiff_t>(pos),
                                        prompt_ids.begin() + static_cast<std::ptrdiff_t>(end)));
      } else if (cfg.mode == RoutingMode::token) {
        route(pos, std::vector<TokenId>(stream.begin() + static_cast<std::ptrdiff_t>(sentence_start),
                                        stream.begin() + static_cast<std::ptrdiff_t>(pos + 1)));
      }
    };
  }
  hooks.on_token = [&](std::size_t pos, TokenId tok) {
    if (tok == Vocabulary::kEos) return;
    stream.push_back(tok);
    if (!routed) return;
    const bool start = is_start(pos);
    if (start) {
      sentence_start = pos;
      ++session.sentence_index;
    }
    if (start || cfg.mode == RoutingMode::token) {
      route(pos, std::vector<TokenId>(stream.begin() + static_cast<std::ptrdiff_t>(sentence_start),
                                      stream.begin() + static_cast<std::ptrdiff_t>(pos + 1)));
    }
  };

  GenerateOptions options;
  options.max_new = cfg.max_new_tokens;
  options.forced = forced;
  if (!forced.empty()) options.eos.reset();
  backbone.generate(prompt_ids, options, hooks, routed ? &path : nullptr);

  result.generated.assign(stream.begin() + static_cast<std::ptrdiff_t>(prompt_ids.size()), stream.end());
  result.text = vocab.decode(result.generated);
  session.history_tokens.insert(session.history_tokens.end(), stream.begin(), stream.end());
  return result;
}

inline constexpr int kTraceFormatVersion = 1;

inline Json trace_entry_to_json(const TraceEntry& e) {
  return {{"format_version", kTraceFormatVersion},
          {"sentence_index", e.sentence_index},
          {"position", e.position},
          {"prefix", e.prefix},
          {"probs", vector_to_json(e.probs)},
          {"selected", e.selected},
          {"weights", vector_to_json(e.weights)},
          {"classify_us", e.classify_us},
          {"plan_id", e.plan_id}};
}

inline TraceEntry trace_entry_from_json(const Json& j) {
  check_format_version(j, kTraceFormatVersion, "trace entry");
  TraceEntry e;
  e.sentence_index = j.at("sentence_index").get<std::size_t>();
  e.position = j.at("position").get<std::size_t>();
  e.prefix = j.at("prefix").get<std::string>();
  e.probs = vector_from_json(j.at("probs"), "probs");
  e.selected = j.at("selected").get<std::vector<std::string>>();
  e.weights = vector_from_json(j.at("weights"), "weights");
  e.classify_us = j.at("classify_us").get<double>();
  e.plan_id = j.at("plan_id").get<std::uint64_t>();
  return e;
}

inline void save_trace_jsonl(const RoutingTrace& trace, const std::filesystem::path& path) {
  std::string text;
  for (const auto& e : trace.entries) text += trace_entry_to_json(e).dump() + "\n";
  write_text_file(path, text);
}

inline RoutingTrace load_trace_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  RoutingTrace trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      trace.entries.push_back(trace_entry_from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return trace;
}

// Two columns: the text each routing event saw, and the selected adapters
// with their fusion weights.
inline std::string format_trace(const RoutingTrace& trace, std::size_t left_width = 48) {
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(left_width)) << "sentence" << " | selected LoRAs\n";
  out << std::string(left_width, '-') << "-+-" << std::string(30, '-') << "\n";
  for (const auto& e : trace.entries) {
    std::string text = "[" + std::to_string(e.sentence_index) + "] " + e.prefix;
    for (char& c : text)
      if (c == '\n') c = ' ';
    if (text.size() > left_width) text = text.substr(0, left_width - 3) + "...";
    std::ostringstream right;
    for (std::size_t i = 0; i < e.selected.size(); ++i) {
      if (i) right << ", ";
      right << e.selected[i] << " (" << std::fixed << std::setprecision(1) << e.weights[i] * 100.0f
            << "%)";
    }
    out << std::left << std::setw(static_cast<int>(left_width)) << text << " | " << right.str()
        << "\n";
  }
  return out.str();
}

}  // namespace dlplora
