#pragma once

#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlplora/backbone.hpp"
#include "dlplora/corpus.hpp"
#include "dlplora/engine.hpp"
#include "dlplora/errors.hpp"
#include "dlplora/fusion.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/metrics.hpp"
#include "dlplora/router.hpp"

namespace dlplora {

enum class EvalMode {
  base,    // frozen backbone, no adapters
  oracle,  // each example runs on the backbone merged with its own task's adapter
  dlp,     // sentence-level routing over the whole registry
};

inline std::string_view to_string(EvalMode m) {
  switch (m) {
    case EvalMode::base: return "base";
    case EvalMode::oracle: return "oracle";
    case EvalMode::dlp: return "dlp";
  }
  return "?";
}

inline EvalMode eval_mode_from_string(std::string_view s) {
  if (s == "base") return EvalMode::base;
  if (s == "oracle") return EvalMode::oracle;
  if (s == "dlp") return EvalMode::dlp;
  throw ConfigError("unknown eval mode '" + std::string(s) + "' (base, oracle, dlp)");
}

struct TaskScores {
  std::optional<double> accuracy;
  std::optional<double> bleu;
  std::optional<double> rouge1;
  std::optional<double> rouge_l;
  std::size_t examples = 0;
};

// All values in [0, 1]. Aggregates are unweighted means over the tasks that
// report the metric.
struct EvalReport {
  std::string mode;
  std::map<std::string, TaskScores> per_task;
  TaskScores aggregate;
};

struct Prediction {
  std::string task_label;
  std::string prompt;
  std::string target;
  std::string output;
};

struct EvalOptions {
  EvalMode mode = EvalMode::dlp;
  std::size_t max_new_tokens = 8;
  // Keep one routing session over the whole interleaved stream. Off by
  // default: each example is an independent request, and a shared history
  // would mix unrelated tasks into the router's context.
  bool carry_history = false;
  std::optional<float> p_threshold;
};

// Round-robin interleaving of task test sets: one example of each task in
// turn until all are exhausted.
inline std::vector<std::pair<std::size_t, std::size_t>> interleave_order(
    const std::vector<TaskCorpus>& tasks) {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t k = 0;; ++k) {
    bool any = false;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      if (k < tasks[t].examples.size()) {
        order.emplace_back(t, k);
        any = true;
      }
    }
    if (!any) break;
  }
  return order;
}

// Accuracy for every task; BLEU and ROUGE additionally for free-form tasks.
inline EvalReport score_predictions(const std::vector<TaskCorpus>& tasks,
                                    const std::vector<Prediction>& predictions, std::string mode) {
  EvalReport report;
  report.mode = std::move(mode);
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> grouped;
  for (const auto& p : predictions) {
    grouped[p.task_label].first.push_back(p.output);
    grouped[p.task_label].second.push_back(p.target);
  }
  std::map<std::string, TaskKind> kinds;
  for (const auto& t : tasks) kinds[t.task_label] = t.kind;
  double acc = 0, bl = 0, r1 = 0, rl = 0;
  std::size_t n_acc = 0, n_qa = 0;
  for (const auto& [label, pr] : grouped) {
    TaskScores s;
    s.examples = pr.first.size();
    s.accuracy = accuracy(pr.first, pr.second);
    acc += *s.accuracy;
    ++n_acc;
    auto kind = kinds.find(label);
    if (kind != kinds.end() && kind->second == TaskKind::qa) {
      const TextScores ts = mean_text_scores(pr.first, pr.second);
      s.bleu = ts.bleu;
      s.rouge1 = ts.rouge1;
      s.rouge_l = ts.rouge_l;
      bl += ts.bleu;
      r1 += ts.rouge1;
      rl += ts.rouge_l;
      ++n_qa;
    }
    report.aggregate.examples += s.examples;
    report.per_task[label] = s;
  }
  if (n_acc) report.aggregate.accuracy = acc / static_cast<double>(n_acc);
  if (n_qa) {
    report.aggregate.bleu = bl / static_cast<double>(n_qa);
    report.aggregate.rouge1 = r1 / static_cast<double>(n_qa);
    report.aggregate.rouge_l = rl / static_cast<double>(n_qa);
  }
  return report;
}

struct EvalResult {
  EvalReport report;
  std::vector<Prediction> predictions;
  std::size_t router_invocations = 0;
};

// Runs every test example (interleaved across tasks) through the chosen mode
// with greedy decoding and scores the outputs.
inline EvalResult evaluate(const std::vector<TaskCorpus>& tasks, const Backbone& backbone,
                           const LoraRegistry* registry, const RouterModel* router,
                           const EvalOptions& opt) {
  if (tasks.empty()) throw ContractError("evaluate: no tasks");
  EngineConfig cfg;
  cfg.max_new_tokens = opt.max_new_tokens;
  cfg.p_threshold = opt.p_threshold;
  cfg.mode = opt.mode == EvalMode::dlp ? RoutingMode::sentence : RoutingMode::none;

  std::map<std::string, Backbone> merged;
  if (opt.mode == EvalMode::oracle) {
    if (!registry) throw ConfigError("oracle evaluation needs a registry");
    for (const auto& t : tasks) {
      const auto slot = registry->slot_for_label(t.task_label);
      if (!slot) throw RoutingError("no adapter registered for task '" + t.task_label + "'");
      merged.emplace(t.task_label, backbone.merged_with(registry->adapter_at(*slot)));
    }
  }

  EvalResult result;
  SessionState session;
  for (const auto& [t, k] : interleave_order(tasks)) {
    const TaskCorpus& task = tasks[t];
    const Example& ex = task.examples[k];
    if (!opt.carry_history) reset(session);
    const Backbone& bb = opt.mode == EvalMode::oracle ? merged.at(task.task_label) : backbone;
    const InferenceResult out = run_inference(ex.prompt, session, bb, registry, router, cfg);
    result.predictions.push_back({task.task_label, ex.prompt, ex.target, out.text});
    result.router_invocations += out.trace.entries.size();
  }
  result.report = score_predictions(tasks, result.predictions, std::string(to_string(opt.mode)));
  return result;
}

inline Json task_scores_to_json(const TaskScores& s) {
  Json j = {{"examples", s.examples}};
  if (s.accuracy) j["accuracy"] = *s.accuracy;
  if (s.bleu) j["bleu"] = *s.bleu;
  if (s.rouge1) j["rouge1"] = *s.rouge1;
  if (s.rouge_l) j["rougeL"] = *s.rouge_l;
  return j;
}

inline Json eval_report_to_json(const EvalReport& r) {
  Json per_task = Json::object();
  for (const auto& [label, s] : r.per_task) per_task[label] = task_scores_to_json(s);
  return {{"mode", r.mode}, {"per_task", per_task}, {"aggregate", task_scores_to_json(r.aggregate)}};
}

// Aligned text table with metrics shown as percentages.
inline std::string format_eval_report(const EvalReport& r) {
  std::size_t width = std::string("aggregate").size();
  for (const auto& [label, s] : r.per_task) width = std::max(width, label.size());
  std::ostringstream out;
  auto cell = [&](const std::optional<double>& v) {
    std::ostringstream c;
    if (v) c << std::fixed << std::setprecision(2) << *v * 100.0;
    else c << "-";
    out << std::right << std::setw(10) << c.str();
  };
  auto row = [&](const std::string& label, const TaskScores& s) {
    out << std::left << std::setw(static_cast<int>(width)) << label << std::right << std::setw(6)
        << s.examples;
    cell(s.accuracy);
    cell(s.bleu);
    cell(s.rouge1);
    cell(s.rouge_l);
    out << "\n";
  };
  out << "mode: " << r.mode << "\n";
  out << std::left << std::setw(static_cast<int>(width)) << "task" << std::right << std::setw(6) << "n"
      << std::setw(10) << "accuracy" << std::setw(10) << "bleu" << std::setw(10) << "rouge1"
      << std::setw(10) << "rougeL" << "\n";
  for (const auto& [label, s] : r.per_task) row(label, s);
  row("aggregate", r.aggregate);
  return out.str();
}

}  // namespace dlplora
