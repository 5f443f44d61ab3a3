#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dlplora/backbone.hpp"
#include "dlplora/engine.hpp"
#include "dlplora/errors.hpp"
#include "dlplora/fusion.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/lora.hpp"
#include "dlplora/router.hpp"

namespace dlplora {

enum class BenchMethod { base, single_lora_merged, dlp_sentence, token_rerouting_baseline };

inline constexpr std::array<BenchMethod, 4> kAllBenchMethods = {
    BenchMethod::base, BenchMethod::single_lora_merged, BenchMethod::dlp_sentence,
    BenchMethod::token_rerouting_baseline};

inline std::string_view to_string(BenchMethod m) {
  switch (m) {
    case BenchMethod::base: return "base";
    case BenchMethod::single_lora_merged: return "single_lora_merged";
    case BenchMethod::dlp_sentence: return "dlp_sentence";
    case BenchMethod::token_rerouting_baseline: return "token_rerouting_baseline";
  }
  return "?";
}

inline BenchMethod bench_method_from_string(std::string_view s) {
  for (BenchMethod m : kAllBenchMethods)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown bench method '" + std::string(s) + "'");
}

// Desk reference: default backbone with room for a short prompt plus 256
// generated tokens.
inline BackboneConfig reference_bench_backbone() {
  BackboneConfig c;
  c.max_seq_len = 288;
  return c;
}

struct BenchConfig {
  BackboneConfig backbone = reference_bench_backbone();
  std::size_t n_adapters = 8;
  std::size_t rank = 8;
  std::size_t tokens_to_generate = 256;
  std::size_t tokens_per_sentence = 8;
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  std::vector<BenchMethod> methods = {kAllBenchMethods.begin(), kAllBenchMethods.end()};
  float p_threshold = 0.3f;
  // Full-size router (about 5M parameters at N = 8).
  std::size_t vectorizer_dim = 4096;
  std::vector<std::size_t> router_hidden = {1024, 512, 256};
  std::uint64_t seed = 0;

  void validate() const {
    backbone.validate();
    if (repetitions < 3) throw ConfigError("bench needs repetitions >= 3");
    if (warmup < 1) throw ConfigError("bench needs warmup >= 1");
    if (n_adapters < 1) throw ConfigError("bench needs n_adapters >= 1");
    if (tokens_to_generate < 1) throw ConfigError("bench needs tokens_to_generate >= 1");
    if (tokens_per_sentence < 1) throw ConfigError("bench needs tokens_per_sentence >= 1");
    if (router_hidden.size() != 3) throw ConfigError("router_hidden needs exactly 3 widths");
    if (methods.empty()) throw ConfigError("bench needs at least one method");
  }
};

inline Json bench_config_to_json(const BenchConfig& c) {
  std::vector<std::string> methods;
  for (BenchMethod m : c.methods) methods.emplace_back(to_string(m));
  return {{"backbone", backbone_config_to_json(c.backbone)},
          {"n_adapters", c.n_adapters},
          {"rank", c.rank},
          {"tokens_to_generate", c.tokens_to_generate},
          {"tokens_per_sentence", c.tokens_per_sentence},
          {"repetitions", c.repetitions},
          {"warmup", c.warmup},
          {"methods", methods},
          {"p_threshold", static_cast<double>(c.p_threshold)},
          {"vectorizer_dim", c.vectorizer_dim},
          {"router_hidden", c.router_hidden},
          {"seed", c.seed}};
}

// Everything the timed loop touches, built once per configuration.
struct BenchSetup {
  Backbone backbone;
  Backbone merged;  // backbone with adapter slot 0 folded in
  LoraRegistry registry;
  RouterModel router;
  std::string prompt;
};

inline LoraAdapter random_adapter(const Backbone& bb, const std::string& label, std::size_t rank,
                                  std::uint64_t seed) {
  LoraAdapter adapter(label, label, rank, 1.0f);
  std::uint64_t k = 0;
  for (const auto& name : bb.list_injection_points(false)) {
    const Matrix& w = bb.projection_weight(InjectionPoint::parse(name));
    Matrix a = seeded_random_matrix(w.rows(), rank, Rng::mix(seed, k++), Distribution::gaussian(0.02f));
    Matrix b = seeded_random_matrix(rank, w.cols(), Rng::mix(seed, k++), Distribution::gaussian(0.02f));
    adapter.add_layer(name, std::move(a), std::move(b));
  }
  return adapter;
}

inline BenchSetup make_bench_setup(const BenchConfig& cfg) {
  cfg.validate();
  std::vector<std::string> words;
  for (std::size_t i = Vocabulary::kReservedCount; i < cfg.backbone.vocab_size; ++i)
    words.push_back("w" + std::to_string(i));
  BenchSetup s;
  BackboneConfig bc = cfg.backbone;
  bc.seed = Rng::mix(cfg.seed, 1);
  s.backbone = Backbone(bc, Vocabulary::build(words));
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < cfg.n_adapters; ++i) {
    labels.push_back("task" + std::to_string(i));
    s.registry.register_adapter(random_adapter(s.backbone, labels.back(), cfg.rank, Rng::mix(cfg.seed, 100 + i)));
  }
  s.merged = s.backbone.merged_with(s.registry.adapter_at(0));
  std::vector<std::size_t> dims = {cfg.vectorizer_dim};
  dims.insert(dims.end(), cfg.router_hidden.begin(), cfg.router_hidden.end());
  dims.push_back(cfg.n_adapters);
  s.router.vectorizer.dim = cfg.vectorizer_dim;
  s.router.mlp = MiniMlp::random(dims, Rng::mix(cfg.seed, 2), true);
  s.router.task_labels = labels;
  s.router.config.p_threshold = cfg.p_threshold;
  s.prompt = "w10 w11 w12 w13 w14 w15 w16 .";
  return s;
}

// Scripted continuation: content words with a "." closing every sentence of
// `tokens_per_sentence` tokens.
inline std::vector<TokenId> bench_script(const BenchConfig& cfg, std::size_t tokens_per_sentence) {
  Rng rng(Rng::mix(cfg.seed, 3));
  std::vector<TokenId> script;
  const std::size_t content = cfg.backbone.vocab_size - Vocabulary::kReservedCount;
  for (std::size_t i = 0; i < cfg.tokens_to_generate; ++i) {
    if ((i + 1) % tokens_per_sentence == 0) script.push_back(Vocabulary::kPeriod);
    else script.push_back(static_cast<TokenId>(Vocabulary::kReservedCount + rng.below(content)));
  }
  return script;
}

struct BenchWorkload {
  BenchMethod method = BenchMethod::base;
  std::size_t tokens_per_sentence = 8;
};

struct WorkloadTiming {
  std::vector<double> samples_ms;
  std::size_t router_invocations = 0;  // per run
  std::vector<TokenId> tokens;         // generated by the last run
};

// One untimed-then-timed run of a workload; all methods share run_inference
// and differ only in routing mode and weights.
inline double time_workload_once(const BenchSetup& s, const BenchConfig& cfg, const BenchWorkload& w,
                                 const std::vector<TokenId>& script, WorkloadTiming& out) {
  EngineConfig ec;
  ec.max_new_tokens = cfg.tokens_to_generate;
  ec.p_threshold = cfg.p_threshold;
  const Backbone* bb = &s.backbone;
  switch (w.method) {
    case BenchMethod::base: ec.mode = RoutingMode::none; break;
    case BenchMethod::single_lora_merged:
      ec.mode = RoutingMode::none;
      bb = &s.merged;
      break;
    case BenchMethod::dlp_sentence: ec.mode = RoutingMode::sentence; break;
    case BenchMethod::token_rerouting_baseline: ec.mode = RoutingMode::token; break;
  }
  SessionState session;
  const auto t0 = std::chrono::steady_clock::now();
  InferenceResult r = run_inference(s.prompt, session, *bb, &s.registry, &s.router, ec, script);
  const auto t1 = std::chrono::steady_clock::now();
  out.router_invocations = session.router_invocations;
  out.tokens = std::move(r.generated);
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

// Warmup rounds, then timed rounds; each round runs every workload once, so
// slow drift affects all workloads alike.
inline std::vector<WorkloadTiming> time_workloads(const BenchSetup& s, const BenchConfig& cfg,
                                                  const std::vector<BenchWorkload>& workloads) {
  std::vector<std::vector<TokenId>> scripts;
  for (const auto& w : workloads) scripts.push_back(bench_script(cfg, w.tokens_per_sentence));
  std::vector<WorkloadTiming> out(workloads.size());
  for (std::size_t round = 0; round < cfg.warmup + cfg.repetitions; ++round) {
    for (std::size_t i = 0; i < workloads.size(); ++i) {
      const double ms = time_workload_once(s, cfg, workloads[i], scripts[i], out[i]);
      if (round >= cfg.warmup) out[i].samples_ms.push_back(ms);
    }
  }
  return out;
}

struct SampleStats {
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
};

inline SampleStats summarize(std::vector<double> samples) {
  if (samples.empty()) throw MeasurementError("no timing samples");
  std::sort(samples.begin(), samples.end());
  SampleStats s;
  const std::size_t n = samples.size();
  s.median_ms = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  s.mean_ms = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : samples) var += (v - s.mean_ms) * (v - s.mean_ms);
  s.stddev_ms = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  return s;
}

// Rejects workloads too short for the clock to resolve.
inline void check_resolution(double median_ms) {
  const double tick_ms = 1e3 * static_cast<double>(std::chrono::steady_clock::period::num) /
                         static_cast<double>(std::chrono::steady_clock::period::den);
  if (!(median_ms > 0.0) || median_ms < 1000.0 * tick_ms) {
    throw MeasurementError("median of " + std::to_string(median_ms) +
                           " ms is below 1000 timer ticks; raise tokens_to_generate");
  }
}

struct MethodStats {
  std::string method;
  std::size_t n_adapters = 0;
  SampleStats stats;
  std::optional<double> ratio_vs_base;
  std::optional<double> ratio_vs_single_lora;
  std::size_t router_invocations = 0;
  std::vector<double> samples_ms;
};

struct BenchEnvironment {
  std::string compiler;
  unsigned hardware_threads = 0;
  double timer_tick_ns = 0.0;
  bool optimized = false;
};

inline BenchEnvironment current_environment() {
  BenchEnvironment e;
#ifdef __VERSION__
  e.compiler = __VERSION__;
#endif
  e.hardware_threads = std::thread::hardware_concurrency();
  e.timer_tick_ns = 1e9 * static_cast<double>(std::chrono::steady_clock::period::num) /
                    static_cast<double>(std::chrono::steady_clock::period::den);
#ifdef NDEBUG
  e.optimized = true;
#endif
  return e;
}

struct BenchReport {
  std::vector<MethodStats> methods;
  BenchEnvironment environment;
  Json config;

  const MethodStats& method(BenchMethod m) const {
    for (const auto& s : methods)
      if (s.method == to_string(m)) return s;
    throw LookupError("bench report has no method '" + std::string(to_string(m)) + "'");
  }
};

// Median ratios against base and single_lora_merged, when those were measured.
inline void fill_ratios(std::vector<MethodStats>& methods) {
  std::optional<double> base, single;
  for (const auto& m : methods) {
    if (m.method == to_string(BenchMethod::base)) base = m.stats.median_ms;
    if (m.method == to_string(BenchMethod::single_lora_merged)) single = m.stats.median_ms;
  }
  for (auto& m : methods) {
    if (base) m.ratio_vs_base = m.stats.median_ms / *base;
    if (single) m.ratio_vs_single_lora = m.stats.median_ms / *single;
  }
}

inline BenchReport run_bench(const BenchSetup& setup, const BenchConfig& cfg) {
  cfg.validate();
  std::vector<BenchWorkload> workloads;
  for (BenchMethod m : cfg.methods) workloads.push_back({m, cfg.tokens_per_sentence});
  const auto timings = time_workloads(setup, cfg, workloads);
  BenchReport report;
  report.environment = current_environment();
  report.config = bench_config_to_json(cfg);
  for (std::size_t i = 0; i < workloads.size(); ++i) {
    MethodStats ms;
    ms.method = std::string(to_string(workloads[i].method));
    ms.n_adapters = cfg.n_adapters;
    ms.stats = summarize(timings[i].samples_ms);
    check_resolution(ms.stats.median_ms);
    ms.router_invocations = timings[i].router_invocations;
    ms.samples_ms = timings[i].samples_ms;
    report.methods.push_back(std::move(ms));
  }
  fill_ratios(report.methods);
  return report;
}

inline BenchReport run_bench(const BenchConfig& cfg) { return run_bench(make_bench_setup(cfg), cfg); }

struct ScalingRow {
  std::size_t n_adapters = 0;
  double ratio_vs_base = 0.0;
  double ratio_vs_single_lora = 0.0;
  double param_fraction = 0.0;
};

// Adapter parameters as a fraction of backbone parameters.
inline double adapter_param_fraction(const LoraRegistry& registry, const Backbone& backbone) {
  return static_cast<double>(registry.adapter_parameter_count()) /
         static_cast<double>(backbone.parameter_count());
}

// dlp_sentence cost for each adapter count in `n_list`.
inline std::vector<ScalingRow> scaling_ablation(const std::vector<std::size_t>& n_list, BenchConfig cfg) {
  std::vector<ScalingRow> rows;
  cfg.methods = {BenchMethod::base, BenchMethod::single_lora_merged, BenchMethod::dlp_sentence};
  for (std::size_t n : n_list) {
    cfg.n_adapters = n;
    const BenchSetup setup = make_bench_setup(cfg);
    const BenchReport r = run_bench(setup, cfg);
    const MethodStats& d = r.method(BenchMethod::dlp_sentence);
    rows.push_back({n, *d.ratio_vs_base, *d.ratio_vs_single_lora,
                    adapter_param_fraction(setup.registry, setup.backbone)});
  }
  return rows;
}

struct SentenceLengthRow {
  std::size_t tokens_per_sentence = 0;
  double ratio_vs_single_lora = 0.0;
  std::size_t router_invocations = 0;
};

// dlp_sentence against single_lora_merged for each sentence length, all
// measured in the same interleaved rounds.
inline std::vector<SentenceLengthRow> sentence_length_ablation(const std::vector<std::size_t>& k_list,
                                                               const BenchConfig& cfg) {
  const BenchSetup setup = make_bench_setup(cfg);
  std::vector<BenchWorkload> workloads;
  for (std::size_t k : k_list) {
    workloads.push_back({BenchMethod::single_lora_merged, k});
    workloads.push_back({BenchMethod::dlp_sentence, k});
  }
  const auto timings = time_workloads(setup, cfg, workloads);
  std::vector<SentenceLengthRow> rows;
  for (std::size_t i = 0; i < k_list.size(); ++i) {
    const SampleStats single = summarize(timings[2 * i].samples_ms);
    const SampleStats dlp = summarize(timings[2 * i + 1].samples_ms);
    check_resolution(single.median_ms);
    rows.push_back({k_list[i], dlp.median_ms / single.median_ms, timings[2 * i + 1].router_invocations});
  }
  return rows;
}

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json bench_report_to_json(const BenchReport& r) {
  Json methods = Json::array();
  for (const auto& m : r.methods) {
    methods.push_back({{"method", m.method},
                       {"n_adapters", m.n_adapters},
                       {"median_ms", m.stats.median_ms},
                       {"mean_ms", m.stats.mean_ms},
                       {"stddev_ms", m.stats.stddev_ms},
                       {"ratio_vs_base", optional_json(m.ratio_vs_base)},
                       {"ratio_vs_single_lora", optional_json(m.ratio_vs_single_lora)},
                       {"router_invocations", m.router_invocations},
                       {"samples_ms", m.samples_ms}});
  }
  return {{"methods", methods},
          {"environment",
           {{"compiler", r.environment.compiler},
            {"hardware_threads", r.environment.hardware_threads},
            {"timer_tick_ns", r.environment.timer_tick_ns},
            {"optimized", r.environment.optimized}}},
          {"config", r.config}};
}

inline constexpr std::string_view kBenchCsvHeader =
    "method,n_adapters,median_ms,mean_ms,stddev_ms,ratio_vs_base,ratio_vs_single_lora";

inline std::string bench_report_to_csv(const BenchReport& r) {
  std::ostringstream out;
  out << kBenchCsvHeader << "\n";
  out << std::setprecision(6);
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  for (const auto& m : r.methods) {
    out << m.method << "," << m.n_adapters << "," << m.stats.median_ms << "," << m.stats.mean_ms << ","
        << m.stats.stddev_ms << ",";
    opt(m.ratio_vs_base);
    out << ",";
    opt(m.ratio_vs_single_lora);
    out << "\n";
  }
  return out.str();
}

inline std::string format_bench_report(const BenchReport& r) {
  std::ostringstream out;
  out << std::left << std::setw(26) << "method" << std::right << std::setw(6) << "N" << std::setw(12)
      << "median_ms" << std::setw(12) << "stddev_ms" << std::setw(10) << "vs_base" << std::setw(10)
      << "vs_single" << std::setw(10) << "routes" << "\n";
  for (const auto& m : r.methods) {
    out << std::left << std::setw(26) << m.method << std::right << std::setw(6) << m.n_adapters
        << std::fixed << std::setprecision(3) << std::setw(12) << m.stats.median_ms << std::setw(12)
        << m.stats.stddev_ms;
    for (const auto& v : {m.ratio_vs_base, m.ratio_vs_single_lora}) {
      std::ostringstream c;
      if (v) c << std::fixed << std::setprecision(3) << *v;
      else c << "-";
      out << std::setw(10) << c.str();
    }
    out << std::setw(10) << m.router_invocations << "\n";
  }
  return out.str();
}

// gnuplot-readable columns.
inline std::string scaling_to_dat(const std::vector<ScalingRow>& rows) {
  std::ostringstream out;
  out << "# n_adapters ratio_vs_base ratio_vs_single_lora param_fraction\n" << std::setprecision(6);
  for (const auto& r : rows)
    out << r.n_adapters << " " << r.ratio_vs_base << " " << r.ratio_vs_single_lora << " "
        << r.param_fraction << "\n";
  return out.str();
}

// Horizontal bars of ratio_vs_base, one per adapter count.
inline std::string scaling_text_chart(const std::vector<ScalingRow>& rows, std::size_t width = 40) {
  double top = 0.0;
  for (const auto& r : rows) top = std::max(top, r.ratio_vs_base);
  std::ostringstream out;
  for (const auto& r : rows) {
    const auto len = top > 0 ? static_cast<std::size_t>(std::lround(r.ratio_vs_base / top * width)) : 0;
    out << std::right << std::setw(6) << r.n_adapters << " | " << std::string(len, '#') << " "
        << std::fixed << std::setprecision(2) << r.ratio_vs_base << "x\n";
  }
  return out.str();
}

}  // namespace dlplora
