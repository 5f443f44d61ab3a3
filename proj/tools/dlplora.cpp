// dlplora: data generation, training, routed inference, evaluation and
// latency benchmarks from one binary.

#include <CLI11.hpp>

#include <algorithm>
#include <iomanip>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlplora/bench.hpp"
#include "dlplora/engine.hpp"
#include "dlplora/evaluation.hpp"
#include "dlplora/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dlplora;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string format = "text";
};

struct GenDataOpts {
  std::size_t tasks = 8;
  std::size_t per_task = 1000;
};

struct InitBackboneOpts {
  std::string data;
  BackboneConfig config;
};

struct TrainRouterOpts {
  std::string data;
  std::vector<std::size_t> dims = {256, 128, 64};
  std::size_t vectorizer_dim = 1024;
  std::size_t epochs = 20;
  float lr = 0.5f;
  std::size_t batch = 32;
  float p = 0.3f;
  float history_weight = 0.3f;
  std::size_t history_window = 64;
  std::string weighting = "softmax";
};

struct TrainAdaptersOpts {
  std::string data;
  std::string backbone;
  std::size_t rank = 8;
  std::size_t epochs = 20;
  float lr = 0.5f;
  float scale = 1.0f;
  std::size_t batch = 8;
  bool include_ffn = false;
};

struct RunOpts {
  std::string backbone, router, adapters;
  std::string prompt, prompt_file;
  std::optional<float> p;
  std::size_t max_new = 32;
  std::string mode = "sentence";
  bool trace = false;
};

struct EvalOpts {
  std::string data, backbone, router, adapters;
  std::string split = "test";
  std::string mode = "dlp";
  std::size_t max_new = 8;
  bool carry_history = false;
  std::optional<float> p;
};

struct BenchOpts {
  std::vector<std::size_t> n_adapters = {8};
  std::size_t tokens = 256;
  std::size_t tokens_per_sentence = 8;
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::size_t rank = 8;
  float p = 0.3f;
  std::vector<std::string> methods = {"base", "single_lora_merged", "dlp_sentence",
                                      "token_rerouting_baseline"};
  std::vector<std::size_t> sentence_lengths;
};

const auto kUnitInterval = CLI::Validator(
    [](std::string& s) -> std::string {
      try {
        const double v = std::stod(s);
        if (v > 0.0 && v <= 1.0) return {};
      } catch (const std::exception&) {
      }
      return "value " + s + " must lie in (0, 1]";
    },
    "(0,1]");

// Globals plus the active subcommand's options; unset values are left out so
// the file loads back through --config unchanged.
void echo_config(const CLI::App& app, const std::string& active, const fs::path& out) {
  std::vector<std::string> others;
  for (const CLI::App* sub : app.get_subcommands({}))
    if (sub->get_name() != active) others.push_back(sub->get_name());
  std::istringstream in(app.config_to_str(true, false));
  std::string line, section, kept;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      if (section == active) kept += line + "\n";
      continue;
    }
    if (!section.empty() && section != active) continue;
    const bool foreign = std::any_of(others.begin(), others.end(), [&](const std::string& o) {
      return line.rfind(o + ".", 0) == 0;
    });
    const bool unset = line.ends_with("=\"\"") || line.ends_with("=\"{}\"");
    if (!foreign && !unset) kept += line + "\n";
  }
  write_text_file(out / (active + ".config.toml"), kept);
}

std::vector<TaskCorpus> select_split(const std::vector<TaskCorpus>& tasks, const std::string& split,
                                     std::uint64_t seed) {
  if (split == "all") return tasks;
  const auto splits = split_all(tasks, seed);
  if (split == "train") return train_parts(splits);
  if (split == "test") return test_parts(splits);
  throw ConfigError("unknown split '" + split + "' (train, test, all)");
}

void emit(const Globals& g, const Json& json, const std::string& text, const std::string& csv = {}) {
  if (g.format == "json") {
    std::cout << json.dump(2) << "\n";
  } else if (g.format == "csv") {
    if (csv.empty()) throw ConfigError("csv output is not available for this command");
    std::cout << csv;
  } else {
    std::cout << text;
  }
}

int cmd_gen_data(const Globals& g, const GenDataOpts& o) {
  const auto tasks = generate_tasks(o.tasks, o.per_task, g.seed);
  save_corpus_dir(tasks, g.out, g.seed);
  Json j = {{"tasks", o.tasks}, {"per_task", o.per_task}, {"dir", g.out}};
  std::ostringstream text;
  text << "wrote " << tasks.size() << " tasks x " << o.per_task << " examples to " << g.out << "\n";
  emit(g, j, text.str());
  return 0;
}

int cmd_init_backbone(const Globals& g, InitBackboneOpts o) {
  o.config.seed = g.seed;
  const Backbone bb = init_backbone(load_corpus_dir(o.data), o.config);
  const fs::path path = fs::path(g.out) / "backbone.json";
  save_backbone(bb, path);
  Json j = {{"path", path.string()},
            {"parameters", bb.parameter_count()},
            {"vocabulary", bb.vocab().size()}};
  std::ostringstream text;
  text << "backbone: " << bb.parameter_count() << " parameters, " << bb.vocab().size()
       << " vocabulary tokens -> " << path.string() << "\n";
  emit(g, j, text.str());
  return 0;
}

int cmd_train_router(const Globals& g, const TrainRouterOpts& o) {
  // Train split only, so evaluation prompts stay unseen.
  const auto tasks = select_split(load_corpus_dir(o.data), "train", g.seed);
  RouterTrainConfig tc;
  tc.vectorizer.dim = o.vectorizer_dim;
  tc.hidden_dims = o.dims;
  tc.epochs = o.epochs;
  tc.learning_rate = o.lr;
  tc.batch_size = o.batch;
  tc.seed = g.seed;
  RouterConfig rc;
  rc.p_threshold = o.p;
  rc.history_weight = o.history_weight;
  rc.history_window = o.history_window;
  rc.weighting = fusion_weighting_from_string(o.weighting);
  const RouterBuild b = build_router(tasks, tc, rc);
  const fs::path path = fs::path(g.out) / "router.json";
  save_router(b.model, path);
  Json j = {{"path", path.string()},
            {"held_out_accuracy", b.training.held_out_accuracy},
            {"train_size", b.training.train_size},
            {"test_size", b.training.test_size},
            {"parameters", b.model.mlp.parameter_count()},
            {"epoch_losses", b.training.epoch_losses}};
  std::ostringstream text;
  text << "router: " << b.model.mlp.parameter_count() << " parameters, " << b.training.train_size
       << " train / " << b.training.test_size << " held out\n"
       << "held-out accuracy: " << b.training.held_out_accuracy << "\n";
  emit(g, j, text.str());
  return 0;
}

int cmd_train_adapters(const Globals& g, const TrainAdaptersOpts& o) {
  const auto train = select_split(load_corpus_dir(o.data), "train", g.seed);
  const Backbone bb = load_backbone(o.backbone);
  LoraTrainConfig cfg;
  cfg.rank = o.rank;
  cfg.epochs = o.epochs;
  cfg.learning_rate = o.lr;
  cfg.scale = o.scale;
  cfg.batch_size = o.batch;
  cfg.include_ffn = o.include_ffn;
  cfg.seed = g.seed;
  Json losses = Json::object();
  const LoraRegistry registry =
      train_adapters(bb, train, cfg, [&](const std::string& label, std::size_t epoch, double loss) {
        losses[label].push_back(loss);
        std::cerr << label << " epoch " << epoch << " loss " << loss << "\n";
      });
  const fs::path dir = fs::path(g.out) / "adapters";
  save_registry(registry, dir);
  Json j = {{"dir", dir.string()}, {"adapters", registry.ids()}, {"epoch_losses", losses}};
  std::ostringstream text;
  text << "trained " << registry.size() << " adapters (rank " << o.rank << ") -> " << dir.string() << "\n";
  emit(g, j, text.str());
  return 0;
}

int cmd_run(const Globals& g, const RunOpts& o) {
  const Backbone bb = load_backbone(o.backbone);
  const RouterModel router = load_router(o.router);
  const LoraRegistry registry = load_registry(o.adapters);
  const std::string prompt = o.prompt_file.empty() ? o.prompt : read_text_file(o.prompt_file);
  EngineConfig cfg;
  cfg.max_new_tokens = o.max_new;
  cfg.p_threshold = o.p;
  if (o.mode == "sentence") cfg.mode = RoutingMode::sentence;
  else if (o.mode == "token") cfg.mode = RoutingMode::token;
  else if (o.mode == "none") cfg.mode = RoutingMode::none;
  else throw ConfigError("unknown routing mode '" + o.mode + "'");
  SessionState session;
  const InferenceResult r = run_inference(prompt, session, bb, &registry, &router, cfg);
  save_trace_jsonl(r.trace, fs::path(g.out) / "trace.jsonl");
  Json entries = Json::array();
  for (const auto& e : r.trace.entries) entries.push_back(trace_entry_to_json(e));
  Json j = {{"prompt", prompt}, {"output", r.text}, {"trace", entries}};
  std::ostringstream text;
  text << r.text << "\n";
  if (o.trace) text << "\n" << format_trace(r.trace);
  emit(g, j, text.str());
  return 0;
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "task,examples,accuracy,bleu,rouge1,rougeL\n";
  auto v = [&](const std::optional<double>& x) {
    out << ",";
    if (x) out << *x;
  };
  auto row = [&](const std::string& label, const TaskScores& s) {
    out << label << "," << s.examples;
    v(s.accuracy);
    v(s.bleu);
    v(s.rouge1);
    v(s.rouge_l);
    out << "\n";
  };
  for (const auto& [label, s] : r.per_task) row(label, s);
  row("aggregate", r.aggregate);
  return out.str();
}

int cmd_eval(const Globals& g, const EvalOpts& o) {
  const auto tasks = select_split(load_corpus_dir(o.data), o.split, g.seed);
  EvalReport report;
  if (o.mode == "gold") {
    // Scores the references against themselves; a check of the scoring path.
    std::vector<Prediction> preds;
    for (const auto& t : tasks)
      for (const auto& ex : t.examples) preds.push_back({t.task_label, ex.prompt, ex.target, ex.target});
    report = score_predictions(tasks, preds, "gold");
  } else {
    const EvalMode mode = eval_mode_from_string(o.mode);
    const Backbone bb = load_backbone(o.backbone);
    std::optional<RouterModel> router;
    std::optional<LoraRegistry> registry;
    if (mode != EvalMode::base) registry = load_registry(o.adapters);
    if (mode == EvalMode::dlp) router = load_router(o.router);
    EvalOptions opt;
    opt.mode = mode;
    opt.max_new_tokens = o.max_new;
    opt.carry_history = o.carry_history;
    opt.p_threshold = o.p;
    report = evaluate(tasks, bb, registry ? &*registry : nullptr, router ? &*router : nullptr, opt).report;
  }
  const Json j = eval_report_to_json(report);
  write_json_file(fs::path(g.out) / "eval.json", j);
  emit(g, j, format_eval_report(report), eval_csv(report));
  return 0;
}

int cmd_bench(const Globals& g, const BenchOpts& o) {
  BenchConfig cfg;
  cfg.tokens_to_generate = o.tokens;
  cfg.tokens_per_sentence = o.tokens_per_sentence;
  cfg.repetitions = o.reps;
  cfg.warmup = o.warmup;
  cfg.rank = o.rank;
  cfg.p_threshold = o.p;
  cfg.seed = g.seed;
  cfg.methods.clear();
  for (const auto& m : o.methods) cfg.methods.push_back(bench_method_from_string(m));
  cfg.backbone.max_seq_len = std::max(cfg.backbone.max_seq_len, o.tokens + 32);

  Json reports = Json::array();
  std::string text, csv;
  std::vector<ScalingRow> scaling;
  for (std::size_t n : o.n_adapters) {
    cfg.n_adapters = n;
    const BenchSetup setup = make_bench_setup(cfg);
    const BenchReport r = run_bench(setup, cfg);
    reports.push_back(bench_report_to_json(r));
    text += format_bench_report(r);
    std::string part = bench_report_to_csv(r);
    csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
    for (const auto& m : r.methods) {
      if (m.method == to_string(BenchMethod::dlp_sentence) && m.ratio_vs_base && m.ratio_vs_single_lora)
        scaling.push_back({n, *m.ratio_vs_base, *m.ratio_vs_single_lora,
                           adapter_param_fraction(setup.registry, setup.backbone)});
    }
  }
  Json j = {{"reports", reports}};
  const fs::path out(g.out);
  if (scaling.size() > 1) {
    write_text_file(out / "scaling.dat", scaling_to_dat(scaling));
    const std::string chart = scaling_text_chart(scaling);
    write_text_file(out / "scaling.txt", chart);
    text += "\ndlp_sentence / base by adapter count\n" + chart;
  }
  if (!o.sentence_lengths.empty()) {
    const auto rows = sentence_length_ablation(o.sentence_lengths, cfg);
    std::ostringstream dat, t;
    dat << "# tokens_per_sentence ratio_vs_single_lora router_invocations\n";
    t << "\ntokens/sentence  dlp_sentence / single_lora_merged\n";
    Json rows_json = Json::array();
    for (const auto& r : rows) {
      dat << r.tokens_per_sentence << " " << r.ratio_vs_single_lora << " " << r.router_invocations << "\n";
      t << std::setw(15) << r.tokens_per_sentence << "  " << std::fixed << std::setprecision(3)
        << r.ratio_vs_single_lora << "\n";
      rows_json.push_back({{"tokens_per_sentence", r.tokens_per_sentence},
                           {"ratio_vs_single_lora", r.ratio_vs_single_lora},
                           {"router_invocations", r.router_invocations}});
    }
    write_text_file(out / "sentence_length.dat", dat.str());
    j["sentence_length"] = rows_json;
    text += t.str();
  }
  write_json_file(out / "bench.json", j);
  write_text_file(out / "bench.csv", csv);
  emit(g, j, text, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sentence-level routing and fusion of LoRA adapters on a small decoder"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML config; flags given on the command line take precedence");
  app.require_subcommand(1);

  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--format", g.format, "Report format")->check(CLI::IsMember({"json", "text", "csv"}));

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic task corpus");
  gen_cmd->add_option("--tasks", gen.tasks, "Number of tasks")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--per-task", gen.per_task, "Examples per task")->check(CLI::Range(20, 10000000));

  InitBackboneOpts ib;
  auto* ib_cmd = app.add_subcommand("init-backbone", "Create a frozen random backbone for a corpus");
  ib_cmd->add_option("--data", ib.data, "Corpus directory")->required();
  ib_cmd->add_option("--vocab-size", ib.config.vocab_size);
  ib_cmd->add_option("--d-model", ib.config.d_model);
  ib_cmd->add_option("--heads", ib.config.n_heads);
  ib_cmd->add_option("--layers", ib.config.n_layers);
  ib_cmd->add_option("--ffn", ib.config.ffn_dim);
  ib_cmd->add_option("--max-seq-len", ib.config.max_seq_len);

  TrainRouterOpts tr;
  auto* tr_cmd = app.add_subcommand("train-router", "Train the sentence classifier");
  tr_cmd->add_option("--data", tr.data, "Corpus directory")->required();
  tr_cmd->add_option("--dims", tr.dims, "Three hidden widths")->expected(3)->delimiter(',');
  tr_cmd->add_option("--vectorizer-dim", tr.vectorizer_dim)->check(CLI::PositiveNumber);
  tr_cmd->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber);
  tr_cmd->add_option("--lr", tr.lr)->check(CLI::PositiveNumber);
  tr_cmd->add_option("--batch", tr.batch)->check(CLI::PositiveNumber);
  tr_cmd->add_option("--p", tr.p, "Selection threshold")->check(kUnitInterval);
  tr_cmd->add_option("--history-weight", tr.history_weight)->check(CLI::NonNegativeNumber);
  tr_cmd->add_option("--history-window", tr.history_window);
  tr_cmd->add_option("--weighting", tr.weighting)->check(CLI::IsMember({"softmax", "renormalize"}));

  TrainAdaptersOpts ta;
  auto* ta_cmd = app.add_subcommand("train-adapters", "Train one LoRA adapter per task");
  ta_cmd->add_option("--data", ta.data, "Corpus directory")->required();
  ta_cmd->add_option("--backbone", ta.backbone, "Backbone file")->required();
  ta_cmd->add_option("--rank", ta.rank)->check(CLI::PositiveNumber);
  ta_cmd->add_option("--epochs", ta.epochs)->check(CLI::PositiveNumber);
  ta_cmd->add_option("--lr", ta.lr)->check(CLI::PositiveNumber);
  ta_cmd->add_option("--scale", ta.scale);
  ta_cmd->add_option("--batch", ta.batch)->check(CLI::PositiveNumber);
  ta_cmd->add_flag("--include-ffn", ta.include_ffn, "Also adapt the feed-forward projections");

  RunOpts ru;
  auto* ru_cmd = app.add_subcommand("run", "Generate with sentence-level routing");
  ru_cmd->add_option("--backbone", ru.backbone)->required();
  ru_cmd->add_option("--router", ru.router)->required();
  ru_cmd->add_option("--adapters", ru.adapters, "Adapter registry directory")->required();
  auto* prompt_opt = ru_cmd->add_option("--prompt", ru.prompt);
  auto* prompt_file_opt = ru_cmd->add_option("--prompt-file", ru.prompt_file);
  prompt_opt->excludes(prompt_file_opt);
  ru_cmd->add_option("--p", ru.p, "Selection threshold")->check(kUnitInterval);
  ru_cmd->add_option("--max-new", ru.max_new);
  ru_cmd->add_option("--mode", ru.mode)->check(CLI::IsMember({"sentence", "token", "none"}));
  ru_cmd->add_flag("--trace", ru.trace, "Print the per-sentence routing trace");

  EvalOpts ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate on a corpus split");
  ev_cmd->add_option("--data", ev.data, "Corpus directory")->required();
  ev_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test", "all"}));
  ev_cmd->add_option("--mode", ev.mode)->check(CLI::IsMember({"base", "oracle", "dlp", "gold"}));
  ev_cmd->add_option("--backbone", ev.backbone);
  ev_cmd->add_option("--router", ev.router);
  ev_cmd->add_option("--adapters", ev.adapters);
  ev_cmd->add_option("--max-new", ev.max_new);
  ev_cmd->add_flag("--carry-history", ev.carry_history, "One routing session across all examples");
  ev_cmd->add_option("--p", ev.p, "Selection threshold")->check(kUnitInterval);

  BenchOpts be;
  auto* be_cmd = app.add_subcommand("bench", "Latency of base, merged, routed and per-token routed decoding");
  be_cmd->add_option("--n-adapters", be.n_adapters, "Registered adapter counts")->delimiter(',');
  be_cmd->add_option("--tokens", be.tokens, "Tokens generated per run")->check(CLI::PositiveNumber);
  be_cmd->add_option("--tokens-per-sentence", be.tokens_per_sentence)->check(CLI::PositiveNumber);
  be_cmd->add_option("--reps", be.reps)->check(CLI::Range(3, 1000000));
  be_cmd->add_option("--warmup", be.warmup)->check(CLI::Range(1, 1000000));
  be_cmd->add_option("--rank", be.rank)->check(CLI::PositiveNumber);
  be_cmd->add_option("--p", be.p)->check(kUnitInterval);
  be_cmd->add_option("--methods", be.methods)->delimiter(',');
  be_cmd->add_option("--sentence-lengths", be.sentence_lengths, "Sentence-length ablation")->delimiter(',');

  for (auto* sub : app.get_subcommands({})) sub->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    if (ru_cmd->parsed() && ru.prompt.empty() && ru.prompt_file.empty())
      throw InputError("run needs --prompt or --prompt-file");
    if (ev_cmd->parsed() && ev.mode != "gold" && ev.backbone.empty())
      throw ConfigError("eval needs --backbone");
    fs::create_directories(g.out);
    CLI::App* active = app.get_subcommands().front();
    echo_config(app, active->get_name(), g.out);
    if (gen_cmd->parsed()) return cmd_gen_data(g, gen);
    if (ib_cmd->parsed()) return cmd_init_backbone(g, ib);
    if (tr_cmd->parsed()) return cmd_train_router(g, tr);
    if (ta_cmd->parsed()) return cmd_train_adapters(g, ta);
    if (ru_cmd->parsed()) return cmd_run(g, ru);
    if (ev_cmd->parsed()) return cmd_eval(g, ev);
    if (be_cmd->parsed()) return cmd_bench(g, be);
  } catch (const Error& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error[io_error]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
