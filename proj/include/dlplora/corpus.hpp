#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dlplora/errors.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/numerics.hpp"

namespace dlplora {

enum class TaskKind { mcq, qa };

inline std::string_view to_string(TaskKind k) { return k == TaskKind::mcq ? "mcq" : "qa"; }

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "mcq") return TaskKind::mcq;
  if (s == "qa") return TaskKind::qa;
  throw FormatError("unknown task kind '" + std::string(s) + "'");
}

struct Example {
  std::string prompt;
  std::string target;
  friend bool operator==(const Example&, const Example&) = default;
};

struct TaskCorpus {
  std::string task_label;
  TaskKind kind = TaskKind::qa;
  std::vector<Example> examples;
  friend bool operator==(const TaskCorpus&, const TaskCorpus&) = default;
};

struct SplitCorpus {
  TaskCorpus train;
  TaskCorpus test;
  std::uint64_t seed = 0;
};

// How a task maps its prompt to a target.
enum class TaskRule { option_select, constant_map, copy, reverse };

namespace detail {

struct Theme {
  std::string_view label;
  std::array<std::string_view, 28> words;
};

// Content-word pools; disjoint across themes and from the template words.
inline constexpr std::array<Theme, 8> kThemes = {{
    {"astronomy", {"planet", "comet", "orbit", "nebula", "galaxy", "quasar", "pulsar",
                   "meteor", "asteroid", "eclipse", "telescope", "crater", "lunar", "solar",
                   "stellar", "cosmos", "zenith", "nova", "aurora", "rocket", "satellite",
                   "gravity", "horizon", "equinox", "spectrum", "photon", "plasma", "corona"}},
    {"cooking", {"flour", "butter", "oven", "recipe", "garlic", "onion", "pepper", "saucepan",
                 "whisk", "dough", "simmer", "roast", "ginger", "basil", "noodle", "skillet",
                 "vinegar", "honey", "yeast", "batter", "sugar", "cinnamon", "spatula", "broth",
                 "pastry", "grill", "ladle", "mustard"}},
    {"law", {"court", "judge", "verdict", "statute", "lawyer", "appeal", "contract", "tort",
             "plaintiff", "defendant", "jury", "witness", "evidence", "subpoena", "clause",
             "tribunal", "counsel", "motion", "ruling", "bail", "custody", "felony", "parole",
             "warrant", "decree", "treaty", "lawsuit", "docket"}},
    {"ocean", {"coral", "reef", "tide", "wave", "harbor", "sailor", "anchor", "dolphin",
               "whale", "shark", "lagoon", "current", "seabed", "kelp", "oyster", "lighthouse",
               "buoy", "vessel", "mast", "trawler", "squid", "crab", "shell", "pearl", "salt",
               "shore", "marina", "gull"}},
    {"music", {"melody", "rhythm", "chord", "guitar", "violin", "piano", "tempo", "sonata",
               "drum", "flute", "harmony", "lyric", "choir", "opera", "bass", "cello",
               "trumpet", "octave", "scale", "ballad", "concert", "anthem", "tune", "jazz",
               "orchestra", "conductor", "rehearsal", "banjo"}},
    {"sport", {"goal", "stadium", "referee", "striker", "tennis", "racket", "sprint",
               "marathon", "medal", "trophy", "league", "coach", "dribble", "tackle", "inning",
               "hockey", "rugby", "wicket", "volley", "penalty", "athlete", "relay", "podium",
               "champion", "baseball", "helmet", "jersey", "dugout"}},
    {"garden", {"tulip", "rose", "seed", "soil", "compost", "hedge", "shovel", "bloom",
                "petal", "fern", "orchid", "daisy", "lily", "mulch", "trowel", "sprout", "vine",
                "ivy", "moss", "pollen", "weed", "rake", "hose", "greenhouse", "cactus", "bulb",
                "lawn", "acorn"}},
    {"finance", {"bank", "loan", "credit", "debt", "equity", "bond", "stock", "dividend",
                 "interest", "mortgage", "budget", "asset", "ledger", "invoice", "audit",
                 "pension", "tax", "fund", "broker", "market", "profit", "revenue", "capital",
                 "payroll", "wallet", "coupon", "cash", "portfolio"}},
}};

inline constexpr std::array<std::string_view, 4> kTemplateWords = {"options", "repeat", "reverse",
                                                                   "about"};

inline constexpr std::size_t kOptionCount = 4;
inline constexpr std::size_t kPoolSize = 28;

inline std::string pseudo_word(Rng& rng) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  std::string w;
  const std::size_t syllables = 2 + rng.below(2);
  for (std::size_t s = 0; s < syllables; ++s) {
    w.push_back(consonants[rng.below(consonants.size())]);
    w.push_back(vowels[rng.below(vowels.size())]);
  }
  w.push_back(consonants[rng.below(consonants.size())]);
  return w;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace detail

inline TaskRule rule_for_task(std::size_t task_index) {
  static constexpr std::array<TaskRule, 4> kRules = {TaskRule::option_select, TaskRule::constant_map,
                                                     TaskRule::copy, TaskRule::reverse};
  return kRules[task_index % kRules.size()];
}

inline TaskKind kind_for_rule(TaskRule r) {
  return r == TaskRule::option_select ? TaskKind::mcq : TaskKind::qa;
}

// Content-word pool of every task, in task order. The first eight tasks use
// fixed themes; further tasks get seeded pseudo-word pools. Pools never share
// a word with each other or with the template words.
inline std::vector<std::pair<std::string, std::vector<std::string>>> task_pools(
    std::size_t n_tasks, std::uint64_t seed) {
  std::vector<std::pair<std::string, std::vector<std::string>>> pools;
  std::set<std::string> used(detail::kTemplateWords.begin(), detail::kTemplateWords.end());
  for (const auto& theme : detail::kThemes)
    for (auto w : theme.words) used.emplace(w);
  Rng rng(seed ^ 0x7061706f6f6cull);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    if (t < detail::kThemes.size()) {
      const auto& theme = detail::kThemes[t];
      pools.emplace_back(std::string(theme.label),
                         std::vector<std::string>(theme.words.begin(), theme.words.end()));
      continue;
    }
    std::vector<std::string> words;
    while (words.size() < detail::kPoolSize) {
      std::string w = detail::pseudo_word(rng);
      if (used.insert(w).second) words.push_back(std::move(w));
    }
    pools.emplace_back("topic" + std::to_string(t), std::move(words));
  }
  return pools;
}

// Builds `n_tasks` synthetic tasks of `per_task` examples each. Every task
// draws its prompt words from its own pool, and its target follows a fixed
// rule (option-select, constant-map, copy or reverse by task index).
inline std::vector<TaskCorpus> generate_tasks(std::size_t n_tasks, std::size_t per_task,
                                              std::uint64_t seed) {
  if (n_tasks < 1) throw ContractError("generate_tasks needs n_tasks >= 1");
  if (per_task < 20) throw ContractError("generate_tasks needs per_task >= 20");
  const auto pools = task_pools(n_tasks, seed);
  std::vector<TaskCorpus> out;
  out.reserve(n_tasks);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    const auto& [label, pool] = pools[t];
    const TaskRule rule = rule_for_task(t);
    Rng rng = Rng(seed).split(t + 1);

    // First four pool words are the answer options / constant answer; the
    // rest are subject words.
    const std::vector<std::string> options(pool.begin(), pool.begin() + detail::kOptionCount);
    const std::vector<std::string> subjects(pool.begin() + detail::kOptionCount, pool.end());
    std::vector<std::size_t> option_of(subjects.size());
    for (auto& o : option_of) o = rng.below(detail::kOptionCount);

    TaskCorpus corpus{label, kind_for_rule(rule), {}};
    corpus.examples.reserve(per_task);
    auto subject = [&] { return subjects[rng.below(subjects.size())]; };
    for (std::size_t i = 0; i < per_task; ++i) {
      Example ex;
      switch (rule) {
        case TaskRule::option_select: {
          const std::size_t key = rng.below(subjects.size());
          std::vector<std::string> words = {subjects[key], subject(), subject(), "options"};
          std::vector<std::string> shuffled = options;
          rng.shuffle(shuffled);
          words.insert(words.end(), shuffled.begin(), shuffled.end());
          ex.prompt = detail::join_words(words) + " ?";
          ex.target = options[option_of[key]];
          break;
        }
        case TaskRule::constant_map: {
          ex.prompt = detail::join_words({subject(), subject(), subject(), subject()}) + " .";
          ex.target = options[0] + " " + options[1];
          break;
        }
        case TaskRule::copy: {
          const std::string a = subject(), b = subject();
          ex.prompt = detail::join_words({subject(), "repeat", a, b}) + " .";
          ex.target = a + " " + b;
          break;
        }
        case TaskRule::reverse: {
          const std::string a = subject(), b = subject();
          ex.prompt = detail::join_words({subject(), "reverse", a, b}) + " .";
          ex.target = b + " " + a;
          break;
        }
      }
      corpus.examples.push_back(std::move(ex));
    }
    out.push_back(std::move(corpus));
  }
  return out;
}

inline std::size_t test_size_for(std::size_t n) {
  return std::max<std::size_t>(1, (n + 5) / 10);
}

// Seeded shuffle, then the last ~10% (at least one example) become the test set.
inline SplitCorpus split_9_1(const TaskCorpus& corpus, std::uint64_t seed) {
  const std::size_t n = corpus.examples.size();
  if (n < 10) {
    throw DataError("task '" + corpus.task_label + "' has " + std::to_string(n) +
                    " examples; a 9:1 split needs at least 10");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_test = test_size_for(n);
  SplitCorpus split{{corpus.task_label, corpus.kind, {}}, {corpus.task_label, corpus.kind, {}}, seed};
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n - n_test ? split.train : split.test;
    dst.examples.push_back(corpus.examples[order[i]]);
  }
  return split;
}

inline Json example_record(const TaskCorpus& corpus, const Example& ex) {
  return {{"task_label", corpus.task_label},
          {"prompt", ex.prompt},
          {"target", ex.target},
          {"kind", std::string(to_string(corpus.kind))}};
}

inline void save_jsonl(const std::vector<TaskCorpus>& corpora, const std::filesystem::path& path) {
  std::string text;
  for (const auto& c : corpora)
    for (const auto& ex : c.examples) text += example_record(c, ex).dump() + "\n";
  write_text_file(path, text);
}

inline void save_jsonl(const TaskCorpus& corpus, const std::filesystem::path& path) {
  save_jsonl(std::vector<TaskCorpus>{corpus}, path);
}

// Records are grouped by task_label in order of first appearance.
inline std::vector<TaskCorpus> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TaskCorpus> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto fail = [&](const std::string& why) {
      return ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + why);
    };
    Json rec;
    try {
      rec = Json::parse(line);
    } catch (const Json::parse_error&) {
      throw fail("malformed JSON");
    }
    for (const char* key : {"task_label", "prompt", "target", "kind"}) {
      if (!rec.is_object() || !rec.contains(key) || !rec[key].is_string())
        throw fail(std::string("missing string field '") + key + "'");
    }
    TaskKind kind;
    try {
      kind = task_kind_from_string(rec["kind"].get<std::string>());
    } catch (const FormatError& e) {
      throw fail(e.what());
    }
    const auto label = rec["task_label"].get<std::string>();
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const TaskCorpus& c) { return c.task_label == label; });
    if (it == out.end()) {
      out.push_back({label, kind, {}});
      it = std::prev(out.end());
    } else if (it->kind != kind) {
      throw fail("task '" + label + "' mixes kinds");
    }
    Example ex{rec["prompt"].get<std::string>(), rec["target"].get<std::string>()};
    if (ex.prompt.empty()) throw fail("empty prompt");
    it->examples.push_back(std::move(ex));
  }
  return out;
}

// Corpus directory written by the CLI: one JSONL per task plus manifest.json.
inline constexpr int kCorpusManifestVersion = 1;

inline void save_corpus_dir(const std::vector<TaskCorpus>& corpora, const std::filesystem::path& dir,
                            std::uint64_t seed) {
  Json tasks = Json::array();
  for (const auto& c : corpora) {
    const std::string file = c.task_label + ".jsonl";
    save_jsonl(c, dir / file);
    tasks.push_back({{"task_label", c.task_label},
                     {"kind", std::string(to_string(c.kind))},
                     {"file", file},
                     {"count", c.examples.size()}});
  }
  write_json_file(dir / "manifest.json",
                  {{"format_version", kCorpusManifestVersion}, {"seed", seed}, {"tasks", tasks}});
}

inline std::vector<TaskCorpus> load_corpus_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory " + dir.string() + " not found");
  const Json manifest = read_json_file(dir / "manifest.json");
  check_format_version(manifest, kCorpusManifestVersion, "corpus manifest");
  std::vector<TaskCorpus> out;
  for (const auto& t : manifest.at("tasks")) {
    auto loaded = load_jsonl(dir / t.at("file").get<std::string>());
    for (auto& c : loaded) out.push_back(std::move(c));
  }
  return out;
}

}  // namespace dlplora
