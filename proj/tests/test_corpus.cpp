#include <gtest/gtest.h>

#include <set>

#include "dlplora/corpus.hpp"
#include "dlplora/router.hpp"
#include "support.hpp"

using namespace dlplora;
using testing_support::TempDir;

namespace {

// Words of a task's prompts and targets, minus shared template words and
// delimiter punctuation.
std::set<std::string> content_words(const TaskCorpus& t) {
  static const std::set<std::string> shared = {"options", "repeat", "reverse", "?", ".", "!", "\n"};
  std::set<std::string> out;
  for (const auto& ex : t.examples)
    for (const auto* text : {&ex.prompt, &ex.target})
      for (const auto& w : Vocabulary::split(*text))
        if (!shared.count(w)) out.insert(w);
  return out;
}

}  // namespace

TEST(Generate, DeterministicPerSeed) {
  EXPECT_EQ(generate_tasks(8, 50, 3), generate_tasks(8, 50, 3));
  EXPECT_NE(generate_tasks(8, 50, 3), generate_tasks(8, 50, 4));
}

TEST(Generate, ShapeAndKinds) {
  const auto tasks = generate_tasks(8, 200, 7);
  ASSERT_EQ(tasks.size(), 8u);
  std::set<std::string> labels;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    EXPECT_EQ(tasks[t].examples.size(), 200u);
    EXPECT_EQ(tasks[t].kind, kind_for_rule(rule_for_task(t)));
    labels.insert(tasks[t].task_label);
    for (const auto& ex : tasks[t].examples) {
      EXPECT_FALSE(ex.prompt.empty());
      EXPECT_FALSE(ex.target.empty());
    }
  }
  EXPECT_EQ(labels.size(), 8u);
  EXPECT_THROW(generate_tasks(0, 50, 1), ContractError);
  EXPECT_THROW(generate_tasks(2, 19, 1), ContractError);
}

TEST(Generate, TargetsFollowTheTaskRule) {
  const auto tasks = generate_tasks(4, 40, 9);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (const auto& ex : tasks[t].examples) {
      const auto p = Vocabulary::split(ex.prompt);
      const auto tg = Vocabulary::split(ex.target);
      switch (rule_for_task(t)) {
        case TaskRule::copy:
          ASSERT_EQ(tg, (std::vector<std::string>{p[2], p[3]}));
          break;
        case TaskRule::reverse:
          ASSERT_EQ(tg, (std::vector<std::string>{p[3], p[2]}));
          break;
        case TaskRule::constant_map:
          ASSERT_EQ(ex.target, tasks[t].examples.front().target);
          break;
        case TaskRule::option_select:
          ASSERT_EQ(tg.size(), 1u);
          ASSERT_NE(std::find(p.begin() + 4, p.end(), tg[0]), p.end());
          break;
      }
    }
  }
}

TEST(Generate, ContentVocabulariesAreDisjoint) {
  const auto tasks = generate_tasks(8, 200, 7);
  std::vector<std::set<std::string>> words;
  for (const auto& t : tasks) words.push_back(content_words(t));
  for (std::size_t i = 0; i < words.size(); ++i)
    for (std::size_t j = i + 1; j < words.size(); ++j) {
      std::vector<std::string> common;
      std::set_intersection(words[i].begin(), words[i].end(), words[j].begin(), words[j].end(),
                            std::back_inserter(common));
      EXPECT_TRUE(common.empty()) << "tasks " << i << " and " << j << " share " << common.front();
    }
}

TEST(Generate, NearestCentroidSeparatesThemes) {
  const auto tasks = generate_tasks(8, 200, 7);
  HashVectorizer vec;
  vec.dim = 512;
  std::vector<std::vector<double>> centroid(tasks.size(), std::vector<double>(vec.dim, 0.0));
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t i = 0; i < 100; ++i) {
      const auto v = vectorize(tasks[t].examples[i].prompt, vec);
      for (std::size_t k = 0; k < vec.dim; ++k) centroid[t][k] += v[k];
    }
  std::size_t correct = 0, total = 0;
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t i = 100; i < 200; ++i) {
      const auto v = vectorize(tasks[t].examples[i].prompt, vec);
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t c = 0; c < tasks.size(); ++c) {
        double dot = 0, norm = 0;
        for (std::size_t k = 0; k < vec.dim; ++k) {
          dot += v[k] * centroid[c][k];
          norm += centroid[c][k] * centroid[c][k];
        }
        const double score = dot / std::sqrt(norm);
        if (score > best_score) best_score = score, best = c;
      }
      correct += best == t;
      ++total;
    }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.9);
}

TEST(Split, NineToOneAndDisjoint) {
  const auto task = generate_tasks(1, 1000, 2)[0];
  const SplitCorpus s = split_9_1(task, 5);
  EXPECT_EQ(s.train.examples.size(), 900u);
  EXPECT_EQ(s.test.examples.size(), 100u);
  // Disjoint as a partition of example indices: together they are a permutation.
  std::vector<Example> all = s.train.examples;
  all.insert(all.end(), s.test.examples.begin(), s.test.examples.end());
  auto key = [](const Example& e) { return e.prompt + "\t" + e.target; };
  std::multiset<std::string> a, b;
  for (const auto& e : all) a.insert(key(e));
  for (const auto& e : task.examples) b.insert(key(e));
  EXPECT_EQ(a, b);
  EXPECT_EQ(split_9_1(task, 5).test, s.test);
  EXPECT_NE(split_9_1(task, 6).test, s.test);

  TaskCorpus ten{"t", TaskKind::qa, std::vector<Example>(task.examples.begin(), task.examples.begin() + 10)};
  const SplitCorpus s10 = split_9_1(ten, 1);
  EXPECT_EQ(s10.train.examples.size(), 9u);
  EXPECT_EQ(s10.test.examples.size(), 1u);
  for (std::size_t n : {10u, 11u, 23u, 57u, 99u, 200u}) {
    TaskCorpus c{"t", TaskKind::qa, std::vector<Example>(task.examples.begin(), task.examples.begin() + n)};
    const auto sp = split_9_1(c, 3);
    EXPECT_LE(std::abs(static_cast<double>(sp.test.examples.size()) - static_cast<double>(n) / 10.0), 1.0) << n;
  }
  ten.examples.pop_back();
  EXPECT_THROW(split_9_1(ten, 1), DataError);
}

TEST(Jsonl, RoundtripIsExact) {
  TempDir dir;
  auto tasks = generate_tasks(3, 25, 4);
  tasks[0].examples[0].prompt = "quotes \" and \\ back\\slashes\nnewline";
  save_jsonl(tasks, dir / "all.jsonl");
  EXPECT_EQ(load_jsonl(dir / "all.jsonl"), tasks);
  save_corpus_dir(tasks, dir / "corpus", 4);
  EXPECT_EQ(load_corpus_dir(dir / "corpus"), tasks);
}

TEST(Jsonl, EmptyFileGivesEmptyCorpus) {
  TempDir dir;
  write_text_file(dir / "empty.jsonl", "");
  EXPECT_TRUE(load_jsonl(dir / "empty.jsonl").empty());
}

TEST(Jsonl, MalformedLineIsNamed) {
  TempDir dir;
  const std::string good = R"({"task_label":"a","prompt":"p","target":"t","kind":"qa"})";
  write_text_file(dir / "bad.jsonl", good + "\n" + good + "\n{not json\n" + good + "\n");
  try {
    load_jsonl(dir / "bad.jsonl");
    FAIL() << "expected parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  write_text_file(dir / "missing.jsonl", good + "\n" + R"({"task_label":"a","prompt":"p"})" + "\n");
  EXPECT_THROW(load_jsonl(dir / "missing.jsonl"), ParseError);
  write_text_file(dir / "kind.jsonl", R"({"task_label":"a","prompt":"p","target":"t","kind":"essay"})");
  EXPECT_THROW(load_jsonl(dir / "kind.jsonl"), ParseError);
  EXPECT_THROW(load_jsonl(dir / "absent.jsonl"), IoError);
  EXPECT_THROW(load_corpus_dir(dir / "absent"), IoError);
}
