#pragma once

#include <string>
#include <vector>

#include "dlplora/backbone.hpp"
#include "dlplora/corpus.hpp"
#include "dlplora/errors.hpp"
#include "dlplora/fusion.hpp"
#include "dlplora/router.hpp"
#include "dlplora/training.hpp"
#include "dlplora/vocabulary.hpp"

// Glue between corpus, router, adapters and backbone used by the command-line
// tool and the end-to-end tests.
namespace dlplora {

inline std::vector<std::string> task_labels_of(const std::vector<TaskCorpus>& tasks) {
  std::vector<std::string> labels;
  for (const auto& t : tasks) labels.push_back(t.task_label);
  return labels;
}

// Vocabulary over every prompt and target.
inline Vocabulary corpus_vocabulary(const std::vector<TaskCorpus>& tasks) {
  std::vector<std::string> texts;
  for (const auto& t : tasks) {
    for (const auto& ex : t.examples) {
      texts.push_back(ex.prompt);
      texts.push_back(ex.target);
    }
  }
  return Vocabulary::build(texts);
}

// Frozen random backbone sized to hold the corpus vocabulary.
inline Backbone init_backbone(const std::vector<TaskCorpus>& tasks, BackboneConfig cfg) {
  Vocabulary vocab = corpus_vocabulary(tasks);
  if (vocab.size() > cfg.vocab_size) {
    throw ConfigError("corpus needs " + std::to_string(vocab.size()) + " tokens but vocab_size is " +
                      std::to_string(cfg.vocab_size));
  }
  return Backbone(cfg, std::move(vocab));
}

inline std::vector<SplitCorpus> split_all(const std::vector<TaskCorpus>& tasks, std::uint64_t seed) {
  std::vector<SplitCorpus> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) out.push_back(split_9_1(tasks[i], Rng::mix(seed, i)));
  return out;
}

inline std::vector<TaskCorpus> train_parts(const std::vector<SplitCorpus>& splits) {
  std::vector<TaskCorpus> out;
  for (const auto& s : splits) out.push_back(s.train);
  return out;
}

inline std::vector<TaskCorpus> test_parts(const std::vector<SplitCorpus>& splits) {
  std::vector<TaskCorpus> out;
  for (const auto& s : splits) out.push_back(s.test);
  return out;
}

// Each prompt labeled with the index of its task.
inline std::vector<LabeledSentence> router_sentences(const std::vector<TaskCorpus>& tasks) {
  std::vector<LabeledSentence> out;
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (const auto& ex : tasks[t].examples) out.push_back({ex.prompt, t});
  return out;
}

struct RouterBuild {
  RouterModel model;
  RouterTrainResult training;
};

inline RouterBuild build_router(const std::vector<TaskCorpus>& tasks, const RouterTrainConfig& train_cfg,
                                const RouterConfig& route_cfg) {
  route_cfg.validate();
  RouterBuild b{{}, train_router(router_sentences(tasks), train_cfg)};
  b.model.vectorizer = train_cfg.vectorizer;
  b.model.mlp = b.training.mlp;
  b.model.task_labels = task_labels_of(tasks);
  b.model.config = route_cfg;
  return b;
}

// One adapter per task, each trained on that task alone.
inline LoraRegistry train_adapters(const Backbone& bb, const std::vector<TaskCorpus>& tasks,
                                   const LoraTrainConfig& cfg,
                                   const std::function<void(const std::string&, std::size_t, double)>&
                                       on_epoch = {}) {
  LoraRegistry registry;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    LoraTrainConfig c = cfg;
    c.seed = Rng::mix(cfg.seed, i);
    const std::string& label = tasks[i].task_label;
    auto result = train_adapter(bb, tasks[i], c, [&](std::size_t epoch, double loss) {
      if (on_epoch) on_epoch(label, epoch, loss);
    });
    registry.register_adapter(result.adapter);
  }
  return registry;
}

}  // namespace dlplora
