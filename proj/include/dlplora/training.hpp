#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dlplora/backbone.hpp"
#include "dlplora/corpus.hpp"
#include "dlplora/errors.hpp"
#include "dlplora/lora.hpp"
#include "dlplora/numerics.hpp"

namespace dlplora {

// A token sequence trained by next-token prediction. Only predictions of
// tokens at index >= loss_from contribute to the loss.
struct TrainingSequence {
  std::vector<TokenId> tokens;
  std::size_t loss_from = 1;
};

// prompt tokens, then target tokens and <eos>; loss on the target part only.
inline TrainingSequence make_training_sequence(const Vocabulary& vocab, const Example& ex) {
  TrainingSequence seq;
  seq.tokens = vocab.encode(ex.prompt);
  seq.loss_from = seq.tokens.size();
  for (TokenId t : vocab.encode(ex.target)) seq.tokens.push_back(t);
  seq.tokens.push_back(Vocabulary::kEos);
  return seq;
}

struct LossAndGradient {
  double loss = 0.0;
  Matrix dlogits;
};

// Mean cross-entropy over the supervised positions and its gradient.
inline LossAndGradient next_token_loss(const Matrix& logits, const TrainingSequence& seq) {
  const std::size_t n = seq.tokens.size();
  LossAndGradient out{0.0, Matrix(logits.rows(), logits.cols())};
  const std::size_t first = seq.loss_from == 0 ? 0 : seq.loss_from - 1;
  if (n < 2 || first + 1 >= n) throw ContractError("training sequence has no supervised token");
  const double count = static_cast<double>(n - 1 - first);
  std::vector<float> probs(logits.cols());
  for (std::size_t t = first; t + 1 < n; ++t) {
    auto row = logits.row(t);
    std::copy(row.begin(), row.end(), probs.begin());
    softmax_inplace(probs);
    const TokenId target = seq.tokens[t + 1];
    out.loss -= std::log(std::max(static_cast<double>(probs[target]), 1e-30));
    for (std::size_t j = 0; j < probs.size(); ++j) {
      out.dlogits(t, j) = static_cast<float>((probs[j] - (j == target ? 1.0 : 0.0)) / count);
    }
  }
  out.loss /= count;
  return out;
}

// Loss of one sequence; optionally accumulates base and/or adapter gradients.
inline double sequence_loss(const Backbone& bb, const TrainingSequence& seq,
                            const SingleAdapterPath* lora, BackboneWeights* base_grads,
                            LoraGradients* lora_grads) {
  const ForwardTape tape = bb.forward_with_tape(seq.tokens, lora);
  LossAndGradient lg = next_token_loss(tape.logits, seq);
  if (base_grads || lora_grads) bb.backward(tape, lg.dlogits, base_grads, lora, lora_grads);
  return lg.loss;
}

struct BackboneTrainConfig {
  float learning_rate = 0.05f;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Full-parameter training with plain SGD; returns the mean loss per epoch.
inline std::vector<double> train_backbone(Backbone& bb, const std::vector<TrainingSequence>& data,
                                          const BackboneTrainConfig& cfg,
                                          const EpochCallback& on_epoch = {}) {
  if (data.empty()) throw ContractError("train_backbone on an empty dataset");
  if (cfg.epochs < 1) throw ContractError("train_backbone needs epochs >= 1");
  if (!(cfg.learning_rate > 0.0f)) throw ContractError("train_backbone needs learning_rate > 0");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed);
  std::vector<double> losses;
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      BackboneWeights grads = BackboneWeights::zeros(bb.config());
      for (std::size_t i = start; i < end; ++i)
        total += sequence_loss(bb, data[order[i]], nullptr, &grads, nullptr);
      const float step = -cfg.learning_rate / static_cast<float>(end - start);
      BackboneWeights& w = bb.mutable_weights();
      std::vector<Matrix*> targets;
      w.for_each([&](const std::string&, Matrix& m) { targets.push_back(&m); });
      std::size_t k = 0;
      grads.for_each([&](const std::string&, Matrix& g) { axpy(*targets[k++], g, step); });
    }
    const double mean = total / static_cast<double>(order.size());
    if (!std::isfinite(mean)) {
      throw DivergenceError("backbone training loss became non-finite in epoch " +
                            std::to_string(epoch + 1));
    }
    losses.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return losses;
}

struct LoraTrainConfig {
  float learning_rate = 0.5f;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t rank = 4;
  float scale = 1.0f;
  float init_std = 0.02f;      // A ~ gaussian(0, init_std); B = 0
  bool include_ffn = false;    // attention projections only by default

  void validate() const {
    if (!(learning_rate > 0.0f)) throw ContractError("LoRA training needs learning_rate > 0");
    if (epochs < 1) throw ContractError("LoRA training needs epochs >= 1");
    if (rank < 1) throw RankError("LoRA rank must be >= 1");
  }
};

struct AdapterTrainingResult {
  LoraAdapter adapter;
  std::vector<double> epoch_losses;
};

// Fresh adapter: A gaussian, B zero, so the adapted model starts equal to
// the base model.
inline LoraAdapter init_adapter(const Backbone& bb, const std::string& adapter_id,
                                const std::string& task_label, const LoraTrainConfig& cfg) {
  LoraAdapter adapter(adapter_id, task_label, cfg.rank, cfg.scale);
  Rng rng(cfg.seed ^ 0x6c6f7261ull);
  for (const auto& name : bb.list_injection_points(cfg.include_ffn)) {
    const Matrix& w = bb.projection_weight(InjectionPoint::parse(name));
    if (cfg.rank > std::min(w.rows(), w.cols())) {
      throw RankError("rank " + std::to_string(cfg.rank) + " exceeds min(h, d) = " +
                      std::to_string(std::min(w.rows(), w.cols())) + " at " + name);
    }
    Matrix a(w.rows(), cfg.rank);
    for (float& v : a.flat()) v = rng.gaussian(0.0f, cfg.init_std);
    adapter.add_layer(name, std::move(a), Matrix(cfg.rank, w.cols()));
  }
  return adapter;
}

// Trains only the adapter factors by next-token cross-entropy with SGD; the
// backbone stays frozen.
inline AdapterTrainingResult train_adapter(const Backbone& bb,
                                           const std::vector<TrainingSequence>& data,
                                           const LoraTrainConfig& cfg,
                                           const std::string& adapter_id,
                                           const std::string& task_label,
                                           const EpochCallback& on_epoch = {}) {
  if (data.empty()) throw ContractError("train_adapter on an empty corpus");
  cfg.validate();
  AdapterTrainingResult result{init_adapter(bb, adapter_id, task_label, cfg), {}};
  LoraAdapter& adapter = result.adapter;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed);
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      LoraGradients grads;
      {
        const SingleAdapterPath path(adapter, bb.config());
        for (std::size_t i = start; i < end; ++i)
          total += sequence_loss(bb, data[order[i]], &path, nullptr, &grads);
      }
      const float step = -cfg.learning_rate / static_cast<float>(end - start);
      for (std::size_t pid = 0; pid < grads.pairs.size(); ++pid) {
        if (!grads.pairs[pid]) continue;
        LoraPair& p = adapter.mutable_layer(InjectionPoint::from_id(pid).name());
        axpy(p.a, grads.pairs[pid]->a, step);
        axpy(p.b, grads.pairs[pid]->b, step);
      }
    }
    const double mean = total / static_cast<double>(order.size());
    if (!std::isfinite(mean)) {
      throw DivergenceError("adapter '" + adapter_id + "' loss became non-finite in epoch " +
                            std::to_string(epoch + 1));
    }
    result.epoch_losses.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return result;
}

inline AdapterTrainingResult train_adapter(const Backbone& bb, const TaskCorpus& corpus,
                                           const LoraTrainConfig& cfg,
                                           const EpochCallback& on_epoch = {}) {
  if (corpus.examples.empty()) {
    throw ContractError("train_adapter: task '" + corpus.task_label + "' has no examples");
  }
  std::vector<TrainingSequence> data;
  data.reserve(corpus.examples.size());
  for (const auto& ex : corpus.examples) data.push_back(make_training_sequence(bb.vocab(), ex));
  return train_adapter(bb, data, cfg, corpus.task_label, corpus.task_label, on_epoch);
}

}  // namespace dlplora
