#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlplora/errors.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/numerics.hpp"
#include "dlplora/vocabulary.hpp"

namespace dlplora {

// Bag of hashed character n-grams. Each whitespace/punctuation token is padded
// with spaces and cut into n-grams of length [ngram_min, ngram_max]; n-grams
// never span two tokens, so the counts of a concatenation are the sum of the
// parts' counts.
struct HashVectorizer {
  std::size_t dim = 1024;
  std::size_t ngram_min = 2;
  std::size_t ngram_max = 4;
  std::uint64_t hash_seed = 0;

  void validate() const {
    if (dim < 64) throw ConfigError("vectorizer dim must be >= 64");
    if (ngram_min < 1 || ngram_min > ngram_max || ngram_max > 5) {
      throw ConfigError("vectorizer needs 1 <= ngram_min <= ngram_max <= 5");
    }
  }

  std::size_t bucket(std::string_view gram) const {
    std::uint64_t h = 0xcbf29ce484222325ull ^ Rng::mix(hash_seed);
    for (unsigned char c : gram) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return static_cast<std::size_t>(Rng::mix(h) % dim);
  }

  // Unnormalized n-gram counts, scaled by `weight`, added into `acc`.
  void accumulate_counts(const std::vector<std::string>& tokens, float weight,
                         std::vector<float>& acc) const {
    for (const auto& tok : tokens) {
      const std::string padded = " " + tok + " ";
      for (std::size_t n = ngram_min; n <= ngram_max; ++n) {
        if (padded.size() < n) break;
        for (std::size_t i = 0; i + n <= padded.size(); ++i)
          acc[bucket(std::string_view(padded).substr(i, n))] += weight;
      }
    }
  }

  friend bool operator==(const HashVectorizer&, const HashVectorizer&) = default;
};

inline void l2_normalize(std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  if (s <= 0.0) return;
  const float inv = static_cast<float>(1.0 / std::sqrt(s));
  for (float& x : v) x *= inv;
}

// L2-normalized n-gram counts; the empty string maps to the zero vector.
inline std::vector<float> vectorize(std::string_view text, const HashVectorizer& vec) {
  vec.validate();
  std::vector<float> out(vec.dim, 0.0f);
  vec.accumulate_counts(Vocabulary::split(text), 1.0f, out);
  l2_normalize(out);
  return out;
}

// Four affine layers, ReLU between them, softmax over tasks at the end.
class MiniMlp {
 public:
  static constexpr std::size_t kLayers = 4;

  MiniMlp() = default;

  // Zero weights and biases: every input maps to the uniform distribution.
  explicit MiniMlp(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.size() != kLayers + 1) {
      throw ConfigError("mini-MLP needs exactly 5 layer dims (4 affine layers), got " +
                        std::to_string(dims_.size()));
    }
    for (std::size_t d : dims_)
      if (d == 0) throw ConfigError("mini-MLP layer dims must be >= 1");
    for (std::size_t i = 0; i < kLayers; ++i) {
      weights_.emplace_back(dims_[i], dims_[i + 1]);
      biases_.emplace_back(1, dims_[i + 1]);
    }
  }

  // He-scaled gaussian hidden layers. The output layer is zero unless
  // `random_output` is set, which keeps a fresh model class-symmetric.
  static MiniMlp random(std::vector<std::size_t> dims, std::uint64_t seed,
                        bool random_output = false) {
    MiniMlp m(std::move(dims));
    Rng rng(seed);
    for (std::size_t i = 0; i < kLayers; ++i) {
      if (i + 1 == kLayers && !random_output) break;
      const float std = std::sqrt(2.0f / static_cast<float>(m.dims_[i]));
      for (float& v : m.weights_[i].flat()) v = rng.gaussian(0.0f, std);
    }
    return m;
  }

  static std::size_t parameter_count_for(const std::vector<std::size_t>& dims) {
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) n += dims[i] * dims[i + 1] + dims[i + 1];
    return n;
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t parameter_count() const { return parameter_count_for(dims_); }

  std::vector<Matrix>& weights() noexcept { return weights_; }
  std::vector<Matrix>& biases() noexcept { return biases_; }
  const std::vector<Matrix>& weights() const noexcept { return weights_; }
  const std::vector<Matrix>& biases() const noexcept { return biases_; }

  struct Activations {
    std::vector<Matrix> inputs;  // input of each affine layer (post-ReLU for hidden)
    Matrix logits;
  };

  // Batch forward: x is [batch x D], returns logits [batch x N].
  Matrix logits(const Matrix& x, Activations* acts = nullptr) const {
    if (x.cols() != input_dim()) {
      throw ConfigError("mini-MLP expects inputs of dim " + std::to_string(input_dim()) +
                        ", got " + std::to_string(x.cols()));
    }
    Matrix h = x;
    if (acts) acts->inputs.clear();
    for (std::size_t i = 0; i < kLayers; ++i) {
      if (acts) acts->inputs.push_back(h);
      Matrix z(h.rows(), dims_[i + 1]);
      for (std::size_t r = 0; r < z.rows(); ++r)
        std::copy(biases_[i].flat().begin(), biases_[i].flat().end(), z.row(r).begin());
      matmul_accumulate(h, weights_[i], z);
      if (i + 1 < kLayers)
        for (float& v : z.flat()) v = v > 0.0f ? v : 0.0f;
      h = std::move(z);
    }
    if (acts) acts->logits = h;
    return h;
  }

  std::vector<float> probabilities(std::span<const float> features) const {
    Matrix x(1, features.size(), std::vector<float>(features.begin(), features.end()));
    Matrix z = logits(x);
    softmax_inplace(z.flat());
    return std::vector<float>(z.flat().begin(), z.flat().end());
  }

  struct Gradients {
    std::vector<Matrix> weights;
    std::vector<Matrix> biases;
  };

  // Gradients of loss given dlogits, from recorded activations.
  Gradients backward(const Activations& acts, const Matrix& dlogits) const {
    Gradients g;
    g.weights.resize(kLayers);
    g.biases.resize(kLayers);
    Matrix dz = dlogits;
    for (std::size_t i = kLayers; i-- > 0;) {
      const Matrix& in = acts.inputs[i];
      g.weights[i] = matmul_at_b(in, dz);
      g.biases[i] = Matrix(1, dz.cols());
      for (std::size_t r = 0; r < dz.rows(); ++r)
        for (std::size_t c = 0; c < dz.cols(); ++c) g.biases[i](0, c) += dz(r, c);
      if (i == 0) break;
      Matrix dh = matmul_a_bt(dz, weights_[i]);
      for (std::size_t k = 0; k < dh.size(); ++k)
        if (in.data()[k] <= 0.0f) dh.data()[k] = 0.0f;
      dz = std::move(dh);
    }
    return g;
  }

  friend bool operator==(const MiniMlp&, const MiniMlp&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<Matrix> weights_;
  std::vector<Matrix> biases_;
};

// How fusion weights are formed from the selected probabilities.
enum class FusionWeighting {
  softmax,      // softmax over the selected probability values (literal form)
  renormalize,  // p_i / sum(p_sel); identical to softmax over the selected logits
};

inline std::string_view to_string(FusionWeighting w) {
  return w == FusionWeighting::softmax ? "softmax" : "renormalize";
}

inline FusionWeighting fusion_weighting_from_string(std::string_view s) {
  if (s == "softmax") return FusionWeighting::softmax;
  if (s == "renormalize") return FusionWeighting::renormalize;
  throw ConfigError("unknown fusion weighting '" + std::string(s) + "'");
}

struct RouterConfig {
  float p_threshold = 0.3f;
  std::size_t history_window = 64;  // trailing history tokens seen by the classifier
  float history_weight = 0.3f;      // n-gram count weight of history relative to the sentence
  FusionWeighting weighting = FusionWeighting::softmax;

  void validate() const {
    if (!(p_threshold > 0.0f && p_threshold <= 1.0f)) {
      throw ContractError("p threshold must lie in (0, 1], got " + std::to_string(p_threshold));
    }
    if (!(history_weight >= 0.0f)) throw ConfigError("history_weight must be >= 0");
  }

  friend bool operator==(const RouterConfig&, const RouterConfig&) = default;
};

// Classifier input: n-gram counts of the sentence plus history_weight times
// the counts of the trailing history window, L2-normalized.
inline std::vector<float> classifier_features(std::string_view sentence, std::string_view history,
                                              const HashVectorizer& vec, const RouterConfig& cfg) {
  vec.validate();
  std::vector<float> acc(vec.dim, 0.0f);
  vec.accumulate_counts(Vocabulary::split(sentence), 1.0f, acc);
  if (cfg.history_window > 0 && cfg.history_weight > 0.0f && !history.empty()) {
    std::vector<std::string> h = Vocabulary::split(history);
    if (h.size() > cfg.history_window)
      h.erase(h.begin(), h.end() - static_cast<std::ptrdiff_t>(cfg.history_window));
    vec.accumulate_counts(h, cfg.history_weight, acc);
  }
  l2_normalize(acc);
  return acc;
}

inline std::vector<float> classify(std::string_view sentence, std::string_view history,
                                   const MiniMlp& mlp, const HashVectorizer& vec,
                                   const RouterConfig& cfg) {
  if (mlp.input_dim() != vec.dim) {
    throw ConfigError("vectorizer dim " + std::to_string(vec.dim) +
                      " does not match mini-MLP input dim " + std::to_string(mlp.input_dim()));
  }
  return mlp.probabilities(classifier_features(sentence, history, vec, cfg));
}

struct LabeledSentence {
  std::string sentence;
  std::size_t task_index = 0;
};

struct RouterTrainConfig {
  HashVectorizer vectorizer;
  std::vector<std::size_t> hidden_dims = {256, 128, 64};
  std::size_t epochs = 20;
  float learning_rate = 0.5f;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct RouterTrainResult {
  MiniMlp mlp;
  double held_out_accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::vector<double> epoch_losses;
};

// Mean cross-entropy over a batch of logits; dlogits written in place.
inline double softmax_cross_entropy(Matrix& logits_to_grad, std::span<const std::size_t> labels) {
  const std::size_t b = logits_to_grad.rows();
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    auto row = logits_to_grad.row(r);
    softmax_inplace(row);
    loss -= std::log(std::max(static_cast<double>(row[labels[r]]), 1e-30));
    row[labels[r]] -= 1.0f;
    for (float& v : row) v /= static_cast<float>(b);
  }
  return loss / static_cast<double>(b);
}

// Trains the mini-MLP by mini-batch gradient descent on a 9:1 split. The
// split is made per class from one seeded shuffle of all examples, so it does
// not depend on how classes are numbered.
inline RouterTrainResult train_router(const std::vector<LabeledSentence>& labeled,
                                      const RouterTrainConfig& cfg) {
  cfg.vectorizer.validate();
  if (labeled.empty()) throw DataError("train_router needs labeled sentences");
  std::size_t n_tasks = 0;
  for (const auto& l : labeled) n_tasks = std::max(n_tasks, l.task_index + 1);
  std::vector<std::size_t> per_class(n_tasks, 0);
  for (const auto& l : labeled) ++per_class[l.task_index];
  for (std::size_t c = 0; c < n_tasks; ++c) {
    if (per_class[c] < 2) {
      throw DataError("task index " + std::to_string(c) + " has " + std::to_string(per_class[c]) +
                      " examples; at least 2 are required");
    }
  }
  if (cfg.hidden_dims.size() != 3) throw ConfigError("mini-MLP needs three hidden dims");

  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  rng.shuffle(order);
  std::vector<std::size_t> test_quota(n_tasks), seen(n_tasks, 0);
  for (std::size_t c = 0; c < n_tasks; ++c)
    test_quota[c] = std::max<std::size_t>(1, (per_class[c] + 5) / 10);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i : order) {
    const std::size_t c = labeled[i].task_index;
    (seen[c]++ < test_quota[c] ? test_idx : train_idx).push_back(i);
  }

  std::vector<std::vector<float>> features(labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i)
    features[i] = vectorize(labeled[i].sentence, cfg.vectorizer);

  std::vector<std::size_t> dims = {cfg.vectorizer.dim};
  dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  dims.push_back(n_tasks);
  RouterTrainResult result{MiniMlp::random(dims, cfg.seed ^ 0x6d6c70ull), 0.0, train_idx.size(),
                           test_idx.size(), {}};
  MiniMlp& mlp = result.mlp;

  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  std::vector<std::size_t> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double total = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += batch) {
      const std::size_t end = std::min(train_idx.size(), start + batch);
      Matrix x(end - start, cfg.vectorizer.dim);
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto& f = features[train_idx[i]];
        std::copy(f.begin(), f.end(), x.row(i - start).begin());
        labels.push_back(labeled[train_idx[i]].task_index);
      }
      MiniMlp::Activations acts;
      Matrix dlogits = mlp.logits(x, &acts);
      total += softmax_cross_entropy(dlogits, labels) * static_cast<double>(end - start);
      const MiniMlp::Gradients g = mlp.backward(acts, dlogits);
      for (std::size_t l = 0; l < MiniMlp::kLayers; ++l) {
        axpy(mlp.weights()[l], g.weights[l], -cfg.learning_rate);
        axpy(mlp.biases()[l], g.biases[l], -cfg.learning_rate);
      }
    }
    const double mean = total / static_cast<double>(std::max<std::size_t>(1, train_idx.size()));
    if (!std::isfinite(mean)) {
      throw DivergenceError("router training loss became non-finite in epoch " +
                            std::to_string(epoch + 1));
    }
    result.epoch_losses.push_back(mean);
  }

  std::size_t correct = 0;
  for (std::size_t i : test_idx) {
    const auto probs = mlp.probabilities(features[i]);
    const auto best = static_cast<std::size_t>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
    correct += best == labeled[i].task_index;
  }
  result.held_out_accuracy =
      test_idx.empty() ? 1.0 : static_cast<double>(correct) / static_cast<double>(test_idx.size());
  return result;
}

inline void check_distribution(std::span<const float> probs) {
  if (probs.empty()) throw ContractError("empty probability vector");
  double s = 0.0;
  for (float p : probs) {
    if (!(p >= 0.0f)) throw ContractError("probability vector has a negative or NaN entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-4) {
    throw ContractError("probability vector sums to " + std::to_string(s) + ", not 1");
  }
}

// Every index whose probability reaches p; the argmax alone when none does.
inline std::vector<std::size_t> select_top_p(std::span<const float> probs, float p) {
  if (!(p > 0.0f && p <= 1.0f)) {
    throw ContractError("p threshold must lie in (0, 1], got " + std::to_string(p));
  }
  check_distribution(probs);
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (probs[i] >= p) selected.push_back(i);
  if (selected.empty()) {
    selected.push_back(static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) -
                                                probs.begin()));
  }
  return selected;
}

// Fusion weights aligned with `selected`.
inline std::vector<float> fusion_weights(std::span<const float> probs,
                                         std::span<const std::size_t> selected,
                                         FusionWeighting weighting = FusionWeighting::softmax) {
  if (selected.empty()) throw ContractError("fusion_weights of an empty selection");
  std::vector<float> values;
  values.reserve(selected.size());
  for (std::size_t i : selected) {
    if (i >= probs.size()) {
      throw ContractError("selected index " + std::to_string(i) + " out of range");
    }
    values.push_back(probs[i]);
  }
  if (weighting == FusionWeighting::softmax) {
    softmax_inplace(values);
    return values;
  }
  double s = 0.0;
  for (float v : values) s += v;
  if (s <= 0.0) throw ContractError("selected probabilities sum to zero");
  for (float& v : values) v = static_cast<float>(v / s);
  return values;
}

// Trained classifier plus everything needed to use it: vectorizer, routing
// configuration and the task index -> label table.
struct RouterModel {
  HashVectorizer vectorizer;
  MiniMlp mlp;
  std::vector<std::string> task_labels;
  RouterConfig config;

  std::vector<float> classify(std::string_view sentence, std::string_view history) const {
    return dlplora::classify(sentence, history, mlp, vectorizer, config);
  }

  friend bool operator==(const RouterModel&, const RouterModel&) = default;
};

inline constexpr int kRouterFormatVersion = 1;

inline Json router_to_json(const RouterModel& r) {
  Json weights = Json::array(), biases = Json::array();
  for (const auto& w : r.mlp.weights()) weights.push_back(matrix_to_json(w));
  for (const auto& b : r.mlp.biases()) biases.push_back(vector_to_json(b.flat()));
  return {{"format_version", kRouterFormatVersion},
          {"vectorizer",
           {{"dim", r.vectorizer.dim},
            {"ngram_min", r.vectorizer.ngram_min},
            {"ngram_max", r.vectorizer.ngram_max},
            {"hash_seed", r.vectorizer.hash_seed}}},
          {"router_config",
           {{"p_threshold", static_cast<double>(r.config.p_threshold)},
            {"history_window", r.config.history_window},
            {"history_weight", static_cast<double>(r.config.history_weight)},
            {"weighting", std::string(to_string(r.config.weighting))}}},
          {"layer_dims", r.mlp.dims()},
          {"weights", std::move(weights)},
          {"biases", std::move(biases)},
          {"task_labels", r.task_labels}};
}

inline RouterModel router_from_json(const Json& doc) {
  check_format_version(doc, kRouterFormatVersion, "router");
  try {
    RouterModel r;
    const Json& v = doc.at("vectorizer");
    r.vectorizer.dim = v.at("dim").get<std::size_t>();
    r.vectorizer.ngram_min = v.at("ngram_min").get<std::size_t>();
    r.vectorizer.ngram_max = v.at("ngram_max").get<std::size_t>();
    r.vectorizer.hash_seed = v.at("hash_seed").get<std::uint64_t>();
    r.vectorizer.validate();
    const Json& c = doc.at("router_config");
    r.config.p_threshold = static_cast<float>(c.at("p_threshold").get<double>());
    r.config.history_window = c.at("history_window").get<std::size_t>();
    r.config.history_weight = static_cast<float>(c.at("history_weight").get<double>());
    r.config.weighting = fusion_weighting_from_string(c.at("weighting").get<std::string>());
    r.mlp = MiniMlp(doc.at("layer_dims").get<std::vector<std::size_t>>());
    for (std::size_t i = 0; i < MiniMlp::kLayers; ++i) {
      Matrix w = matrix_from_json(doc.at("weights").at(i), "router weight");
      std::vector<float> b = vector_from_json(doc.at("biases").at(i), "router bias");
      require_same_shape(w, r.mlp.weights()[i], "router weight");
      if (b.size() != r.mlp.biases()[i].cols()) throw FormatError("router bias size mismatch");
      const std::size_t width = b.size();
      r.mlp.weights()[i] = std::move(w);
      r.mlp.biases()[i] = Matrix(1, width, std::move(b));
    }
    r.task_labels = doc.at("task_labels").get<std::vector<std::string>>();
    if (r.task_labels.size() != r.mlp.output_dim()) {
      throw FormatError("router has " + std::to_string(r.task_labels.size()) +
                        " task labels for " + std::to_string(r.mlp.output_dim()) + " outputs");
    }
    if (r.vectorizer.dim != r.mlp.input_dim()) throw FormatError("router vectorizer/MLP dim mismatch");
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("router: ") + e.what());
  }
}

inline void save_router(const RouterModel& r, const std::filesystem::path& path) {
  write_json_file(path, router_to_json(r));
}

inline RouterModel load_router(const std::filesystem::path& path) {
  return router_from_json(read_json_file(path));
}

}  // namespace dlplora
