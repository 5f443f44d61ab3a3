#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlplora/errors.hpp"
#include "dlplora/injection.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/lora.hpp"
#include "dlplora/numerics.hpp"
#include "dlplora/vocabulary.hpp"

namespace dlplora {

struct BackboneConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || ffn_dim == 0 ||
        max_seq_len == 0) {
      throw ConfigError("backbone config counts must all be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
  }

  // Token and position embeddings, four attention projections, two FFN
  // projections, two layer norms per block, a final layer norm; the output
  // projection is tied to the token embedding.
  std::size_t analytic_parameter_count() const {
    const std::size_t d = d_model;
    return vocab_size * d + max_seq_len * d +
           n_layers * (4 * d * d + 2 * d * ffn_dim + 4 * d) + 2 * d;
  }

  std::size_t point_count() const { return n_layers * kProjectionCount; }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline Json backbone_config_to_json(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},     {"ffn_dim", c.ffn_dim},   {"max_seq_len", c.max_seq_len},
          {"seed", c.seed}};
}

inline BackboneConfig backbone_config_from_json(const Json& j) {
  BackboneConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;  // [1 x d]
  std::array<Matrix, kProjectionCount> proj;  // query/key/value/output [d x d], ffn_up [d x F], ffn_down [F x d]
  Matrix ln2_gain, ln2_bias;
};

struct BackboneWeights {
  Matrix tok_emb;  // [V x d], also the (transposed) output projection
  Matrix pos_emb;  // [T x d]
  std::vector<LayerWeights> layers;
  Matrix lnf_gain, lnf_bias;

  static BackboneWeights zeros(const BackboneConfig& c) {
    BackboneWeights w;
    const std::size_t d = c.d_model;
    w.tok_emb = Matrix(c.vocab_size, d);
    w.pos_emb = Matrix(c.max_seq_len, d);
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
      l.ln1_gain = Matrix(1, d);
      l.ln1_bias = Matrix(1, d);
      l.ln2_gain = Matrix(1, d);
      l.ln2_bias = Matrix(1, d);
      for (std::size_t p = 0; p < kAttentionProjectionCount; ++p) l.proj[p] = Matrix(d, d);
      l.proj[static_cast<std::size_t>(Projection::ffn_up)] = Matrix(d, c.ffn_dim);
      l.proj[static_cast<std::size_t>(Projection::ffn_down)] = Matrix(c.ffn_dim, d);
    }
    w.lnf_gain = Matrix(1, d);
    w.lnf_bias = Matrix(1, d);
    return w;
  }

  // Visits every tensor with a stable name, in a stable order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(std::string("tok_emb"), tok_emb);
    fn(std::string("pos_emb"), pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i) + ".";
      auto& l = layers[i];
      fn(prefix + "ln1_gain", l.ln1_gain);
      fn(prefix + "ln1_bias", l.ln1_bias);
      for (std::size_t p = 0; p < kProjectionCount; ++p)
        fn(prefix + std::string(kProjectionNames[p]), l.proj[p]);
      fn(prefix + "ln2_gain", l.ln2_gain);
      fn(prefix + "ln2_bias", l.ln2_bias);
    }
    fn(std::string("lnf_gain"), lnf_gain);
    fn(std::string("lnf_bias"), lnf_bias);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<BackboneWeights*>(this)->for_each(
        [&](const std::string& name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
  }
};

// Extra term added to a projection's output, keyed by injection point id.
class AdapterPath {
 public:
  virtual ~AdapterPath() = default;
  virtual void add_delta(std::size_t point_id, const Matrix& in, Matrix& out) const = 0;
};

// Unmerged side path for a single adapter: out += scale * (in*A)*B.
class SingleAdapterPath final : public AdapterPath {
 public:
  SingleAdapterPath(const LoraAdapter& adapter, const BackboneConfig& config)
      : scale_(adapter.scale()), pairs_(config.point_count(), nullptr) {
    for (const auto& [name, pair] : adapter.layers()) {
      const InjectionPoint pt = InjectionPoint::parse(name);
      if (pt.layer_index >= config.n_layers) {
        throw LookupError("adapter layer '" + name + "' is outside the backbone");
      }
      pairs_[pt.id()] = &pair;
    }
  }

  const LoraPair* pair(std::size_t point_id) const { return pairs_[point_id]; }
  float scale() const noexcept { return scale_; }

  void add_delta(std::size_t point_id, const Matrix& in, Matrix& out) const override {
    const LoraPair* p = pairs_[point_id];
    if (p == nullptr) return;
    const Matrix t = matmul(in, p->a);
    matmul_accumulate(t, p->b, out, scale_);
  }

 private:
  float scale_;
  std::vector<const LoraPair*> pairs_;
};

struct LayerNormCache {
  Matrix xhat;
  std::vector<float> rstd;
};

inline constexpr float kLayerNormEps = 1e-5f;

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                         LayerNormCache* cache = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d);
  if (cache) {
    cache->xhat = Matrix(n, d);
    cache->rstd.assign(n, 0.0f);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto row = x.row(i);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const float rstd = static_cast<float>(1.0 / std::sqrt(var + kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      const float xh = static_cast<float>(row[j] - mean) * rstd;
      if (cache) cache->xhat(i, j) = xh;
      y(i, j) = xh * gain(0, j) + bias(0, j);
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                                  Matrix* dgain, Matrix* dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<float> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const float g = dy(i, j);
      if (dgain) (*dgain)(0, j) += g * cache.xhat(i, j);
      if (dbias) (*dbias)(0, j) += g;
      dxhat[j] = g * gain(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * cache.xhat(i, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = cache.rstd[i] * static_cast<float>(dxhat[j] - mean_dxhat -
                                                   cache.xhat(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

// Activations of one block, kept for the backward pass.
struct LayerTape {
  Matrix x_in;
  LayerNormCache ln1;
  Matrix a;              // ln1 output
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head [n x n], causal
  Matrix att;            // concatenated head outputs
  Matrix x_mid;
  LayerNormCache ln2;
  Matrix b;              // ln2 output
  Matrix up;             // pre-activation
  Matrix act;            // relu(up)
};

struct ForwardTape {
  std::vector<TokenId> tokens;
  std::vector<LayerTape> layers;
  Matrix x_final;  // residual stream before final norm
  LayerNormCache lnf;
  Matrix xf;       // final norm output
  Matrix logits;
};

// Per-point (dA, dB) gradients of a single trainable adapter.
struct LoraGradients {
  std::vector<std::optional<LoraPair>> pairs;
};

// Key/value cache for incremental decoding.
struct DecodeState {
  std::vector<Matrix> keys;    // per layer [T x d]
  std::vector<Matrix> values;  // per layer [T x d]
  std::size_t length = 0;
};

struct GenerateOptions {
  std::size_t max_new = 32;
  std::optional<TokenId> eos = Vocabulary::kEos;
  // When non-empty, the i-th emitted token is taken from here instead of the
  // argmax (logits are still computed). Used for fixed-length workloads.
  std::span<const TokenId> forced;
};

struct GenerationHooks {
  // Called before a prompt token is fed to the model.
  std::function<void(std::size_t position, TokenId token)> before_prompt_token;
  // Called after each emitted token, before it is fed back.
  std::function<void(std::size_t position, TokenId token)> on_token;
};

class Backbone {
 public:
  Backbone() = default;

  explicit Backbone(BackboneConfig config, Vocabulary vocab = {})
      : config_(config), vocab_(std::move(vocab)) {
    config_.validate();
    if (vocab_.size() > config_.vocab_size) {
      throw ConfigError("vocabulary of " + std::to_string(vocab_.size()) +
                        " tokens exceeds vocab_size " + std::to_string(config_.vocab_size));
    }
    weights_ = BackboneWeights::zeros(config_);
    initialize();
  }

  Backbone(BackboneConfig config, Vocabulary vocab, BackboneWeights weights)
      : config_(config), vocab_(std::move(vocab)), weights_(std::move(weights)) {
    config_.validate();
  }

  const BackboneConfig& config() const noexcept { return config_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const BackboneWeights& weights() const noexcept { return weights_; }
  BackboneWeights& mutable_weights() noexcept { return weights_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    weights_.for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  std::vector<std::string> list_injection_points(bool include_ffn = false) const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::size_t count = include_ffn ? kProjectionCount : kAttentionProjectionCount;
      for (std::size_t p = 0; p < count; ++p)
        names.push_back(InjectionPoint{l, static_cast<Projection>(p)}.name());
    }
    return names;
  }

  const Matrix& projection_weight(const InjectionPoint& pt) const {
    check_point(pt);
    return weights_.layers[pt.layer_index].proj[static_cast<std::size_t>(pt.projection)];
  }

  Matrix& mutable_projection_weight(const InjectionPoint& pt) {
    check_point(pt);
    return weights_.layers[pt.layer_index].proj[static_cast<std::size_t>(pt.projection)];
  }

  // A copy with `adapter` folded into the base weights.
  Backbone merged_with(const LoraAdapter& adapter) const {
    Backbone out = *this;
    for (const auto& [name, pair] : adapter.layers()) {
      const InjectionPoint pt = InjectionPoint::parse(name);
      Matrix& w = out.mutable_projection_weight(pt);
      w = merge(w, adapter, name);
    }
    return out;
  }

  // Full-sequence causal forward pass: logits [n x vocab_size].
  Matrix forward(std::span<const TokenId> tokens, const AdapterPath* path = nullptr) const {
    return run_forward(tokens, path, nullptr);
  }

  ForwardTape forward_with_tape(std::span<const TokenId> tokens,
                                const AdapterPath* path = nullptr) const {
    ForwardTape tape;
    tape.logits = run_forward(tokens, path, &tape);
    return tape;
  }

  // Back-propagates dlogits through a recorded forward pass. Base-weight
  // gradients go to `base_grads` (if set); gradients for the adapter factors
  // of `lora` go to `lora_grads` (if set).
  void backward(const ForwardTape& tape, const Matrix& dlogits, BackboneWeights* base_grads,
                const SingleAdapterPath* lora, LoraGradients* lora_grads) const;

  DecodeState make_decode_state() const {
    DecodeState s;
    s.keys.assign(config_.n_layers, Matrix(config_.max_seq_len, config_.d_model));
    s.values.assign(config_.n_layers, Matrix(config_.max_seq_len, config_.d_model));
    return s;
  }

  // Feeds one token at position state.length, returns its logits row.
  std::vector<float> step(DecodeState& state, TokenId token, const AdapterPath* path = nullptr) const;

  std::vector<TokenId> generate(std::span<const TokenId> prompt, const GenerateOptions& options,
                                const GenerationHooks& hooks = {},
                                const AdapterPath* path = nullptr) const;

  std::vector<TokenId> generate(std::span<const TokenId> prompt, std::size_t max_new,
                                const std::function<void(std::size_t, TokenId)>& callback = {},
                                const AdapterPath* path = nullptr) const {
    GenerateOptions options;
    options.max_new = max_new;
    GenerationHooks hooks;
    hooks.on_token = callback;
    return generate(prompt, options, hooks, path);
  }

 private:
  void initialize() {
    Rng root(config_.seed);
    std::uint64_t salt = 0;
    const float emb_std = 1.0f / std::sqrt(static_cast<float>(config_.d_model));
    weights_.for_each([&](const std::string& name, Matrix& m) {
      Rng rng = root.split(++salt);
      if (name.ends_with("_gain")) {
        m.fill(1.0f);
      } else if (name.ends_with("_bias")) {
        m.fill(0.0f);
      } else if (name == "tok_emb" || name == "pos_emb") {
        for (float& v : m.flat()) v = rng.gaussian(0.0f, emb_std);
      } else {
        const float std = 1.0f / std::sqrt(static_cast<float>(m.rows()));
        for (float& v : m.flat()) v = rng.gaussian(0.0f, std);
      }
    });
  }

  void check_point(const InjectionPoint& pt) const {
    if (pt.layer_index >= config_.n_layers) {
      throw LookupError("injection point '" + pt.name() + "' is outside the backbone");
    }
  }

  void check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.size() > config_.max_seq_len) {
      throw InputError("sequence of " + std::to_string(tokens.size()) +
                       " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    for (TokenId t : tokens) {
      if (t >= config_.vocab_size) {
        throw InputError("token id " + std::to_string(t) + " out of range for vocab_size " +
                         std::to_string(config_.vocab_size));
      }
    }
  }

  Matrix project(std::size_t layer, Projection proj, const Matrix& in,
                 const AdapterPath* path) const {
    Matrix out = matmul(in, weights_.layers[layer].proj[static_cast<std::size_t>(proj)]);
    if (path) path->add_delta(InjectionPoint{layer, proj}.id(), in, out);
    return out;
  }

  Matrix run_forward(std::span<const TokenId> tokens, const AdapterPath* path,
                     ForwardTape* tape) const;

  BackboneConfig config_;
  Vocabulary vocab_;
  BackboneWeights weights_;
};

inline Matrix Backbone::run_forward(std::span<const TokenId> tokens, const AdapterPath* path,
                                    ForwardTape* tape) const {
  check_tokens(tokens);
  if (tokens.empty()) throw InputError("forward on an empty token sequence");
  const std::size_t n = tokens.size(), d = config_.d_model, heads = config_.n_heads;
  const std::size_t dh = d / heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Matrix x(n, d);
  for (std::size_t t = 0; t < n; ++t) {
    auto e = weights_.tok_emb.row(tokens[t]);
    auto p = weights_.pos_emb.row(t);
    for (std::size_t j = 0; j < d; ++j) x(t, j) = e[j] + p[j];
  }
  if (tape) {
    tape->tokens.assign(tokens.begin(), tokens.end());
    tape->layers.resize(config_.n_layers);
  }

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const LayerWeights& lw = weights_.layers[l];
    LayerTape local;
    LayerTape& lt = tape ? tape->layers[l] : local;
    if (tape) lt.x_in = x;

    Matrix a = layer_norm(x, lw.ln1_gain, lw.ln1_bias, tape ? &lt.ln1 : nullptr);
    Matrix q = project(l, Projection::query, a, path);
    Matrix k = project(l, Projection::key, a, path);
    Matrix v = project(l, Projection::value, a, path);

    Matrix att(n, d);
    if (tape) lt.probs.assign(heads, Matrix(n, n));
    std::vector<float> scores(n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          float s = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
          scores[j] = s * att_scale;
        }
        softmax_inplace(std::span<float>(scores.data(), i + 1));
        for (std::size_t j = 0; j <= i; ++j) {
          const float pij = scores[j];
          if (tape) lt.probs[h](i, j) = pij;
          for (std::size_t c = 0; c < dh; ++c) att(i, off + c) += pij * v(j, off + c);
        }
      }
    }
    Matrix y = project(l, Projection::output, att, path);
    axpy(x, y, 1.0f);
    if (tape) {
      lt.a = std::move(a);
      lt.q = std::move(q);
      lt.k = std::move(k);
      lt.v = std::move(v);
      lt.att = std::move(att);
      lt.x_mid = x;
    }

    Matrix b = layer_norm(x, lw.ln2_gain, lw.ln2_bias, tape ? &lt.ln2 : nullptr);
    Matrix up = project(l, Projection::ffn_up, b, path);
    Matrix act = up;
    for (float& u : act.flat()) u = u > 0.0f ? u : 0.0f;
    Matrix down = project(l, Projection::ffn_down, act, path);
    axpy(x, down, 1.0f);
    if (tape) {
      lt.b = std::move(b);
      lt.up = std::move(up);
      lt.act = std::move(act);
    }
  }

  Matrix xf = layer_norm(x, weights_.lnf_gain, weights_.lnf_bias, tape ? &tape->lnf : nullptr);
  Matrix logits = matmul_a_bt(xf, weights_.tok_emb);
  if (tape) {
    tape->x_final = std::move(x);
    tape->xf = std::move(xf);
  }
  return logits;
}

inline void Backbone::backward(const ForwardTape& tape, const Matrix& dlogits,
                               BackboneWeights* base_grads, const SingleAdapterPath* lora,
                               LoraGradients* lora_grads) const {
  const std::size_t n = tape.tokens.size(), d = config_.d_model, heads = config_.n_heads;
  const std::size_t dh = d / heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  if (lora_grads && lora_grads->pairs.size() != config_.point_count())
    lora_grads->pairs.resize(config_.point_count());

  // Gradient of a projection: returns d(in), accumulates dW and (dA, dB).
  auto project_back = [&](std::size_t layer, Projection proj, const Matrix& in,
                          const Matrix& dout) {
    const std::size_t pid = InjectionPoint{layer, proj}.id();
    const Matrix& w = weights_.layers[layer].proj[static_cast<std::size_t>(proj)];
    Matrix din = matmul_a_bt(dout, w);
    if (base_grads) {
      matmul_at_b_accumulate(in, dout, base_grads->layers[layer].proj[static_cast<std::size_t>(proj)]);
    }
    const LoraPair* pair = lora ? lora->pair(pid) : nullptr;
    if (pair) {
      const float c = lora->scale();
      const Matrix t = matmul(in, pair->a);
      Matrix dt(t.rows(), t.cols());
      matmul_a_bt_accumulate(dout, pair->b, dt, c);
      if (lora_grads) {
        auto& g = lora_grads->pairs[pid];
        if (!g) g = LoraPair{Matrix(pair->a.rows(), pair->a.cols()), Matrix(pair->b.rows(), pair->b.cols())};
        matmul_at_b_accumulate(t, dout, g->b, c);
        matmul_at_b_accumulate(in, dt, g->a);
      }
      matmul_a_bt_accumulate(dt, pair->a, din);
    }
    return din;
  };

  // Tied output projection.
  Matrix dxf = matmul(dlogits, weights_.tok_emb);
  if (base_grads) matmul_at_b_accumulate(dlogits, tape.xf, base_grads->tok_emb);
  Matrix dx = layer_norm_backward(dxf, weights_.lnf_gain, tape.lnf,
                                  base_grads ? &base_grads->lnf_gain : nullptr,
                                  base_grads ? &base_grads->lnf_bias : nullptr);

  for (std::size_t li = config_.n_layers; li-- > 0;) {
    const LayerWeights& lw = weights_.layers[li];
    const LayerTape& lt = tape.layers[li];
    LayerWeights* lg = base_grads ? &base_grads->layers[li] : nullptr;

    // FFN block: x = x_mid + down(relu(up(ln2(x_mid))))
    Matrix dact = project_back(li, Projection::ffn_down, lt.act, dx);
    for (std::size_t i = 0; i < dact.size(); ++i)
      if (lt.up.data()[i] <= 0.0f) dact.data()[i] = 0.0f;
    Matrix db = project_back(li, Projection::ffn_up, lt.b, dact);
    Matrix dx_mid = layer_norm_backward(db, lw.ln2_gain, lt.ln2, lg ? &lg->ln2_gain : nullptr,
                                        lg ? &lg->ln2_bias : nullptr);
    axpy(dx_mid, dx, 1.0f);

    // Attention block: x_mid = x_in + out(attn(q, k, v))
    Matrix datt = project_back(li, Projection::output, lt.att, dx_mid);
    Matrix dq(n, d), dk(n, d), dv(n, d);
    std::vector<float> dp(n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      const Matrix& p = lt.probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          float s = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) s += datt(i, off + c) * lt.v(j, off + c);
          dp[j] = s;
          dot += static_cast<double>(p(i, j)) * s;
          const float pij = p(i, j);
          for (std::size_t c = 0; c < dh; ++c) dv(j, off + c) += pij * datt(i, off + c);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const float ds = p(i, j) * static_cast<float>(dp[j] - dot) * att_scale;
          if (ds == 0.0f) continue;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(i, off + c) += ds * lt.k(j, off + c);
            dk(j, off + c) += ds * lt.q(i, off + c);
          }
        }
      }
    }
    Matrix da = project_back(li, Projection::query, lt.a, dq);
    axpy(da, project_back(li, Projection::key, lt.a, dk), 1.0f);
    axpy(da, project_back(li, Projection::value, lt.a, dv), 1.0f);
    dx = layer_norm_backward(da, lw.ln1_gain, lt.ln1, lg ? &lg->ln1_gain : nullptr,
                             lg ? &lg->ln1_bias : nullptr);
    axpy(dx, dx_mid, 1.0f);
  }

  if (base_grads) {
    for (std::size_t t = 0; t < n; ++t) {
      auto g = dx.row(t);
      auto te = base_grads->tok_emb.row(tape.tokens[t]);
      auto pe = base_grads->pos_emb.row(t);
      for (std::size_t j = 0; j < d; ++j) {
        te[j] += g[j];
        pe[j] += g[j];
      }
    }
  }
}

inline std::vector<float> Backbone::step(DecodeState& state, TokenId token,
                                         const AdapterPath* path) const {
  if (token >= config_.vocab_size) {
    throw InputError("token id " + std::to_string(token) + " out of range for vocab_size " +
                     std::to_string(config_.vocab_size));
  }
  const std::size_t pos = state.length;
  if (pos >= config_.max_seq_len) {
    throw InputError("decode position " + std::to_string(pos) + " reaches max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (state.keys.size() != config_.n_layers) throw ContractError("decode state does not match backbone");
  const std::size_t d = config_.d_model, heads = config_.n_heads, dh = d / heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Matrix x(1, d);
  {
    auto e = weights_.tok_emb.row(token);
    auto p = weights_.pos_emb.row(pos);
    for (std::size_t j = 0; j < d; ++j) x(0, j) = e[j] + p[j];
  }
  std::vector<float> scores(pos + 1);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const LayerWeights& lw = weights_.layers[l];
    Matrix a = layer_norm(x, lw.ln1_gain, lw.ln1_bias);
    Matrix q = project(l, Projection::query, a, path);
    Matrix k = project(l, Projection::key, a, path);
    Matrix v = project(l, Projection::value, a, path);
    Matrix& kc = state.keys[l];
    Matrix& vc = state.values[l];
    std::copy(k.flat().begin(), k.flat().end(), kc.row(pos).begin());
    std::copy(v.flat().begin(), v.flat().end(), vc.row(pos).begin());

    Matrix att(1, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t j = 0; j <= pos; ++j) {
        const float* krow = kc.data() + j * d + off;
        float s = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) s += q(0, off + c) * krow[c];
        scores[j] = s * att_scale;
      }
      softmax_inplace(std::span<float>(scores.data(), pos + 1));
      for (std::size_t j = 0; j <= pos; ++j) {
        const float* vrow = vc.data() + j * d + off;
        const float pj = scores[j];
        for (std::size_t c = 0; c < dh; ++c) att(0, off + c) += pj * vrow[c];
      }
    }
    axpy(x, project(l, Projection::output, att, path), 1.0f);

    Matrix b = layer_norm(x, lw.ln2_gain, lw.ln2_bias);
    Matrix up = project(l, Projection::ffn_up, b, path);
    for (float& u : up.flat()) u = u > 0.0f ? u : 0.0f;
    axpy(x, project(l, Projection::ffn_down, up, path), 1.0f);
  }
  Matrix xf = layer_norm(x, weights_.lnf_gain, weights_.lnf_bias);
  Matrix logits = matmul_a_bt(xf, weights_.tok_emb);
  ++state.length;
  return std::vector<float>(logits.flat().begin(), logits.flat().end());
}

inline TokenId argmax_token(std::span<const float> logits) {
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline std::vector<TokenId> Backbone::generate(std::span<const TokenId> prompt,
                                               const GenerateOptions& options,
                                               const GenerationHooks& hooks,
                                               const AdapterPath* path) const {
  if (prompt.empty()) throw InputError("generate needs a non-empty prompt");
  check_tokens(prompt);
  std::vector<TokenId> out(prompt.begin(), prompt.end());
  if (options.max_new == 0) return out;

  DecodeState state = make_decode_state();
  std::vector<float> logits;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    if (hooks.before_prompt_token) hooks.before_prompt_token(i, prompt[i]);
    logits = step(state, prompt[i], path);
  }
  for (std::size_t n = 0; n < options.max_new; ++n) {
    const TokenId next = n < options.forced.size() ? options.forced[n] : argmax_token(logits);
    out.push_back(next);
    if (hooks.on_token) hooks.on_token(out.size() - 1, next);
    if (options.eos && next == *options.eos) break;
    if (n + 1 == options.max_new || state.length >= config_.max_seq_len) break;
    logits = step(state, next, path);
  }
  return out;
}

inline constexpr int kBackboneFormatVersion = 1;

inline Json backbone_to_json(const Backbone& bb) {
  Json weights = Json::object();
  bb.weights().for_each([&](const std::string& name, const Matrix& m) {
    weights[name] = matrix_to_json(m);
  });
  return {{"format_version", kBackboneFormatVersion},
          {"config", backbone_config_to_json(bb.config())},
          {"vocab", bb.vocab().tokens()},
          {"weights", std::move(weights)}};
}

inline Backbone backbone_from_json(const Json& doc) {
  check_format_version(doc, kBackboneFormatVersion, "backbone");
  try {
    const BackboneConfig config = backbone_config_from_json(doc.at("config"));
    Vocabulary vocab = Vocabulary::from_tokens(doc.at("vocab").get<std::vector<std::string>>());
    BackboneWeights w = BackboneWeights::zeros(config);
    const Json& jw = doc.at("weights");
    w.for_each([&](const std::string& name, Matrix& m) {
      Matrix loaded = matrix_from_json(jw.at(name), name);
      if (loaded.rows() != m.rows() || loaded.cols() != m.cols()) {
        throw FormatError("backbone weight '" + name + "' has shape " + loaded.shape_string() +
                          ", expected " + m.shape_string());
      }
      m = std::move(loaded);
    });
    return Backbone(config, std::move(vocab), std::move(w));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("backbone: ") + e.what());
  }
}

inline void save_backbone(const Backbone& bb, const std::filesystem::path& path) {
  write_json_file(path, backbone_to_json(bb));
}

inline Backbone load_backbone(const std::filesystem::path& path) {
  return backbone_from_json(read_json_file(path));
}

}  // namespace dlplora
