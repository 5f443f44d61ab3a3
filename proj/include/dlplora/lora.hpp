#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>

#include "dlplora/errors.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/numerics.hpp"

namespace dlplora {

// Low-rank factors for one injection point: A is [h x r], B is [r x d].
struct LoraPair {
  Matrix a;
  Matrix b;
  friend bool operator==(const LoraPair&, const LoraPair&) = default;
};

// One task's adapter: a rank-r (A, B) pair per targeted layer, plus a scalar
// multiplier applied to every A*B product. Scale defaults to 1.0; set it to
// alpha / r for the conventional scaled variant.
class LoraAdapter {
 public:
  LoraAdapter() = default;
  LoraAdapter(std::string adapter_id, std::string task_label, std::size_t rank,
              float scale = 1.0f)
      : adapter_id_(std::move(adapter_id)),
        task_label_(std::move(task_label)),
        rank_(rank),
        scale_(scale) {
    if (rank_ == 0) throw RankError("adapter '" + adapter_id_ + "' has rank 0");
  }

  const std::string& adapter_id() const noexcept { return adapter_id_; }
  const std::string& task_label() const noexcept { return task_label_; }
  std::size_t rank() const noexcept { return rank_; }
  float scale() const noexcept { return scale_; }
  void set_scale(float s) noexcept { scale_ = s; }
  void set_task_label(std::string label) { task_label_ = std::move(label); }
  void set_adapter_id(std::string id) { adapter_id_ = std::move(id); }

  const std::map<std::string, LoraPair>& layers() const noexcept { return layers_; }
  bool has_layer(const std::string& name) const { return layers_.count(name) != 0; }

  void add_layer(const std::string& name, Matrix a, Matrix b) {
    if (a.cols() != rank_ || b.rows() != rank_) {
      throw RankError("adapter '" + adapter_id_ + "' layer '" + name + "': factors " +
                      a.shape_string() + " and " + b.shape_string() + " do not have rank " +
                      std::to_string(rank_));
    }
    if (rank_ > std::min(a.rows(), b.cols())) {
      throw RankError("adapter '" + adapter_id_ + "' layer '" + name + "': rank " +
                      std::to_string(rank_) + " exceeds min(h, d) = " +
                      std::to_string(std::min(a.rows(), b.cols())));
    }
    layers_[name] = LoraPair{std::move(a), std::move(b)};
  }

  const LoraPair& layer(const std::string& name) const {
    auto it = layers_.find(name);
    if (it == layers_.end()) {
      throw LookupError("adapter '" + adapter_id_ + "' has no layer '" + name + "'");
    }
    return it->second;
  }

  LoraPair& mutable_layer(const std::string& name) {
    auto it = layers_.find(name);
    if (it == layers_.end()) {
      throw LookupError("adapter '" + adapter_id_ + "' has no layer '" + name + "'");
    }
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, pair] : layers_) n += pair.a.size() + pair.b.size();
    return n;
  }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;

 private:
  std::string adapter_id_;
  std::string task_label_;
  std::size_t rank_ = 0;
  float scale_ = 1.0f;
  std::map<std::string, LoraPair> layers_;
};

// scale * (A * B)
inline Matrix delta_weight(const LoraAdapter& adapter, const std::string& layer) {
  const LoraPair& p = adapter.layer(layer);
  Matrix out(p.a.rows(), p.b.cols());
  matmul_accumulate(p.a, p.b, out, adapter.scale());
  return out;
}

inline Matrix merge(const Matrix& base, const LoraAdapter& adapter, const std::string& layer) {
  Matrix delta = delta_weight(adapter, layer);
  require_same_shape(base, delta, "merge");
  return add(base, delta);
}

inline Matrix unmerge(const Matrix& merged, const LoraAdapter& adapter, const std::string& layer) {
  Matrix delta = delta_weight(adapter, layer);
  require_same_shape(merged, delta, "unmerge");
  return subtract(merged, delta);
}

// x*W + scale * (x*A)*B, without materializing A*B.
inline Matrix adapted_forward(const Matrix& x, const Matrix& base, const LoraAdapter& adapter,
                              const std::string& layer) {
  const LoraPair& p = adapter.layer(layer);
  if (p.a.rows() != base.rows() || p.b.cols() != base.cols()) {
    throw ShapeError("adapted_forward: adapter factors " + p.a.shape_string() + "/" +
                     p.b.shape_string() + " do not fit base " + base.shape_string());
  }
  Matrix out = matmul(x, base);
  const Matrix xa = matmul(x, p.a);
  matmul_accumulate(xa, p.b, out, adapter.scale());
  return out;
}

inline constexpr int kAdapterFormatVersion = 1;

inline Json adapter_to_json(const LoraAdapter& adapter) {
  Json layers = Json::object();
  for (const auto& [name, pair] : adapter.layers()) {
    layers[name] = {{"A", matrix_to_json(pair.a)}, {"B", matrix_to_json(pair.b)}};
  }
  return {{"format_version", kAdapterFormatVersion},
          {"adapter_id", adapter.adapter_id()},
          {"task_label", adapter.task_label()},
          {"rank", adapter.rank()},
          {"scale", static_cast<double>(adapter.scale())},
          {"layers", std::move(layers)}};
}

inline LoraAdapter adapter_from_json(const Json& doc) {
  check_format_version(doc, kAdapterFormatVersion, "adapter");
  try {
    LoraAdapter adapter(doc.at("adapter_id").get<std::string>(),
                        doc.at("task_label").get<std::string>(),
                        doc.at("rank").get<std::size_t>(),
                        static_cast<float>(doc.at("scale").get<double>()));
    for (const auto& [name, pair] : doc.at("layers").items()) {
      adapter.add_layer(name, matrix_from_json(pair.at("A"), name + ".A"),
                        matrix_from_json(pair.at("B"), name + ".B"));
    }
    return adapter;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("adapter: ") + e.what());
  }
}

inline void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  write_json_file(path, adapter_to_json(adapter));
}

inline LoraAdapter load_adapter(const std::filesystem::path& path) {
  return adapter_from_json(read_json_file(path));
}

}  // namespace dlplora
