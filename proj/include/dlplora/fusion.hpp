#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dlplora/backbone.hpp"
#include "dlplora/errors.hpp"
#include "dlplora/injection.hpp"
#include "dlplora/json_io.hpp"
#include "dlplora/lora.hpp"
#include "dlplora/numerics.hpp"
#include "dlplora/router.hpp"

namespace dlplora {

// Adapters selected for one sentence and their fusion weights.
struct FusionPlan {
  std::vector<std::size_t> selected_slots;
  std::vector<float> weights;  // aligned with selected_slots, sums to 1
  std::vector<std::string> selected_labels;
  std::size_t source_sentence_index = 0;
  std::vector<float> created_from;  // router probabilities the plan was built from
  std::uint64_t plan_id = 0;
  friend bool operator==(const FusionPlan&, const FusionPlan&) = default;
};

// All adapters of a registry share one rank and one set of injection points.
// Per injection point, adapter i's A and B live in slice i of two contiguous
// stacks ([N x h x r] and [N x r x d]).
class LoraRegistry {
 public:
  struct PointStack {
    std::string name;
    std::size_t point_id = 0;
    StackedTensor3 a;
    StackedTensor3 b;
  };

  LoraRegistry() = default;
  LoraRegistry(const LoraRegistry& other) {
    std::shared_lock lock(other.mutex_);
    copy_from(other);
  }
  LoraRegistry& operator=(const LoraRegistry& other) {
    if (this != &other) {
      std::unique_lock lock(mutex_);
      std::shared_lock other_lock(other.mutex_);
      copy_from(other);
    }
    return *this;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return ids_.size();
  }
  bool empty() const { return size() == 0; }

  std::optional<std::size_t> uniform_rank() const {
    std::shared_lock lock(mutex_);
    return rank_;
  }

  std::size_t register_adapter(const LoraAdapter& adapter) {
    std::unique_lock lock(mutex_);
    if (index_.count(adapter.adapter_id())) {
      throw ConflictError("adapter id '" + adapter.adapter_id() + "' is already registered");
    }
    if (label_index_.count(adapter.task_label())) {
      throw ConflictError("task label '" + adapter.task_label() + "' is already served by adapter '" +
                          ids_[label_index_.at(adapter.task_label())] + "'");
    }
    if (rank_ && adapter.rank() != *rank_) {
      throw RankError("adapter '" + adapter.adapter_id() + "' has rank " +
                      std::to_string(adapter.rank()) + " but the registry rank is " +
                      std::to_string(*rank_));
    }
    if (adapter.layers().empty()) {
      throw ShapeError("adapter '" + adapter.adapter_id() + "' has no layers");
    }
    if (ids_.empty()) {
      stacks_.clear();
      for (const auto& [name, pair] : adapter.layers()) {
        PointStack s{name, InjectionPoint::parse(name).id(),
                     StackedTensor3(pair.a.rows(), pair.a.cols()),
                     StackedTensor3(pair.b.rows(), pair.b.cols())};
        stacks_.push_back(std::move(s));
      }
    } else {
      if (adapter.layers().size() != stacks_.size()) {
        throw ShapeError("adapter '" + adapter.adapter_id() + "' targets " +
                         std::to_string(adapter.layers().size()) + " layers, registry uses " +
                         std::to_string(stacks_.size()));
      }
      for (const auto& s : stacks_) {
        if (!adapter.has_layer(s.name)) {
          throw ShapeError("adapter '" + adapter.adapter_id() + "' lacks layer '" + s.name + "'");
        }
        const LoraPair& p = adapter.layer(s.name);
        if (p.a.rows() != s.a.rows() || p.b.cols() != s.b.cols()) {
          throw ShapeError("adapter '" + adapter.adapter_id() + "' layer '" + s.name +
                           "' has factors " + p.a.shape_string() + "/" + p.b.shape_string());
        }
      }
    }
    for (auto& s : stacks_) {
      const LoraPair& p = adapter.layer(s.name);
      s.a.push_back(p.a);
      s.b.push_back(p.b);
    }
    const std::size_t slot = ids_.size();
    rank_ = adapter.rank();
    ids_.push_back(adapter.adapter_id());
    labels_.push_back(adapter.task_label());
    scales_.push_back(adapter.scale());
    index_[adapter.adapter_id()] = slot;
    label_index_[adapter.task_label()] = slot;
    rebuild_point_lookup();
    return slot;
  }

  // Swap-removes: the last slot moves into the freed one.
  void remove(const std::string& adapter_id) {
    std::unique_lock lock(mutex_);
    auto it = index_.find(adapter_id);
    if (it == index_.end()) throw LookupError("no adapter with id '" + adapter_id + "'");
    const std::size_t slot = it->second;
    const std::size_t last = ids_.size() - 1;
    for (auto& s : stacks_) {
      s.a.swap_remove(slot);
      s.b.swap_remove(slot);
    }
    index_.erase(it);
    label_index_.erase(labels_[slot]);
    if (slot != last) {
      ids_[slot] = std::move(ids_[last]);
      labels_[slot] = std::move(labels_[last]);
      scales_[slot] = scales_[last];
      index_[ids_[slot]] = slot;
      label_index_[labels_[slot]] = slot;
    }
    ids_.pop_back();
    labels_.pop_back();
    scales_.pop_back();
    if (ids_.empty()) {
      rank_.reset();
      stacks_.clear();
      rebuild_point_lookup();
    }
  }

  std::size_t slot_of(const std::string& adapter_id) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(adapter_id);
    if (it == index_.end()) throw LookupError("no adapter with id '" + adapter_id + "'");
    return it->second;
  }

  std::optional<std::size_t> slot_for_label(const std::string& label) const {
    std::shared_lock lock(mutex_);
    auto it = label_index_.find(label);
    if (it == label_index_.end()) return std::nullopt;
    return it->second;
  }

  std::string id_at(std::size_t slot) const {
    std::shared_lock lock(mutex_);
    check_slot(slot);
    return ids_[slot];
  }
  std::string label_at(std::size_t slot) const {
    std::shared_lock lock(mutex_);
    check_slot(slot);
    return labels_[slot];
  }
  float scale_at(std::size_t slot) const {
    std::shared_lock lock(mutex_);
    check_slot(slot);
    return scales_[slot];
  }
  std::vector<std::string> ids() const {
    std::shared_lock lock(mutex_);
    return ids_;
  }
  std::vector<std::string> layer_names() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> names;
    for (const auto& s : stacks_) names.push_back(s.name);
    return names;
  }

  // Rebuilds the adapter stored at `slot` from its stack slices.
  LoraAdapter adapter_at(std::size_t slot) const {
    std::shared_lock lock(mutex_);
    check_slot(slot);
    LoraAdapter a(ids_[slot], labels_[slot], *rank_, scales_[slot]);
    for (const auto& s : stacks_) a.add_layer(s.name, s.a.extract(slot), s.b.extract(slot));
    return a;
  }

  std::size_t adapter_parameter_count() const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& s : stacks_) n += s.a.flat().size() + s.b.flat().size();
    return n;
  }

  // Read access to the stacks under a shared lock held for the call.
  template <typename Fn>
  decltype(auto) with_stacks(Fn&& fn) const {
    std::shared_lock lock(mutex_);
    return fn(stacks_, scales_);
  }

  const PointStack* stack_for_point_unlocked(std::size_t point_id) const {
    if (point_id >= point_lookup_.size() || point_lookup_[point_id] < 0) return nullptr;
    return &stacks_[static_cast<std::size_t>(point_lookup_[point_id])];
  }

  const PointStack& stack_for_layer_unlocked(const std::string& layer) const {
    for (const auto& s : stacks_)
      if (s.name == layer) return s;
    throw LookupError("registry has no layer '" + layer + "'");
  }

  void check_plan_unlocked(const FusionPlan& plan) const {
    if (plan.selected_slots.empty()) throw PlanError("fusion plan selects no adapter");
    if (plan.weights.size() != plan.selected_slots.size()) {
      throw PlanError("fusion plan has " + std::to_string(plan.weights.size()) + " weights for " +
                      std::to_string(plan.selected_slots.size()) + " slots");
    }
    for (std::size_t i = 0; i < plan.selected_slots.size(); ++i) {
      if (plan.selected_slots[i] >= ids_.size()) {
        throw PlanError("fusion plan slot " + std::to_string(plan.selected_slots[i]) +
                        " is not registered (N=" + std::to_string(ids_.size()) + ")");
      }
      for (std::size_t j = 0; j < i; ++j)
        if (plan.selected_slots[j] == plan.selected_slots[i]) throw PlanError("fusion plan repeats a slot");
    }
  }

  std::shared_mutex& mutex() const { return mutex_; }

 private:
  void check_slot(std::size_t slot) const {
    if (slot >= ids_.size()) {
      throw LookupError("slot " + std::to_string(slot) + " out of range (N=" +
                        std::to_string(ids_.size()) + ")");
    }
  }

  void rebuild_point_lookup() {
    point_lookup_.clear();
    for (std::size_t i = 0; i < stacks_.size(); ++i) {
      const std::size_t pid = stacks_[i].point_id;
      if (point_lookup_.size() <= pid) point_lookup_.resize(pid + 1, -1);
      point_lookup_[pid] = static_cast<std::ptrdiff_t>(i);
    }
  }

  void copy_from(const LoraRegistry& o) {
    index_ = o.index_;
    label_index_ = o.label_index_;
    ids_ = o.ids_;
    labels_ = o.labels_;
    scales_ = o.scales_;
    rank_ = o.rank_;
    stacks_ = o.stacks_;
    point_lookup_ = o.point_lookup_;
  }

  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::size_t> label_index_;
  std::vector<std::string> ids_;
  std::vector<std::string> labels_;
  std::vector<float> scales_;
  std::optional<std::size_t> rank_;
  std::vector<PointStack> stacks_;
  std::vector<std::ptrdiff_t> point_lookup_;
  mutable std::shared_mutex mutex_;
};

// Selected slices of one injection point gathered side by side:
// A_cat = [A_1 | ... | A_R] is [h x R*r] and B_cat stacks the B_i vertically
// into [R*r x d], each block pre-multiplied by weight_i * scale_i. Then
// x*A_cat*B_cat = sum_i weight_i * scale_i * (x*A_i)*B_i.
struct GatheredPoint {
  Matrix a_cat;
  Matrix b_cat;
};

inline GatheredPoint gather_point(const LoraRegistry::PointStack& s, const FusionPlan& plan,
                                  const std::vector<float>& scales) {
  const std::size_t h = s.a.rows(), r = s.a.cols(), d = s.b.cols();
  const std::size_t count = plan.selected_slots.size();
  GatheredPoint g{Matrix(h, count * r), Matrix(count * r, d)};
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t slot = plan.selected_slots[k];
    const float coeff = plan.weights[k] * scales[slot];
    auto a = s.a.slice(slot);
    for (std::size_t i = 0; i < h; ++i)
      std::copy(a.begin() + static_cast<std::ptrdiff_t>(i * r),
                a.begin() + static_cast<std::ptrdiff_t>((i + 1) * r),
                g.a_cat.row(i).begin() + static_cast<std::ptrdiff_t>(k * r));
    auto b = s.b.slice(slot);
    float* dst = g.b_cat.data() + k * r * d;
    for (std::size_t j = 0; j < r * d; ++j) dst[j] = coeff * b[j];
  }
  return g;
}

inline void apply_gathered(const GatheredPoint& g, const Matrix& x, Matrix& out) {
  const Matrix t = matmul(x, g.a_cat);
  matmul_accumulate(t, g.b_cat, out);
}

// x*W + sum_r weight_r * scale_r * (x*A_r)*B_r for the plan's adapters.
inline Matrix fused_forward(const Matrix& x, const Matrix& base, const LoraRegistry& registry,
                            const FusionPlan& plan, const std::string& layer) {
  Matrix out = matmul(x, base);
  registry.with_stacks([&](const std::vector<LoraRegistry::PointStack>&,
                           const std::vector<float>& scales) {
    registry.check_plan_unlocked(plan);
    const auto& s = registry.stack_for_layer_unlocked(layer);
    if (s.a.rows() != base.rows() || s.b.cols() != base.cols()) {
      throw ShapeError("layer '" + layer + "' adapters are [" + std::to_string(s.a.rows()) + "x" +
                       std::to_string(s.b.cols()) + "], base is " + base.shape_string());
    }
    apply_gathered(gather_point(s, plan, scales), x, out);
  });
  return out;
}

struct PlannedInput {
  Matrix x;
  FusionPlan plan;
};

// Same results as calling fused_forward per entry. Entries whose plans select
// the same slots with the same weights are stacked into one product, so each
// distinct plan is gathered once. With `parallel`, distinct plans run on
// separate threads.
inline std::vector<Matrix> batched_fused_forward(const std::vector<PlannedInput>& inputs,
                                                 const Matrix& base, const LoraRegistry& registry,
                                                 const std::string& layer, bool parallel = false) {
  std::vector<Matrix> outputs(inputs.size());
  std::map<std::pair<std::vector<std::size_t>, std::vector<float>>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    groups[{inputs[i].plan.selected_slots, inputs[i].plan.weights}].push_back(i);

  registry.with_stacks([&](const std::vector<LoraRegistry::PointStack>&,
                           const std::vector<float>& scales) {
    const auto& s = registry.stack_for_layer_unlocked(layer);
    for (const auto& in : inputs) {
      registry.check_plan_unlocked(in.plan);
      if (in.x.cols() != base.rows()) {
        throw ShapeError("batched_fused_forward: input " + in.x.shape_string() +
                         " does not fit base " + base.shape_string());
      }
    }
    auto run_group = [&](const std::vector<std::size_t>& members) {
      std::size_t rows = 0;
      for (std::size_t i : members) rows += inputs[i].x.rows();
      Matrix stacked(rows, base.rows());
      std::size_t r0 = 0;
      for (std::size_t i : members) {
        std::copy(inputs[i].x.flat().begin(), inputs[i].x.flat().end(),
                  stacked.data() + r0 * base.rows());
        r0 += inputs[i].x.rows();
      }
      Matrix out = matmul(stacked, base);
      apply_gathered(gather_point(s, inputs[members.front()].plan, scales), stacked, out);
      r0 = 0;
      for (std::size_t i : members) {
        Matrix part(inputs[i].x.rows(), base.cols());
        std::copy(out.data() + r0 * base.cols(),
                  out.data() + (r0 + inputs[i].x.rows()) * base.cols(), part.data());
        outputs[i] = std::move(part);
        r0 += inputs[i].x.rows();
      }
    };
    if (parallel && groups.size() > 1) {
      std::vector<std::future<void>> jobs;
      for (const auto& [key, members] : groups)
        jobs.push_back(std::async(std::launch::async, run_group, std::cref(members)));
      for (auto& j : jobs) j.get();
    } else {
      for (const auto& [key, members] : groups) run_group(members);
    }
  });
  return outputs;
}

// Backbone adapter path applying one plan at every injection point the
// registry covers. Slices are gathered once, at construction.
class FusedPath final : public AdapterPath {
 public:
  FusedPath(const LoraRegistry& registry, const FusionPlan& plan, std::size_t point_count)
      : plan_id_(plan.plan_id), points_(point_count) {
    registry.with_stacks([&](const std::vector<LoraRegistry::PointStack>& stacks,
                             const std::vector<float>& scales) {
      registry.check_plan_unlocked(plan);
      for (const auto& s : stacks) {
        if (s.point_id >= point_count) {
          throw LookupError("registry layer '" + s.name + "' is outside the backbone");
        }
        points_[s.point_id] = gather_point(s, plan, scales);
      }
    });
  }

  std::uint64_t plan_id() const noexcept { return plan_id_; }

  void add_delta(std::size_t point_id, const Matrix& in, Matrix& out) const override {
    const auto& g = points_[point_id];
    if (g) apply_gathered(*g, in, out);
  }

 private:
  std::uint64_t plan_id_;
  std::vector<std::optional<GatheredPoint>> points_;
};

// Router probabilities -> threshold selection -> fusion weights -> registry slots.
inline FusionPlan plan_for_sentence(std::span<const float> probs, float p,
                                    const std::vector<std::string>& task_labels,
                                    const LoraRegistry& registry, std::size_t sentence_index,
                                    FusionWeighting weighting = FusionWeighting::softmax) {
  if (probs.size() != task_labels.size()) {
    throw ContractError("router produced " + std::to_string(probs.size()) +
                        " probabilities for " + std::to_string(task_labels.size()) + " tasks");
  }
  const auto selected = select_top_p(probs, p);
  FusionPlan plan;
  plan.weights = fusion_weights(probs, selected, weighting);
  plan.source_sentence_index = sentence_index;
  plan.created_from.assign(probs.begin(), probs.end());
  for (std::size_t idx : selected) {
    const auto slot = registry.slot_for_label(task_labels[idx]);
    if (!slot) throw RoutingError("no adapter registered for task label '" + task_labels[idx] + "'");
    plan.selected_slots.push_back(*slot);
    plan.selected_labels.push_back(task_labels[idx]);
  }
  return plan;
}

// Snapshot: one adapter JSON per slot plus manifest.json recording slot order.
inline constexpr int kRegistryManifestVersion = 1;

inline std::string adapter_file_name(const std::string& adapter_id) { return adapter_id + ".json"; }

inline void save_registry(const LoraRegistry& registry, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json order = Json::array();
  const std::size_t n = registry.size();
  for (std::size_t slot = 0; slot < n; ++slot) {
    const LoraAdapter a = registry.adapter_at(slot);
    save_adapter(a, dir / adapter_file_name(a.adapter_id()));
    order.push_back(a.adapter_id());
  }
  const auto rank = registry.uniform_rank();
  write_json_file(dir / "manifest.json", {{"format_version", kRegistryManifestVersion},
                                          {"uniform_rank", rank ? Json(*rank) : Json(nullptr)},
                                          {"order", order}});
}

inline LoraRegistry load_registry(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("adapter directory " + dir.string() + " not found");
  const Json manifest = read_json_file(dir / "manifest.json");
  check_format_version(manifest, kRegistryManifestVersion, "registry manifest");
  LoraRegistry registry;
  for (const auto& id : manifest.at("order")) {
    registry.register_adapter(load_adapter(dir / adapter_file_name(id.get<std::string>())));
  }
  const Json& rank = manifest.at("uniform_rank");
  if (!rank.is_null() && registry.uniform_rank() != rank.get<std::size_t>()) {
    throw FormatError("registry manifest rank does not match its adapters");
  }
  return registry;
}

}  // namespace dlplora
