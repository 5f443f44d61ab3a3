#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "dlplora/errors.hpp"

namespace dlplora {

enum class Projection : std::size_t { query = 0, key, value, output, ffn_up, ffn_down };

inline constexpr std::size_t kProjectionCount = 6;
inline constexpr std::size_t kAttentionProjectionCount = 4;

inline constexpr std::array<std::string_view, kProjectionCount> kProjectionNames = {
    "query", "key", "value", "output", "ffn_up", "ffn_down"};

// A named linear layer of the backbone that an adapter may target. Names
// follow "layer{i}.{projection}", e.g. "layer0.query".
struct InjectionPoint {
  std::size_t layer_index = 0;
  Projection projection = Projection::query;

  // Dense id used to index per-point tables.
  std::size_t id() const noexcept {
    return layer_index * kProjectionCount + static_cast<std::size_t>(projection);
  }

  static InjectionPoint from_id(std::size_t id) {
    return {id / kProjectionCount, static_cast<Projection>(id % kProjectionCount)};
  }

  std::string name() const {
    return "layer" + std::to_string(layer_index) + "." +
           std::string(kProjectionNames[static_cast<std::size_t>(projection)]);
  }

  static InjectionPoint parse(std::string_view name) {
    const auto dot = name.find('.');
    if (name.substr(0, 5) != "layer" || dot == std::string_view::npos || dot == 5) {
      throw LookupError("malformed injection point name '" + std::string(name) + "'");
    }
    std::size_t layer = 0;
    for (char c : name.substr(5, dot - 5)) {
      if (c < '0' || c > '9') {
        throw LookupError("malformed injection point name '" + std::string(name) + "'");
      }
      layer = layer * 10 + static_cast<std::size_t>(c - '0');
    }
    const auto proj = name.substr(dot + 1);
    for (std::size_t p = 0; p < kProjectionCount; ++p) {
      if (kProjectionNames[p] == proj) return {layer, static_cast<Projection>(p)};
    }
    throw LookupError("unknown projection '" + std::string(proj) + "' in '" +
                      std::string(name) + "'");
  }

  friend bool operator==(const InjectionPoint&, const InjectionPoint&) = default;
};

}  // namespace dlplora
