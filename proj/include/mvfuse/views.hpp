#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mvfuse/tensor.hpp"

namespace mvfuse {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; used to derive independent per-job seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
  return mix_seed(mix_seed(base ^ h) + index);
}

enum class ViewKind { temporal, static_features };

/// Shape and naming of one input view. Temporal arrays are stored flattened
/// channel-major: column c * timesteps + t.
struct ViewSpec {
  std::string name;
  ViewKind kind = ViewKind::static_features;
  std::size_t channels = 1;
  std::size_t timesteps = 1;
  bool categorical = false;         // contains one-hot expanded columns
  std::size_t one_hot_columns = 0;  // trailing columns that are one-hot indicators
  bool variable_length = false;     // per-sample sequence lengths apply
  std::vector<std::string> bands;   // channel names (temporal) or column names (static)

  std::size_t width() const { return channels * timesteps; }
  bool temporal() const { return kind == ViewKind::temporal; }

  void validate() const {
    if (name.empty()) throw ConfigError("view: empty name");
    if (channels == 0 || timesteps == 0) throw ConfigError("view '" + name + "': channels and timesteps must be positive");
    if ((timesteps == 1) != (kind == ViewKind::static_features)) {
      throw ConfigError("view '" + name + "': timesteps == 1 iff the view is static");
    }
    if (one_hot_columns > width()) throw ConfigError("view '" + name + "': more one-hot columns than features");
    if (categorical != (one_hot_columns > 0)) throw ConfigError("view '" + name + "': categorical flag disagrees with one-hot column count");
    if (variable_length && !temporal()) throw ConfigError("view '" + name + "': only temporal views may have variable length");
    if (!bands.empty() && bands.size() != channels) throw ConfigError("view '" + name + "': band name count differs from channels");
  }

  std::string band(std::size_t c) const {
    if (!bands.empty()) return bands[c];
    return (temporal() ? "b" : "f") + std::to_string(c);
  }
};

enum class TaskKind { binary, multiclass, regression };

struct Task {
  TaskKind kind = TaskKind::binary;
  std::size_t classes = 2;  // 1 for regression

  bool classification() const { return kind != TaskKind::regression; }
  std::size_t outputs() const { return classification() ? classes : 1; }

  static Task binary() { return {TaskKind::binary, 2}; }
  static Task multiclass(std::size_t c) { return {TaskKind::multiclass, c}; }
  static Task regression() { return {TaskKind::regression, 1}; }
};

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::binary: return "binary";
    case TaskKind::multiclass: return "multiclass";
    case TaskKind::regression: return "regression";
  }
  return "?";
}

/// Per-view arrays for a batch of B samples plus per-view availability.
/// Keys are view names; std::map keeps them in canonical (lexicographic) order.
struct MultiViewBatch {
  std::map<std::string, Tensor> views;                           // [B x width]
  std::map<std::string, bool> availability;
  std::map<std::string, std::vector<std::size_t>> lengths;       // variable-length views only
  std::size_t batch_size = 0;

  bool available(const std::string& view) const {
    auto it = availability.find(view);
    return it != availability.end() && it->second;
  }

  std::vector<std::size_t> length_of(const std::string& view) const {
    auto it = lengths.find(view);
    return it == lengths.end() ? std::vector<std::size_t>{} : it->second;
  }

  /// Checks the batch against the model's view list.
  void validate(const std::vector<ViewSpec>& specs) const {
    for (const auto& spec : specs) {
      auto it = availability.find(spec.name);
      if (it == availability.end()) throw AvailabilityError("batch: no availability entry for view '" + spec.name + "'");
      if (!it->second) continue;
      auto v = views.find(spec.name);
      if (v == views.end()) throw AvailabilityError("batch: view '" + spec.name + "' flagged available but has no data");
      if (v->second.rank() != 2 || v->second.extent(0) != batch_size || v->second.extent(1) != spec.width()) {
        throw DimensionError("batch: view '" + spec.name + "' has shape " + shape_str(v->second.shape()) +
                             ", expected [" + std::to_string(batch_size) + "x" + std::to_string(spec.width()) + "]");
      }
    }
  }
};

}  // namespace mvfuse
