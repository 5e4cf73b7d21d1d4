#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ipcs/errors.hpp"

namespace ipcs {

/// Default per-point feature layout: xyz followed by rgb in [0,1].
inline constexpr std::size_t kDefaultFeatureDim = 6;

struct LabeledCloud {
  std::string name;
  std::vector<float> positions;  // N x 3, meters
  std::vector<float> features;   // N x feature_dim
  std::size_t feature_dim = kDefaultFeatureDim;
  std::optional<std::vector<int>> labels;

  std::size_t size() const { return positions.size() / 3; }
  bool has_labels() const { return labels.has_value(); }
  std::array<float, 3> position(std::size_t i) const {
    return {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]};
  }
  /// rgb stored in feature columns 3..5 of the default layout.
  std::array<float, 3> color(std::size_t i) const {
    const float* f = &features[i * feature_dim];
    return {f[3], f[4], f[5]};
  }

  bool operator==(const LabeledCloud&) const = default;
};

/// Builds the default xyz+rgb feature matrix.
inline std::vector<float> make_features(const std::vector<float>& positions, const std::vector<float>& colors) {
  const std::size_t n = positions.size() / 3;
  std::vector<float> f(n * kDefaultFeatureDim);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      f[i * 6 + k] = positions[3 * i + k];
      f[i * 6 + 3 + k] = colors[3 * i + k];
    }
  }
  return f;
}

inline void validate(const LabeledCloud& c, std::size_t num_classes) {
  const std::size_t n = c.size();
  if (c.positions.size() != 3 * n) throw DimensionError("cloud: positions not a multiple of 3");
  if (c.features.size() != n * c.feature_dim) throw DimensionError("cloud: feature matrix size mismatch");
  for (const float v : c.positions)
    if (!std::isfinite(v)) throw NumericError("cloud '" + c.name + "': non-finite position");
  for (const float v : c.features)
    if (!std::isfinite(v)) throw NumericError("cloud '" + c.name + "': non-finite feature");
  if (c.labels) {
    if (c.labels->size() != n) throw DimensionError("cloud: label count mismatch");
    for (const int l : *c.labels)
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
        throw ContractError("cloud '" + c.name + "': label " + std::to_string(l) + " out of range");
  }
}

/// Copies the listed points, in the given order, into a new cloud.
inline LabeledCloud select_points(const LabeledCloud& c, const std::vector<std::size_t>& idx, std::string name) {
  LabeledCloud out;
  out.name = std::move(name);
  out.feature_dim = c.feature_dim;
  out.positions.reserve(idx.size() * 3);
  out.features.reserve(idx.size() * c.feature_dim);
  if (c.labels) out.labels.emplace().reserve(idx.size());
  for (const std::size_t i : idx) {
    out.positions.insert(out.positions.end(), c.positions.begin() + 3 * i, c.positions.begin() + 3 * i + 3);
    out.features.insert(out.features.end(), c.features.begin() + i * c.feature_dim,
                        c.features.begin() + (i + 1) * c.feature_dim);
    if (c.labels) out.labels->push_back((*c.labels)[i]);
  }
  return out;
}

}  // namespace ipcs
