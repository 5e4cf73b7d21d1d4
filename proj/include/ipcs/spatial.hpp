#pragma once

// Uniform hash grid over a 3D point set, used for radius and k-nearest queries.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ipcs/errors.hpp"

namespace ipcs {

class PointGrid {
 public:
  /// positions is N x 3; only the listed subset of point ids is indexed when
  /// `subset` is non-empty.
  PointGrid(std::span<const float> positions, double cell, std::span<const std::uint32_t> subset = {})
      : positions_(positions), cell_(cell) {
    if (!(cell > 0.0)) throw ContractError("PointGrid: cell size must be positive");
    std::vector<std::pair<std::int64_t, std::uint32_t>> keyed;
    const std::size_t n = positions.size() / 3;
    if (subset.empty()) {
      keyed.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) keyed.emplace_back(key(cell_of(i)), i);
    } else {
      keyed.reserve(subset.size());
      for (const std::uint32_t i : subset) keyed.emplace_back(key(cell_of(i)), i);
    }
    std::sort(keyed.begin(), keyed.end());
    ids_.reserve(keyed.size());
    for (std::size_t i = 0; i < keyed.size(); ++i) {
      if (i == 0 || keyed[i].first != keyed[i - 1].first) ranges_[keyed[i].first] = {ids_.size(), ids_.size()};
      ids_.push_back(keyed[i].second);
      ranges_[keyed[i].first].second = ids_.size();
    }
  }

  double cell() const { return cell_; }

  std::array<std::int64_t, 3> cell_of(std::uint32_t i) const {
    return {static_cast<std::int64_t>(std::floor(positions_[3 * i] / cell_)),
            static_cast<std::int64_t>(std::floor(positions_[3 * i + 1] / cell_)),
            static_cast<std::int64_t>(std::floor(positions_[3 * i + 2] / cell_))};
  }

  double dist2(std::uint32_t a, std::uint32_t b) const {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double d = static_cast<double>(positions_[3 * a + k]) - positions_[3 * b + k];
      s += d * d;
    }
    return s;
  }

  /// Calls fn(id) for every indexed point in cells at Chebyshev ring `r`
  /// around `center`.
  template <typename Fn>
  void visit_ring(const std::array<std::int64_t, 3>& center, std::int64_t r, Fn&& fn) const {
    for (std::int64_t dx = -r; dx <= r; ++dx)
      for (std::int64_t dy = -r; dy <= r; ++dy)
        for (std::int64_t dz = -r; dz <= r; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
          const auto it = ranges_.find(key({center[0] + dx, center[1] + dy, center[2] + dz}));
          if (it == ranges_.end()) continue;
          for (std::size_t j = it->second.first; j < it->second.second; ++j) fn(ids_[j]);
        }
  }

  /// Indexed points within distance `radius` (inclusive) of point `q`,
  /// ascending by id. Requires radius <= cell.
  std::vector<std::uint32_t> radius_query(std::uint32_t q, double radius) const {
    std::vector<std::uint32_t> out;
    const auto c = cell_of(q);
    const double r2 = radius * radius;
    for (std::int64_t r = 0; r <= 1; ++r)
      visit_ring(c, r, [&](std::uint32_t id) {
        if (dist2(q, id) <= r2) out.push_back(id);
      });
    std::sort(out.begin(), out.end());
    return out;
  }

  /// k nearest indexed points to `q`, excluding q itself, ordered by
  /// (distance, id).
  std::vector<std::uint32_t> knn(std::uint32_t q, std::size_t k) const {
    std::vector<std::pair<double, std::uint32_t>> best;
    const auto c = cell_of(q);
    const std::size_t total = ids_.size();
    std::size_t seen = 0;
    for (std::int64_t r = 0;; ++r) {
      visit_ring(c, r, [&](std::uint32_t id) {
        ++seen;
        if (id != q) best.emplace_back(dist2(q, id), id);
      });
      if (best.size() >= k) {
        std::nth_element(best.begin(), best.begin() + (k - 1), best.end());
        const double kth = best[k - 1].first;
        const double bound = static_cast<double>(r) * cell_;
        if (kth < bound * bound) break;
      }
      if (seen >= total) break;
    }
    std::sort(best.begin(), best.end());
    best.resize(std::min(k, best.size()));
    std::vector<std::uint32_t> out;
    out.reserve(best.size());
    for (const auto& b : best) out.push_back(b.second);
    return out;
  }

 private:
  static std::int64_t key(const std::array<std::int64_t, 3>& c) {
    // 21 bits per axis is ample for room-scale scenes at centimeter cells.
    constexpr std::int64_t mask = (1 << 21) - 1;
    return ((c[0] & mask) << 42) | ((c[1] & mask) << 21) | (c[2] & mask);
  }

  std::span<const float> positions_;
  double cell_;
  std::vector<std::uint32_t> ids_;
  std::unordered_map<std::int64_t, std::pair<std::size_t, std::size_t>> ranges_;
};

}  // namespace ipcs
