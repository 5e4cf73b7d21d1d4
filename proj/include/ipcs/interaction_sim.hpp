#pragma once

// Simulated annotator: clusters the current error map with DBSCAN and clicks
// the densest interior point of the largest error regions, labeling it with
// the ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "ipcs/errors.hpp"
#include "ipcs/interaction.hpp"
#include "ipcs/spatial.hpp"

namespace ipcs {

struct SimConfig {
  double dbscan_eps = 0.09;
  std::size_t dbscan_min_pts = 8;
  double kde_bandwidth = 0.09;
  std::size_t clicks_per_round = 1;
  std::size_t min_region_size = 15;
  std::uint64_t rng_seed = 0;
  /// Sample the click with probability proportional to density instead of
  /// taking the density maximum.
  bool weighted_sampling = false;
};

inline void validate(const SimConfig& c) {
  if (!(c.dbscan_eps > 0.0)) throw ContractError("sim: dbscan_eps must be positive");
  if (!(c.kde_bandwidth > 0.0)) throw ContractError("sim: kde_bandwidth must be positive");
  if (c.clicks_per_round < 1) throw ContractError("sim: clicks_per_round must be >= 1");
  if (c.dbscan_min_pts < 1) throw ContractError("sim: dbscan_min_pts must be >= 1");
}

struct ErrorRegion {
  std::vector<std::uint32_t> members;  // ascending point ids
  std::vector<std::uint8_t> core;      // parallel to members
  std::vector<double> density;         // parallel to members, filled by next_clicks

  std::size_t size() const { return members.size(); }
};

inline std::vector<bool> error_map(std::span<const int> predicted, std::span<const int> ground_truth) {
  if (predicted.size() != ground_truth.size()) throw DimensionError("error_map: length mismatch");
  std::vector<bool> mask(predicted.size());
  for (std::size_t i = 0; i < predicted.size(); ++i) mask[i] = predicted[i] != ground_truth[i];
  return mask;
}

/// DBSCAN over the masked points. A point is core when at least min_pts
/// masked points (itself included) lie within eps. Core points within eps of
/// each other share a region; a border point joins the region of its nearest
/// core neighbor (lowest id on ties); everything else is noise. Regions below
/// min_region_size are dropped; the rest are sorted by size, then smallest
/// member.
inline std::vector<ErrorRegion> cluster_errors(std::span<const float> positions, const std::vector<bool>& mask,
                                               const SimConfig& config) {
  validate(config);
  const std::size_t n = positions.size() / 3;
  if (mask.size() != n) throw DimensionError("cluster_errors: mask length mismatch");
  std::vector<std::uint32_t> masked;
  for (std::uint32_t i = 0; i < n; ++i)
    if (mask[i]) masked.push_back(i);
  if (masked.empty()) return {};

  const PointGrid grid(positions, config.dbscan_eps, masked);
  std::vector<std::vector<std::uint32_t>> nbrs(masked.size());
  std::vector<std::uint32_t> local(n, UINT32_MAX);
  for (std::uint32_t j = 0; j < masked.size(); ++j) local[masked[j]] = j;
  std::vector<std::uint8_t> core(masked.size());
  for (std::uint32_t j = 0; j < masked.size(); ++j) {
    nbrs[j] = grid.radius_query(masked[j], config.dbscan_eps);
    core[j] = nbrs[j].size() >= config.dbscan_min_pts;
  }

  std::vector<std::uint32_t> parent(masked.size());
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::uint32_t j = 0; j < masked.size(); ++j) {
    if (!core[j]) continue;
    for (const std::uint32_t id : nbrs[j]) {
      const std::uint32_t o = local[id];
      if (!core[o]) continue;
      const std::uint32_t a = find(j), b = find(o);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  }

  std::vector<std::int64_t> root(masked.size(), -1);
  for (std::uint32_t j = 0; j < masked.size(); ++j) {
    if (core[j]) {
      root[j] = find(j);
      continue;
    }
    double best = INFINITY;
    for (const std::uint32_t id : nbrs[j]) {
      const std::uint32_t o = local[id];
      if (!core[o]) continue;
      const double d = grid.dist2(masked[j], id);
      if (d < best) {  // ids ascend, so strict < keeps the lowest id on ties
        best = d;
        root[j] = find(o);
      }
    }
  }

  std::vector<ErrorRegion> regions;
  std::vector<std::int64_t> slot(masked.size(), -1);
  for (std::uint32_t j = 0; j < masked.size(); ++j) {
    if (root[j] < 0) continue;
    auto& s = slot[static_cast<std::size_t>(root[j])];
    if (s < 0) {
      s = static_cast<std::int64_t>(regions.size());
      regions.emplace_back();
    }
    regions[static_cast<std::size_t>(s)].members.push_back(masked[j]);
    regions[static_cast<std::size_t>(s)].core.push_back(core[j]);
  }
  std::erase_if(regions, [&](const ErrorRegion& r) { return r.size() < config.min_region_size; });
  std::sort(regions.begin(), regions.end(), [](const ErrorRegion& a, const ErrorRegion& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a.members.front() < b.members.front();
  });
  return regions;
}

/// Gaussian kernel density of each member, estimated from the members of the
/// same region:  (1 / (R (2 pi)^{3/2} h^3)) sum_j exp(-|x_i - x_j|^2 / 2h^2).
inline std::vector<double> kde_density(std::span<const float> positions, std::span<const std::uint32_t> members,
                                       double bandwidth) {
  if (members.empty()) throw ContractError("kde_density: empty region");
  if (!(bandwidth > 0.0)) throw ContractError("kde_density: bandwidth must be positive");
  const std::size_t r = members.size();
  const double norm = 1.0 / (static_cast<double>(r) * std::pow(2.0 * M_PI, 1.5) * bandwidth * bandwidth * bandwidth);
  const double inv_2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
  std::vector<double> xyz(3 * r);
  for (std::size_t i = 0; i < r; ++i)
    for (int a = 0; a < 3; ++a) xyz[3 * i + a] = positions[3 * members[i] + a];
  std::vector<double> density(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < r; ++j) {
      const double dx = xyz[3 * i] - xyz[3 * j], dy = xyz[3 * i + 1] - xyz[3 * j + 1], dz = xyz[3 * i + 2] - xyz[3 * j + 2];
      s += std::exp(-(dx * dx + dy * dy + dz * dz) * inv_2h2);
    }
    density[i] = s * norm;
  }
  return density;
}

struct SimView {
  std::span<const int> predicted;
  std::span<const int> ground_truth;
  std::span<const float> positions;
};

namespace detail {

/// Densest core member not in `excluded`; lowest id wins ties. Returns -1 when
/// no candidate remains.
inline std::int64_t pick_member(const ErrorRegion& r, const std::unordered_set<std::size_t>& excluded, bool weighted,
                                std::mt19937_64& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t j = 0; j < r.size(); ++j)
    if (r.core[j] && !excluded.contains(r.members[j])) cand.push_back(j);
  if (cand.empty()) return -1;
  if (weighted) {
    std::vector<double> w;
    for (const auto j : cand) w.push_back(r.density[j]);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    return cand[pick(rng)];
  }
  std::size_t best = cand.front();
  for (const auto j : cand)
    if (r.density[j] > r.density[best]) best = j;
  return static_cast<std::int64_t>(best);
}

}  // namespace detail

/// Corrective clicks for the current prediction. One click per region,
/// largest regions first; when fewer regions than clicks_per_round exist the
/// remainder comes from the largest region. Points in `excluded` (for
/// example earlier clicks) are never chosen. An empty result means there is
/// nothing left worth clicking.
inline std::vector<InteractionRecord> next_clicks(const SimView& view, const SimConfig& config, int round = 0,
                                                  const std::unordered_set<std::size_t>& excluded = {}) {
  validate(config);
  auto mask = error_map(view.predicted, view.ground_truth);
  auto regions = cluster_errors(view.positions, mask, config);
  std::vector<InteractionRecord> out;
  if (regions.empty()) return out;
  std::mt19937_64 rng(config.rng_seed + static_cast<std::uint64_t>(round) * 7919u);
  std::unordered_set<std::size_t> taken = excluded;

  auto click_in = [&](ErrorRegion& r) {
    if (r.density.empty()) r.density = kde_density(view.positions, r.members, config.kde_bandwidth);
    const auto j = detail::pick_member(r, taken, config.weighted_sampling, rng);
    if (j < 0) return false;
    const std::size_t idx = r.members[static_cast<std::size_t>(j)];
    taken.insert(idx);
    out.push_back({idx, view.ground_truth[idx], round, ClickSource::Simulator});
    return true;
  };
  for (auto& r : regions) {
    if (out.size() >= config.clicks_per_round) break;
    click_in(r);
  }
  for (auto& r : regions) {
    while (out.size() < config.clicks_per_round && click_in(r)) {
    }
    if (out.size() >= config.clicks_per_round) break;
  }
  return out;
}

}  // namespace ipcs
