#pragma once

// Synthetic indoor scenes with semantic labels, the grid-subsample and
// longest-axis cropping preprocessing, ASCII PLY I/O and benchmark manifests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ipcs/cloud.hpp"
#include "ipcs/errors.hpp"

namespace ipcs {

enum SceneClass : int { kFloor = 0, kCeiling, kWall, kDoor, kBoard, kBox, kCylinder, kSphere, kNumSceneClasses };

inline const std::array<std::string, kNumSceneClasses>& class_names() {
  static const std::array<std::string, kNumSceneClasses> names{"floor", "ceiling", "wall",     "door",
                                                                "board", "box",     "cylinder", "sphere"};
  return names;
}

using Rgb = std::array<float, 3>;

inline std::array<Rgb, kNumSceneClasses> default_palette() {
  return {{{0.55f, 0.45f, 0.35f},
           {0.88f, 0.88f, 0.85f},
           {0.78f, 0.76f, 0.70f},
           {0.62f, 0.42f, 0.26f},
           {0.30f, 0.42f, 0.36f},
           {0.36f, 0.46f, 0.62f},
           {0.72f, 0.32f, 0.30f},
           {0.86f, 0.74f, 0.30f}}};
}

struct DomainShift {
  float color_jitter_sigma = 0.0f;  // per-scene, per-class rgb offset
  float scale_min = 1.0f;           // uniform geometry scale range
  float scale_max = 1.0f;
  float dropout = 0.0f;             // fraction of points removed

  static DomainShift none() { return {}; }
  static DomainShift default_test() { return {0.15f, 0.9f, 1.1f, 0.1f}; }
};

struct SceneSpec {
  std::array<float, 3> extents{3.0f, 2.5f, 2.2f};  // room size in meters
  float extent_jitter = 0.15f;                      // relative per-axis variation
  int doors = 1;
  int boards = 1;
  int boxes = 2;
  int cylinders = 1;
  int spheres = 1;
  float points_per_m2 = 450.0f;
  std::array<Rgb, kNumSceneClasses> palette = default_palette();
  float class_color_sigma = 0.04f;  // natural per-scene color variation
  float point_color_noise = 0.03f;
  DomainShift shift;
  std::uint64_t seed = 0;
};

inline void validate(const SceneSpec& s) {
  for (const float e : s.extents)
    if (!(e > 0.5f)) throw ContractError("scene: room extents must exceed 0.5 m");
  if (s.extent_jitter < 0.0f || s.extent_jitter >= 0.5f) throw ContractError("scene: extent_jitter must lie in [0,0.5)");
  if (s.shift.dropout < 0.0f || s.shift.dropout >= 1.0f) throw ContractError("scene: dropout must lie in [0,1)");
  if (!(s.points_per_m2 > 0.0f)) throw ContractError("scene: points_per_m2 must be positive");
  if (s.shift.scale_min <= 0.0f || s.shift.scale_max < s.shift.scale_min)
    throw ContractError("scene: invalid scale range");
  if (s.doors < 0 || s.boards < 0 || s.boxes < 0 || s.cylinders < 0 || s.spheres < 0)
    throw ContractError("scene: object counts must be non-negative");
}

namespace detail {

class SurfaceSampler {
 public:
  SurfaceSampler(std::mt19937_64& rng, float density) : rng_(rng), density_(density) {}

  std::size_t count_for(double area) const { return static_cast<std::size_t>(std::llround(area * density_)); }

  /// Parallelogram origin + u*a + v*b, u, v in [0,1].
  /// Points for which `reject` returns true are dropped.
  void rectangle(const std::array<float, 3>& o, const std::array<float, 3>& a, const std::array<float, 3>& b, int label,
                 const std::function<bool(const std::array<float, 3>&)>& reject = {}) {
    const double area = norm(cross(a, b));
    std::uniform_real_distribution<float> u01(0.0f, 1.0f);
    for (std::size_t i = 0, n = count_for(area); i < n; ++i) {
      const float u = u01(rng_), v = u01(rng_);
      const std::array<float, 3> p{o[0] + u * a[0] + v * b[0], o[1] + u * a[1] + v * b[1], o[2] + u * a[2] + v * b[2]};
      if (reject && reject(p)) continue;
      emit(p, label);
    }
  }

  void cylinder_side(float cx, float cy, float r, float h, int label) {
    const double area = 2.0 * M_PI * r * h;
    std::uniform_real_distribution<float> u01(0.0f, 1.0f);
    for (std::size_t i = 0, n = count_for(area); i < n; ++i) {
      const float t = 2.0f * static_cast<float>(M_PI) * u01(rng_), z = h * u01(rng_);
      emit({cx + r * std::cos(t), cy + r * std::sin(t), z}, label);
    }
  }

  void disk(float cx, float cy, float z, float r, int label) {
    const double area = M_PI * r * r;
    std::uniform_real_distribution<float> u01(0.0f, 1.0f);
    for (std::size_t i = 0, n = count_for(area); i < n; ++i) {
      const float t = 2.0f * static_cast<float>(M_PI) * u01(rng_), rr = r * std::sqrt(u01(rng_));
      emit({cx + rr * std::cos(t), cy + rr * std::sin(t), z}, label);
    }
  }

  void sphere(float cx, float cy, float cz, float r, int label) {
    const double area = 4.0 * M_PI * r * r;
    std::uniform_real_distribution<float> u01(0.0f, 1.0f);
    for (std::size_t i = 0, n = count_for(area); i < n; ++i) {
      const float z = 2.0f * u01(rng_) - 1.0f, t = 2.0f * static_cast<float>(M_PI) * u01(rng_);
      const float s = std::sqrt(std::max(0.0f, 1.0f - z * z));
      emit({cx + r * s * std::cos(t), cy + r * s * std::sin(t), cz + r * z}, label);
    }
  }

  std::vector<float> positions;
  std::vector<int> labels;

 private:
  static std::array<double, 3> cross(const std::array<float, 3>& a, const std::array<float, 3>& b) {
    return {static_cast<double>(a[1]) * b[2] - static_cast<double>(a[2]) * b[1],
            static_cast<double>(a[2]) * b[0] - static_cast<double>(a[0]) * b[2],
            static_cast<double>(a[0]) * b[1] - static_cast<double>(a[1]) * b[0]};
  }
  static double norm(const std::array<double, 3>& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

  void emit(const std::array<float, 3>& p, int label) {
    positions.insert(positions.end(), p.begin(), p.end());
    labels.push_back(label);
  }

  std::mt19937_64& rng_;
  float density_;
};

}  // namespace detail

/// Samples a furnished box-shaped room. The room is centered on the origin in
/// x and y with the floor at z = 0. Wall area hidden behind doors and boards
/// and floor area under boxes is not sampled.
inline LabeledCloud generate_scene(const SceneSpec& spec, std::string name = "scene") {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  auto uniform = [&](float lo, float hi) { return lo + (hi - lo) * u01(rng); };

  const float sx = spec.extents[0] * uniform(1.0f - spec.extent_jitter, 1.0f + spec.extent_jitter);
  const float sy = spec.extents[1] * uniform(1.0f - spec.extent_jitter, 1.0f + spec.extent_jitter);
  const float sz = spec.extents[2] * uniform(1.0f - spec.extent_jitter, 1.0f + spec.extent_jitter);
  const float hx = sx / 2, hy = sy / 2;

  // Layout first, sampling second.
  struct Panel {
    int wall;  // 0: y=-hy, 1: y=+hy, 2: x=-hx, 3: x=+hx
    float start, width, bottom, height;
    int label;
  };
  std::vector<Panel> panels;
  auto place_panel = [&](float width, float height, float bottom, int label) {
    Panel p;
    p.wall = static_cast<int>(u01(rng) * 4.0f) % 4;
    const float len = p.wall < 2 ? sx : sy;
    p.width = std::min(width, len * 0.8f);
    p.start = uniform(-len / 2 + 0.05f, len / 2 - 0.05f - p.width);
    p.bottom = bottom;
    p.height = std::min(height, sz - bottom - 0.05f);
    p.label = label;
    panels.push_back(p);
  };
  for (int i = 0; i < spec.doors; ++i) place_panel(uniform(0.8f, 1.0f), uniform(1.9f, 2.1f), 0.0f, kDoor);
  for (int i = 0; i < spec.boards; ++i) place_panel(uniform(1.0f, 1.6f), uniform(0.7f, 1.0f), uniform(0.8f, 1.0f), kBoard);

  struct Footprint {
    float x0, y0, x1, y1;
  };
  std::vector<Footprint> footprints;
  struct Box {
    float x0, y0, bx, by, bz;
  };
  std::vector<Box> boxes;
  for (int i = 0; i < spec.boxes; ++i) {
    Box b;
    b.bx = uniform(0.4f, 0.9f);
    b.by = uniform(0.4f, 0.9f);
    b.bz = uniform(0.4f, 0.9f);
    b.x0 = uniform(-hx + 0.1f, hx - 0.1f - b.bx);
    b.y0 = uniform(-hy + 0.1f, hy - 0.1f - b.by);
    boxes.push_back(b);
    footprints.push_back({b.x0, b.y0, b.x0 + b.bx, b.y0 + b.by});
  }

  detail::SurfaceSampler s(rng, spec.points_per_m2);
  s.rectangle({-hx, -hy, 0}, {sx, 0, 0}, {0, sy, 0}, kFloor, [&](const std::array<float, 3>& p) {
    return std::any_of(footprints.begin(), footprints.end(),
                       [&](const Footprint& f) { return p[0] > f.x0 && p[0] < f.x1 && p[1] > f.y0 && p[1] < f.y1; });
  });
  s.rectangle({-hx, -hy, sz}, {sx, 0, 0}, {0, sy, 0}, kCeiling);
  auto behind_panel = [&](int wall) {
    return [&, wall](const std::array<float, 3>& p) {
      const float along = wall < 2 ? p[0] : p[1];
      return std::any_of(panels.begin(), panels.end(), [&](const Panel& q) {
        return q.wall == wall && along >= q.start && along <= q.start + q.width && p[2] >= q.bottom &&
               p[2] <= q.bottom + q.height;
      });
    };
  };
  s.rectangle({-hx, -hy, 0}, {sx, 0, 0}, {0, 0, sz}, kWall, behind_panel(0));
  s.rectangle({-hx, hy, 0}, {sx, 0, 0}, {0, 0, sz}, kWall, behind_panel(1));
  s.rectangle({-hx, -hy, 0}, {0, sy, 0}, {0, 0, sz}, kWall, behind_panel(2));
  s.rectangle({hx, -hy, 0}, {0, sy, 0}, {0, 0, sz}, kWall, behind_panel(3));

  const float inset = 0.01f;
  for (const auto& q : panels) {
    switch (q.wall) {
      case 0: s.rectangle({q.start, -hy + inset, q.bottom}, {q.width, 0, 0}, {0, 0, q.height}, q.label); break;
      case 1: s.rectangle({q.start, hy - inset, q.bottom}, {q.width, 0, 0}, {0, 0, q.height}, q.label); break;
      case 2: s.rectangle({-hx + inset, q.start, q.bottom}, {0, q.width, 0}, {0, 0, q.height}, q.label); break;
      default: s.rectangle({hx - inset, q.start, q.bottom}, {0, q.width, 0}, {0, 0, q.height}, q.label); break;
    }
  }
  for (const auto& b : boxes) {
    s.rectangle({b.x0, b.y0, b.bz}, {b.bx, 0, 0}, {0, b.by, 0}, kBox);
    s.rectangle({b.x0, b.y0, 0}, {b.bx, 0, 0}, {0, 0, b.bz}, kBox);
    s.rectangle({b.x0, b.y0 + b.by, 0}, {b.bx, 0, 0}, {0, 0, b.bz}, kBox);
    s.rectangle({b.x0, b.y0, 0}, {0, b.by, 0}, {0, 0, b.bz}, kBox);
    s.rectangle({b.x0 + b.bx, b.y0, 0}, {0, b.by, 0}, {0, 0, b.bz}, kBox);
  }
  for (int i = 0; i < spec.cylinders; ++i) {
    const float r = uniform(0.15f, 0.3f), h = uniform(0.5f, 1.2f);
    const float cx = uniform(-hx + r + 0.05f, hx - r - 0.05f), cy = uniform(-hy + r + 0.05f, hy - r - 0.05f);
    s.cylinder_side(cx, cy, r, h, kCylinder);
    s.disk(cx, cy, h, r, kCylinder);
  }
  for (int i = 0; i < spec.spheres; ++i) {
    const float r = uniform(0.15f, 0.3f);
    const float cx = uniform(-hx + r + 0.05f, hx - r - 0.05f), cy = uniform(-hy + r + 0.05f, hy - r - 0.05f);
    s.sphere(cx, cy, r, r, kSphere);
  }

  // Per-scene class colors: palette + natural variation + domain shift.
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::array<Rgb, kNumSceneClasses> colors = spec.palette;
  for (auto& c : colors)
    for (float& v : c) v += spec.class_color_sigma * gauss(rng) + spec.shift.color_jitter_sigma * gauss(rng);
  const float geo_scale = uniform(spec.shift.scale_min, spec.shift.scale_max);

  const std::size_t n = s.labels.size();
  std::vector<float> pos, rgb;
  std::vector<int> labels;
  pos.reserve(3 * n);
  rgb.reserve(3 * n);
  labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<float, 3> noise{gauss(rng), gauss(rng), gauss(rng)};
    const bool keep = u01(rng) >= spec.shift.dropout;
    if (!keep) continue;
    for (int k = 0; k < 3; ++k) {
      pos.push_back(s.positions[3 * i + k] * geo_scale);
      // Quantized to 8 bits so PLY round trips are exact.
      const float c = std::clamp(colors[s.labels[i]][k] + spec.point_color_noise * noise[k], 0.0f, 1.0f);
      rgb.push_back(static_cast<float>(std::lround(c * 255.0f) / 255.0));
    }
    labels.push_back(s.labels[i]);
  }
  LabeledCloud cloud;
  cloud.name = std::move(name);
  cloud.features = make_features(pos, rgb);
  cloud.positions = std::move(pos);
  cloud.labels = std::move(labels);
  return cloud;
}


/// Keeps one point per occupied cubic cell: the point closest to the centroid
/// of the cell's points (lowest index on ties). Output preserves input order.
inline LabeledCloud grid_subsample(const LabeledCloud& cloud, double cell) {
  if (!(cell > 0.0)) throw ContractError("grid_subsample: cell must be positive");
  const std::size_t n = cloud.size();
  struct Acc {
    double sum[3] = {0, 0, 0};
    std::size_t count = 0;
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
  };
  auto key_of = [&](std::size_t i) {
    std::array<std::int64_t, 3> k;
    for (int a = 0; a < 3; ++a) k[a] = static_cast<std::int64_t>(std::floor(cloud.positions[3 * i + a] / cell));
    return k;
  };
  std::map<std::array<std::int64_t, 3>, Acc> cells;
  for (std::size_t i = 0; i < n; ++i) {
    auto& acc = cells[key_of(i)];
    for (int a = 0; a < 3; ++a) acc.sum[a] += cloud.positions[3 * i + a];
    ++acc.count;
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& acc = cells[key_of(i)];
    double d2 = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = cloud.positions[3 * i + a] - acc.sum[a] / static_cast<double>(acc.count);
      d2 += d * d;
    }
    if (d2 < acc.best_d2) {
      acc.best = i;
      acc.best_d2 = d2;
    }
  }
  std::vector<std::size_t> keep;
  keep.reserve(cells.size());
  for (const auto& [k, acc] : cells) keep.push_back(acc.best);
  std::sort(keep.begin(), keep.end());
  return select_points(cloud, keep, cloud.name);
}

/// Splits a cloud into slabs along its longest axis until every part holds at
/// most max_points. Points on a slab boundary go to the lower slab.
inline std::vector<LabeledCloud> crop_longest_axis(const LabeledCloud& cloud, std::size_t max_points) {
  if (max_points == 0) throw ContractError("crop_longest_axis: max_points must be positive");
  std::vector<LabeledCloud> out;
  const std::size_t n = cloud.size();
  if (n <= max_points) {
    out.push_back(cloud);
    return out;
  }
  std::array<float, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) lo[a] = hi[a] = cloud.positions[a];
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], cloud.positions[3 * i + a]);
      hi[a] = std::max(hi[a], cloud.positions[3 * i + a]);
    }
  int axis = 0;
  for (int a = 1; a < 3; ++a)
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  const double extent = static_cast<double>(hi[axis]) - lo[axis];

  auto part_name = [&](std::size_t i) { return cloud.name + "_part" + std::to_string(i); };
  if (!(extent > 0.0)) {
    // All points coincide along every axis; split by index.
    for (std::size_t start = 0, part = 0; start < n; start += max_points, ++part) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(n, start + max_points); ++i) idx.push_back(i);
      out.push_back(select_points(cloud, idx, part_name(part)));
    }
    return out;
  }

  auto assign = [&](std::size_t slabs) {
    std::vector<std::vector<std::size_t>> parts(slabs);
    const double width = extent / static_cast<double>(slabs);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = (static_cast<double>(cloud.positions[3 * i + axis]) - lo[axis]) / width;
      auto s = static_cast<std::int64_t>(std::ceil(t)) - 1;
      s = std::clamp<std::int64_t>(s, 0, static_cast<std::int64_t>(slabs) - 1);
      parts[static_cast<std::size_t>(s)].push_back(i);
    }
    return parts;
  };

  const std::size_t minimal = (n + max_points - 1) / max_points;
  std::vector<std::vector<std::size_t>> parts;
  bool ok = false;
  for (std::size_t slabs = std::max<std::size_t>(2, minimal); slabs <= 4 * minimal + 4; ++slabs) {
    parts = assign(slabs);
    ok = std::all_of(parts.begin(), parts.end(), [&](const auto& p) { return p.size() <= max_points; });
    if (ok) break;
  }
  if (!ok) parts = assign(std::max<std::size_t>(2, minimal));

  std::size_t counter = 0;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    auto sub = select_points(cloud, p, part_name(counter++));
    if (sub.size() > max_points) {
      for (auto& piece : crop_longest_axis(sub, max_points)) out.push_back(std::move(piece));
    } else {
      out.push_back(std::move(sub));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ASCII PLY

inline constexpr int kPlyUnlabeled = 255;

inline void save_ply(const LabeledCloud& cloud, std::ostream& os) {
  const std::size_t n = cloud.size();
  os << "ply\nformat ascii 1.0\ncomment ipcs point cloud " << cloud.name << "\n";
  os << "element vertex " << n << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (cloud.labels) os << "property int label\n";
  os << "end_header\n";
  char buf[160];
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = cloud.position(i);
    const auto c = cloud.feature_dim >= 6 ? cloud.color(i) : std::array<float, 3>{0, 0, 0};
    auto byte = [](float v) { return static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); };
    int len = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %d %d %d", p[0], p[1], p[2], byte(c[0]), byte(c[1]),
                            byte(c[2]));
    os.write(buf, len);
    if (cloud.labels) os << ' ' << (*cloud.labels)[i];
    os << '\n';
  }
}

inline void save_ply(const LabeledCloud& cloud, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_ply(cloud, os);
}

/// Reads an ASCII PLY vertex element. Recognized properties: x y z, red green
/// blue (integer types scale by 1/255), label (255 = unlabeled). A file whose
/// labels are all 255 or that lacks a label property yields no labels.
inline LabeledCloud load_ply(std::istream& is, std::string name = "cloud") {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError("ply line " + std::to_string(line_no) + ": " + msg);
  };
  auto next = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next() || line != "ply") throw fail("missing 'ply' magic");

  struct Property {
    std::string name;
    bool integral = false;
  };
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<Property> props;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool format_ok = false;
  for (;;) {
    if (!next()) throw fail("unexpected end of header");
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") break;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string fmt, ver;
      ls >> fmt >> ver;
      if (fmt != "ascii") throw fail("only ascii PLY is supported, got '" + fmt + "'");
      format_ok = true;
    } else if (word == "element") {
      Element e;
      long long count = -1;
      ls >> e.name >> count;
      if (!ls || count < 0) throw fail("malformed element line");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (word == "property") {
      if (elements.empty()) throw fail("property before any element");
      std::string type, pname;
      ls >> type;
      if (type == "list") {
        elements.back().has_list = true;
        std::string t1, t2;
        ls >> t1 >> t2 >> pname;
        elements.back().props.push_back({pname, false});
        continue;
      }
      ls >> pname;
      if (!ls) throw fail("malformed property line");
      static const std::vector<std::string> integral{"char",  "uchar", "short", "ushort", "int",    "uint",
                                                     "int8",  "uint8", "int16", "uint16", "int32",  "uint32"};
      static const std::vector<std::string> floating{"float", "double", "float32", "float64"};
      const bool is_int = std::find(integral.begin(), integral.end(), type) != integral.end();
      const bool is_float = std::find(floating.begin(), floating.end(), type) != floating.end();
      if (!is_int && !is_float) throw fail("unknown property type '" + type + "'");
      elements.back().props.push_back({pname, is_int});
    } else {
      throw fail("unexpected header keyword '" + word + "'");
    }
  }
  if (!format_ok) throw fail("missing format line");

  LabeledCloud cloud;
  cloud.name = std::move(name);
  bool found_vertex = false;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i)
        if (!next()) throw fail("body ended inside element '" + e.name + "'");
      continue;
    }
    found_vertex = true;
    if (e.has_list) throw fail("list properties on vertices are not supported");
    int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1, il = -1;
    for (int p = 0; p < static_cast<int>(e.props.size()); ++p) {
      const auto& nm = e.props[p].name;
      if (nm == "x") ix = p;
      else if (nm == "y") iy = p;
      else if (nm == "z") iz = p;
      else if (nm == "red" || nm == "r") ir = p;
      else if (nm == "green" || nm == "g") ig = p;
      else if (nm == "blue" || nm == "b") ib = p;
      else if (nm == "label") il = p;
    }
    if (ix < 0 || iy < 0 || iz < 0) throw fail("vertex element lacks x/y/z");
    const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;
    std::vector<float> pos, rgb;
    std::vector<int> labels;
    pos.reserve(3 * e.count);
    rgb.reserve(3 * e.count);
    std::vector<double> vals(e.props.size());
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!next()) throw fail("body has fewer vertices than the declared " + std::to_string(e.count));
      std::istringstream ls(line);
      for (auto& v : vals)
        if (!(ls >> v)) throw fail("expected " + std::to_string(e.props.size()) + " values");
      std::string extra;
      if (ls >> extra) throw fail("trailing values on vertex line");
      pos.push_back(static_cast<float>(vals[ix]));
      pos.push_back(static_cast<float>(vals[iy]));
      pos.push_back(static_cast<float>(vals[iz]));
      for (const int c : {ir, ig, ib}) {
        float v = 0.0f;
        if (has_color) v = static_cast<float>(e.props[c].integral ? vals[c] / 255.0 : vals[c]);
        rgb.push_back(v);
      }
      if (il >= 0) labels.push_back(static_cast<int>(vals[il]));
    }
    cloud.features = make_features(pos, rgb);
    cloud.positions = std::move(pos);
    if (il >= 0) {
      const auto unlabeled = std::count(labels.begin(), labels.end(), kPlyUnlabeled);
      if (unlabeled == static_cast<std::ptrdiff_t>(labels.size())) {
        // no labels
      } else if (unlabeled > 0) {
        throw fail("partially labeled clouds are not supported");
      } else {
        cloud.labels = std::move(labels);
      }
    }
  }
  if (!found_vertex) throw fail("no vertex element");
  while (next()) {
    if (line.find_first_not_of(" \t") != std::string::npos) throw fail("body has more lines than declared elements");
  }
  return cloud;
}

inline LabeledCloud load_ply(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open '" + path + "'");
  return load_ply(is, std::filesystem::path(path).stem().string());
}

// ---------------------------------------------------------------------------
// Benchmarks

struct BenchmarkSpec {
  std::size_t num_train = 20;
  std::size_t num_test = 20;
  SceneSpec scene;
  DomainShift test_shift = DomainShift::default_test();
  double grid_cell = 0.03;
  std::size_t max_points = 150000;
  std::uint64_t seed = 1;
};

inline std::uint64_t scene_seed(std::uint64_t base, bool test, std::size_t index) {
  return base * 1000003ull + (test ? 500000ull : 0ull) + index;
}

/// Generates, subsamples and crops one split. Crops become separate scenes.
inline std::vector<LabeledCloud> generate_split(const BenchmarkSpec& b, bool test) {
  std::vector<LabeledCloud> out;
  const std::size_t count = test ? b.num_test : b.num_train;
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec s = b.scene;
    s.seed = scene_seed(b.seed, test, i);
    s.shift = test ? b.test_shift : DomainShift::none();
    char name[32];
    std::snprintf(name, sizeof name, "%s_%03zu", test ? "test" : "train", i);
    auto cloud = grid_subsample(generate_scene(s, name), b.grid_cell);
    for (auto& part : crop_longest_axis(cloud, b.max_points)) out.push_back(std::move(part));
  }
  return out;
}

struct ManifestEntry {
  std::string name;
  std::string path;  // relative to the manifest directory
  std::string split;
  std::uint64_t seed = 0;
  std::size_t points = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  nlohmann::json spec;

  std::vector<ManifestEntry> split(const std::string& which) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == which) out.push_back(e);
    return out;
  }
};

inline nlohmann::json to_json(const BenchmarkSpec& b) {
  nlohmann::json j;
  j["num_train"] = b.num_train;
  j["num_test"] = b.num_test;
  j["seed"] = b.seed;
  j["grid_cell"] = b.grid_cell;
  j["max_points"] = b.max_points;
  j["extents"] = b.scene.extents;
  j["extent_jitter"] = b.scene.extent_jitter;
  j["points_per_m2"] = b.scene.points_per_m2;
  j["objects"] = {{"doors", b.scene.doors},
                  {"boards", b.scene.boards},
                  {"boxes", b.scene.boxes},
                  {"cylinders", b.scene.cylinders},
                  {"spheres", b.scene.spheres}};
  j["shift"] = {{"color_jitter_sigma", b.test_shift.color_jitter_sigma},
                {"scale_min", b.test_shift.scale_min},
                {"scale_max", b.test_shift.scale_max},
                {"dropout", b.test_shift.dropout}};
  return j;
}

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json j;
  j["format"] = "ipcs-manifest";
  j["version"] = 1;
  j["spec"] = m.spec;
  j["scenes"] = nlohmann::json::array();
  for (const auto& e : m.entries)
    j["scenes"].push_back({{"name", e.name}, {"path", e.path}, {"split", e.split}, {"seed", e.seed}, {"points", e.points}});
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "ipcs-manifest") throw ParseError("not an ipcs manifest");
  Manifest m;
  m.spec = j.at("spec");
  for (const auto& s : j.at("scenes"))
    m.entries.push_back({s.at("name"), s.at("path"), s.at("split"), s.at("seed"), s.at("points")});
  return m;
}

/// Writes train/test PLY files and manifest.json under `dir`.
inline Manifest make_benchmark(const BenchmarkSpec& b, const std::filesystem::path& dir) {
  if (b.num_train < 1 || b.num_test < 1) throw ContractError("make_benchmark: counts must be >= 1");
  std::filesystem::create_directories(dir);
  Manifest m;
  m.spec = to_json(b);
  for (const bool test : {false, true}) {
    const auto clouds = generate_split(b, test);
    for (const auto& c : clouds) {
      const std::string file = c.name + ".ply";
      save_ply(c, (dir / file).string());
      const auto base = c.name.substr(0, c.name.find("_part"));
      const std::size_t index = std::stoul(base.substr(base.find('_') + 1));
      m.entries.push_back({c.name, file, test ? "test" : "train", scene_seed(b.seed, test, index), c.size()});
    }
  }
  std::ofstream os(dir / "manifest.json");
  os << to_json(m).dump(2) << "\n";
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open manifest '" + path.string() + "'");
  return manifest_from_json(nlohmann::json::parse(is));
}

inline std::vector<LabeledCloud> load_split(const Manifest& m, const std::filesystem::path& dir, const std::string& split) {
  std::vector<LabeledCloud> out;
  for (const auto& e : m.split(split)) {
    auto c = load_ply((dir / e.path).string());
    c.name = e.name;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace ipcs
