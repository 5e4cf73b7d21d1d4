#pragma once

// Benchmark protocol: simulated clicks against every (scene, variant, seed)
// triple, mIoU curves, NoC statistics and the CSV/JSON/SVG reports.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ipcs/cloud.hpp"
#include "ipcs/errors.hpp"
#include "ipcs/interaction_sim.hpp"
#include "ipcs/refine.hpp"
#include "ipcs/segnet.hpp"

namespace ipcs {

/// Mean IoU over classes present in the prediction or the ground truth.
inline double miou(std::span<const int> predicted, std::span<const int> ground_truth, std::size_t num_classes) {
  if (predicted.size() != ground_truth.size()) throw DimensionError("miou: length mismatch");
  if (predicted.empty()) throw EmptySupportError("miou: empty input");
  std::vector<std::size_t> inter(num_classes, 0), uni(num_classes, 0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], g = ground_truth[i];
    if (p < 0 || g < 0 || p >= static_cast<int>(num_classes) || g >= static_cast<int>(num_classes))
      throw ContractError("miou: label out of range at point " + std::to_string(i));
    if (p == g) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[g];
    }
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (uni[c] == 0) continue;
    total += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  return total / static_cast<double>(present);
}

struct Variant {
  std::string name;
  RefineConfig config;
};

/// Full method plus the four comparison variants.
inline std::vector<Variant> standard_variants(const RefineConfig& base) {
  std::vector<Variant> v;
  v.push_back({"full", base});
  auto add = [&](const char* name, auto&& tweak) {
    RefineConfig c = base;
    tweak(c.ablation);
    v.push_back({name, c});
  };
  add("no_stabilization", [](AblationFlags& a) { a.no_stabilization = true; });
  add("no_filtering", [](AblationFlags& a) { a.no_filtering = true; });
  add("no_warmup", [](AblationFlags& a) { a.no_warmup = true; });
  add("ia_baseline", [](AblationFlags& a) { a.ia_baseline = true; });
  return v;
}

struct ProtocolConfig {
  std::size_t budget = 30;
  std::vector<double> targets{0.80, 0.85, 0.90};
  SimConfig sim;
  /// Keep clicking after every target is reached, up to the budget.
  bool run_full_budget = false;
};

struct RunRecord {
  std::string scene;
  std::string variant;
  std::uint64_t seed = 0;
  /// curve[k] is the mIoU after k clicks; curve[0] follows warm-up.
  std::vector<double> curve;
  std::size_t clicks = 0;
  bool simulator_exhausted = false;
  double seconds = 0.0;
  /// Summed over refine calls: clicked points checked, and how many of them
  /// carried their corrected label afterwards.
  std::size_t clicked_checked = 0;
  std::size_t clicked_kept = 0;

  double initial() const { return curve.front(); }
  double final() const { return curve.back(); }
};

/// Index of the first curve entry at or above `target`, or nullopt when the
/// run never got there.
inline std::optional<std::size_t> number_of_clicks(std::span<const double> curve, double target) {
  for (std::size_t k = 0; k < curve.size(); ++k)
    if (curve[k] >= target) return k;
  return std::nullopt;
}

/// Curve of length budget + 1; a run that stopped early holds its last value.
inline std::vector<double> padded_curve(const RunRecord& r, std::size_t budget) {
  std::vector<double> c = r.curve;
  c.resize(budget + 1, c.back());
  return c;
}

inline RunRecord run_protocol(const LabeledCloud& scene, const NetworkParams& params, const Variant& variant,
                              const ProtocolConfig& protocol, std::uint64_t seed) {
  if (!scene.labels) throw ContractError("run_protocol: scene '" + scene.name + "' has no ground truth");
  const auto t0 = std::chrono::steady_clock::now();
  const auto& gt = *scene.labels;
  const std::size_t m = params.config.num_classes;
  RunRecord rec{scene.name, variant.name, seed, {}, 0, false, 0.0, 0, 0};

  auto session = make_session(scene, params, variant.config);
  warm_up(session);
  rec.curve.push_back(miou(session.seg.labels, gt, m));

  SimConfig sim = protocol.sim;
  sim.rng_seed = protocol.sim.rng_seed ^ (seed * 0x9e3779b97f4a7c15ULL);
  std::unordered_set<std::size_t> clicked;
  auto all_reached = [&] {
    return std::all_of(protocol.targets.begin(), protocol.targets.end(),
                       [&](double t) { return number_of_clicks(rec.curve, t).has_value(); });
  };
  while (rec.clicks < protocol.budget) {
    if (!protocol.run_full_budget && all_reached()) break;
    auto clicks = next_clicks({session.seg.labels, gt, scene.positions}, sim, static_cast<int>(rec.clicks), clicked);
    if (clicks.empty()) {
      rec.simulator_exhausted = true;
      break;
    }
    if (clicks.size() > protocol.budget - rec.clicks) clicks.resize(protocol.budget - rec.clicks);
    for (const auto& c : clicks) clicked.insert(c.point_index);
    refine(session, clicks);
    for (const auto& c : session.clicks) {
      ++rec.clicked_checked;
      rec.clicked_kept += session.seg.labels[c.point_index] == c.corrected_label;
    }
    rec.clicks += clicks.size();
    const double v = miou(session.seg.labels, gt, m);
    for (std::size_t k = 0; k < clicks.size(); ++k) rec.curve.push_back(v);
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

struct BenchmarkJob {
  const LabeledCloud* scene;
  const NetworkParams* params;
  const Variant* variant;
  std::uint64_t seed;
};

/// Runs every job on a pool of `threads` workers; results keep job order.
inline std::vector<RunRecord> run_jobs(const std::vector<BenchmarkJob>& jobs, const ProtocolConfig& protocol,
                                       std::size_t threads) {
  std::vector<RunRecord> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const auto& j = jobs[i];
        out[i] = run_protocol(*j.scene, *j.params, *j.variant, protocol, j.seed);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// One backbone per seed. Records come out ordered by seed, scene, variant.
inline std::vector<RunRecord> run_benchmark(const std::vector<LabeledCloud>& scenes,
                                            const std::vector<std::pair<std::uint64_t, NetworkParams>>& backbones,
                                            const std::vector<Variant>& variants, const ProtocolConfig& protocol,
                                            std::size_t threads = 1) {
  std::vector<BenchmarkJob> jobs;
  for (const auto& [seed, params] : backbones)
    for (const auto& s : scenes)
      for (const auto& v : variants) jobs.push_back({&s, &params, &v, seed});
  return run_jobs(jobs, protocol, threads);
}

// ---------------------------------------------------------------------------
// Reports

/// One row per (run, click count), with curves padded to the budget. Timing
/// is left out so that repeated runs produce identical bytes.
inline std::string curves_csv(const std::vector<RunRecord>& runs, std::size_t budget) {
  std::string out = "scene,variant,seed,click,miou\n";
  char buf[64];
  for (const auto& r : runs) {
    const auto c = padded_curve(r, budget);
    for (std::size_t k = 0; k < c.size(); ++k) {
      std::snprintf(buf, sizeof buf, ",%zu,%.6f\n", k, c[k]);
      out += r.scene + "," + r.variant + "," + std::to_string(r.seed) + buf;
    }
  }
  return out;
}

struct VariantSummary {
  std::string name;
  std::size_t runs = 0;
  std::vector<double> mean_noc;      // per target, over runs that reached it
  std::vector<double> failure_rate;  // per target
  double mean_initial = 0.0;
  double mean_final = 0.0;
  std::vector<double> mean_curve;
};

inline std::vector<VariantSummary> summarize(const std::vector<RunRecord>& runs, const ProtocolConfig& protocol) {
  std::vector<VariantSummary> out;
  std::map<std::string, std::size_t> slot;
  for (const auto& r : runs) {
    if (!slot.contains(r.variant)) {
      slot[r.variant] = out.size();
      VariantSummary s;
      s.name = r.variant;
      s.mean_noc.assign(protocol.targets.size(), 0.0);
      s.failure_rate.assign(protocol.targets.size(), 0.0);
      s.mean_curve.assign(protocol.budget + 1, 0.0);
      out.push_back(std::move(s));
    }
    auto& s = out[slot[r.variant]];
    ++s.runs;
    const auto c = padded_curve(r, protocol.budget);
    for (std::size_t t = 0; t < protocol.targets.size(); ++t) {
      const auto noc = number_of_clicks(c, protocol.targets[t]);
      if (noc) s.mean_noc[t] += static_cast<double>(*noc);
      else s.failure_rate[t] += 1.0;
    }
    s.mean_initial += c.front();
    s.mean_final += c.back();
    for (std::size_t k = 0; k < c.size(); ++k) s.mean_curve[k] += c[k];
  }
  for (auto& s : out) {
    const double n = static_cast<double>(s.runs);
    for (std::size_t t = 0; t < s.mean_noc.size(); ++t) {
      const double reached = n - s.failure_rate[t];
      s.mean_noc[t] = reached > 0.0 ? s.mean_noc[t] / reached : std::nan("");
    }
    for (auto& v : s.failure_rate) v /= n;
    for (auto& v : s.mean_curve) v /= n;
    s.mean_initial /= n;
    s.mean_final /= n;
  }
  return out;
}

inline std::string summary_table(const std::vector<VariantSummary>& summary, const ProtocolConfig& protocol) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-18s", "variant");
  os << buf;
  for (const double t : protocol.targets) {
    std::snprintf(buf, sizeof buf, " NoC@%-3.0f FR@%-3.0f", t * 100, t * 100);
    os << buf;
  }
  os << "   mIoU@0  mIoU@" << protocol.budget << "\n";
  for (const auto& s : summary) {
    std::snprintf(buf, sizeof buf, "%-18s", s.name.c_str());
    os << buf;
    for (std::size_t t = 0; t < protocol.targets.size(); ++t) {
      std::snprintf(buf, sizeof buf, " %7.2f %5.1f%%", s.mean_noc[t], 100.0 * s.failure_rate[t]);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "   %6.2f  %6.2f\n", 100.0 * s.mean_initial, 100.0 * s.mean_final);
    os << buf;
  }
  return os.str();
}

inline nlohmann::json summary_json(const std::vector<VariantSummary>& summary, const ProtocolConfig& protocol) {
  nlohmann::json j;
  j["budget"] = protocol.budget;
  j["targets"] = protocol.targets;
  j["variants"] = nlohmann::json::array();
  for (const auto& s : summary) {
    nlohmann::json noc = nlohmann::json::array();
    for (const double v : s.mean_noc) noc.push_back(std::isnan(v) ? nlohmann::json() : nlohmann::json(v));
    j["variants"].push_back({{"name", s.name},
                             {"runs", s.runs},
                             {"mean_noc", noc},
                             {"failure_rate", s.failure_rate},
                             {"mean_initial_miou", s.mean_initial},
                             {"mean_final_miou", s.mean_final},
                             {"mean_curve", s.mean_curve}});
  }
  return j;
}

/// Mean mIoU against click count, one polyline per variant.
inline std::string curves_svg(const std::vector<VariantSummary>& summary, std::size_t budget) {
  constexpr double w = 640, h = 400, left = 60, right = 160, top = 20, bottom = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  double lo = 1.0, hi = 0.0;
  for (const auto& s : summary)
    for (const double v : s.mean_curve) lo = std::min(lo, v), hi = std::max(hi, v);
  lo = std::floor(lo * 20.0) / 20.0;
  hi = std::max(lo + 0.05, std::ceil(hi * 20.0) / 20.0);
  auto px = [&](double k) { return left + (w - left - right) * k / std::max<double>(1.0, budget); };
  auto py = [&](double v) { return top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo)); };
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\">\n", w, h);
  os << buf;
  std::snprintf(buf, sizeof buf, "<rect x=\"%.0f\" y=\"%.0f\" width=\"%.0f\" height=\"%.0f\" fill=\"none\" stroke=\"#444\"/>\n",
                left, top, w - left - right, h - top - bottom);
  os << buf;
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.1f</text>\n",
                  left - 6, py(v) + 4, 100.0 * v);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\">clicks</text>\n",
                (left + w - right) / 2, h - 12);
  os << buf;
  for (std::size_t i = 0; i < summary.size(); ++i) {
    const auto& s = summary[i];
    const char* color = colors[i % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.mean_curve.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", k ? " " : "", px(static_cast<double>(k)), py(s.mean_curve[k]));
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" fill=\"%s\">%s</text>\n", w - right + 10,
                  top + 16.0 * (i + 1), color, s.name.c_str());
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ipcs
