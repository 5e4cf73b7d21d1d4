#pragma once

// Plain-text run configuration: one `key = value` per line, `#` starts a
// comment. Keys are grouped by prefix (data., net., train., refine., sim.,
// bench.). Command-line overrides use the same keys.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ipcs/errors.hpp"
#include "ipcs/eval.hpp"
#include "ipcs/refine.hpp"
#include "ipcs/scene.hpp"
#include "ipcs/segnet.hpp"

namespace ipcs {

struct RunConfig {
  BenchmarkSpec data;
  SegNetConfig net;
  TrainConfig train;
  std::string regime = "sgd";
  RefineConfig refine = RefineConfig::sgd_regime();
  ProtocolConfig protocol;
  std::vector<std::uint64_t> seeds{0};
  std::size_t threads = 0;  // 0 = hardware concurrency
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ParseError("'" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ParseError("'" + key + "': expected a boolean, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ParseError("'" + key + "': empty list");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T, typename Get>
Setter number(Get get) {
  return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<T>(k, v); };
}

template <typename Get>
Setter boolean(Get get) {
  return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data.num_train", number<std::size_t>([](RunConfig& c) -> auto& { return c.data.num_train; })},
      {"data.num_test", number<std::size_t>([](RunConfig& c) -> auto& { return c.data.num_test; })},
      {"data.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.data.seed; })},
      {"data.grid_cell", number<double>([](RunConfig& c) -> auto& { return c.data.grid_cell; })},
      {"data.max_points", number<std::size_t>([](RunConfig& c) -> auto& { return c.data.max_points; })},
      {"data.points_per_m2", number<float>([](RunConfig& c) -> auto& { return c.data.scene.points_per_m2; })},
      {"data.color_jitter_sigma", number<float>([](RunConfig& c) -> auto& { return c.data.test_shift.color_jitter_sigma; })},
      {"data.scale_min", number<float>([](RunConfig& c) -> auto& { return c.data.test_shift.scale_min; })},
      {"data.scale_max", number<float>([](RunConfig& c) -> auto& { return c.data.test_shift.scale_max; })},
      {"data.dropout", number<float>([](RunConfig& c) -> auto& { return c.data.test_shift.dropout; })},
      {"net.hidden_dims",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.net.hidden_dims = parse_list<std::size_t>(k, v); }},
      {"net.knn_k", number<std::size_t>([](RunConfig& c) -> auto& { return c.net.knn_k; })},
      {"net.aggregate_after", number<std::size_t>([](RunConfig& c) -> auto& { return c.net.aggregate_after; })},
      {"train.epochs", number<std::size_t>([](RunConfig& c) -> auto& { return c.train.epochs; })},
      {"train.batch_size", number<std::size_t>([](RunConfig& c) -> auto& { return c.train.batch_size; })},
      {"train.learning_rate", number<float>([](RunConfig& c) -> auto& { return c.train.optimizer.learning_rate; })},
      {"train.bn_momentum", number<float>([](RunConfig& c) -> auto& { return c.train.bn_momentum; })},
      {"refine.regime",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "sgd") c.refine = RefineConfig::sgd_regime();
         else if (v == "adam") c.refine = RefineConfig::adam_regime();
         else throw ParseError("'" + k + "': expected 'sgd' or 'adam', got '" + v + "'");
         c.regime = v;
       }},
      {"refine.lambda", number<float>([](RunConfig& c) -> auto& { return c.refine.lambda; })},
      {"refine.delta_plus", number<float>([](RunConfig& c) -> auto& { return c.refine.delta_plus; })},
      {"refine.delta_minus", number<float>([](RunConfig& c) -> auto& { return c.refine.delta_minus; })},
      {"refine.delta_probe", number<float>([](RunConfig& c) -> auto& { return c.refine.delta_probe; })},
      {"refine.warmup_rounds", number<std::size_t>([](RunConfig& c) -> auto& { return c.refine.warmup_rounds; })},
      {"refine.rounds_per_interaction",
       number<std::size_t>([](RunConfig& c) -> auto& { return c.refine.rounds_per_interaction; })},
      {"refine.warmup_lr", number<float>([](RunConfig& c) -> auto& { return c.refine.warmup_lr; })},
      {"refine.testtime_lr", number<float>([](RunConfig& c) -> auto& { return c.refine.testtime_lr; })},
      {"refine.weight_decay", number<float>([](RunConfig& c) -> auto& { return c.refine.optimizer.weight_decay; })},
      {"refine.update_after_last_round", boolean([](RunConfig& c) -> auto& { return c.refine.update_after_last_round; })},
      {"refine.no_stabilization", boolean([](RunConfig& c) -> auto& { return c.refine.ablation.no_stabilization; })},
      {"refine.no_filtering", boolean([](RunConfig& c) -> auto& { return c.refine.ablation.no_filtering; })},
      {"refine.no_warmup", boolean([](RunConfig& c) -> auto& { return c.refine.ablation.no_warmup; })},
      {"refine.keep_ga", boolean([](RunConfig& c) -> auto& { return c.refine.ablation.keep_ga; })},
      {"refine.ia_baseline", boolean([](RunConfig& c) -> auto& { return c.refine.ablation.ia_baseline; })},
      {"sim.dbscan_eps", number<double>([](RunConfig& c) -> auto& { return c.protocol.sim.dbscan_eps; })},
      {"sim.dbscan_min_pts", number<std::size_t>([](RunConfig& c) -> auto& { return c.protocol.sim.dbscan_min_pts; })},
      {"sim.kde_bandwidth", number<double>([](RunConfig& c) -> auto& { return c.protocol.sim.kde_bandwidth; })},
      {"sim.clicks_per_round", number<std::size_t>([](RunConfig& c) -> auto& { return c.protocol.sim.clicks_per_round; })},
      {"sim.min_region_size", number<std::size_t>([](RunConfig& c) -> auto& { return c.protocol.sim.min_region_size; })},
      {"sim.rng_seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.protocol.sim.rng_seed; })},
      {"sim.weighted_sampling", boolean([](RunConfig& c) -> auto& { return c.protocol.sim.weighted_sampling; })},
      {"bench.budget", number<std::size_t>([](RunConfig& c) -> auto& { return c.protocol.budget; })},
      {"bench.targets",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.protocol.targets = parse_list<double>(k, v); }},
      {"bench.run_full_budget", boolean([](RunConfig& c) -> auto& { return c.protocol.run_full_budget; })},
      {"bench.seeds",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.seeds = parse_list<std::uint64_t>(k, v); }},
      {"bench.threads", number<std::size_t>([](RunConfig& c) -> auto& { return c.threads; })},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::setters()) keys.push_back(k);
  return keys;
}

inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& table = detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ParseError("unknown config key '" + key + "'");
  it->second(c, key, value);
}

/// Applies a single "key=value" string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ParseError("expected key=value, got '" + assignment + "'");
  apply_setting(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(RunConfig& c, std::istream& is, const std::string& source = "config") {
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto text = detail::trim(line);
    if (text.empty()) continue;
    try {
      apply_override(c, text);
    } catch (const ParseError& e) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open config file '" + path + "'");
  apply_config_text(c, is, path);
}

/// Checks cross-field constraints after all settings are applied.
inline void validate(const RunConfig& c) {
  validate(c.net);
  validate(c.refine);
  validate(c.protocol.sim);
  if (c.protocol.budget < 1) throw ContractError("bench.budget must be >= 1");
  if (c.seeds.empty()) throw ContractError("bench.seeds must not be empty");
}

}  // namespace ipcs
