#pragma once

// Test-time refinement of a segmentation network from corrective clicks.
//
// A session is warmed up once (self-training against the running-statistics
// prediction after switching BN to instance statistics), then each refine
// call records new clicks, re-evaluates the per-point filtering scores with a
// throwaway probe step, and runs T optimization rounds on
//
//   L = E_correction + lambda * E_stabilization
//
// with the filtering scores updated between rounds from entropy changes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ipcs/cloud.hpp"
#include "ipcs/encoding.hpp"
#include "ipcs/errors.hpp"
#include "ipcs/interaction.hpp"
#include "ipcs/optim.hpp"
#include "ipcs/segnet.hpp"
#include "ipcs/tensor.hpp"

namespace ipcs {

struct AblationFlags {
  bool no_stabilization = false;
  bool no_filtering = false;
  bool no_warmup = false;
  bool keep_ga = false;
  bool ia_baseline = false;

  bool operator==(const AblationFlags&) const = default;
};

struct RefineConfig {
  float lambda = 100.0f;
  float delta_plus = 0.03f;
  float delta_minus = 0.03f;
  float delta_probe = 0.03f;
  std::size_t warmup_rounds = 5;
  std::size_t rounds_per_interaction = 3;
  float warmup_lr = 5e-3f;
  float testtime_lr = 1e-3f;
  /// Optimizer kind, momentum/betas and weight decay; the learning rate and
  /// GA switch are set per phase.
  OptimizerConfig optimizer = OptimizerConfig::sgd(1e-3f, 0.9f, 0.01f);
  /// Also apply the entropy-change score update after the last round.
  bool update_after_last_round = false;
  AblationFlags ablation;

  /// SGD regime: momentum 0.9, weight decay 0.01, 5 warm-up / 3 test-time rounds.
  static RefineConfig sgd_regime() { return {}; }

  /// Adam regime: betas (0.9, 0.999), weight decay 0.5, 10 warm-up / 5
  /// test-time rounds, asymmetric thresholds.
  static RefineConfig adam_regime() {
    RefineConfig c;
    c.delta_plus = 0.1f;
    c.delta_minus = 0.01f;
    c.delta_probe = 0.1f;
    c.warmup_rounds = 10;
    c.rounds_per_interaction = 5;
    c.optimizer = OptimizerConfig::adam(1e-3f, 0.9f, 0.999f, 0.5f);
    return c;
  }
};

inline void validate(const RefineConfig& c) {
  if (c.lambda < 0.0f) throw ContractError("refine: lambda must be >= 0");
  if (c.delta_plus < 0.0f || c.delta_minus < 0.0f || c.delta_probe < 0.0f)
    throw ContractError("refine: thresholds must be >= 0");
  if (c.rounds_per_interaction < 1) throw ContractError("refine: rounds_per_interaction must be >= 1");
  if (!(c.warmup_lr > 0.0f) || !(c.testtime_lr > 0.0f)) throw ContractError("refine: learning rates must be positive");
}

/// Optimizer settings for a phase: the base config with the phase learning
/// rate and GA switch.
inline OptimizerConfig phase_optimizer(const RefineConfig& c, float lr, bool ga) {
  OptimizerConfig o = c.optimizer;
  o.learning_rate = lr;
  o.ga_enabled = ga;
  return o;
}

struct RoundTrace {
  int interaction = 0;
  int round = 0;
  double loss = 0.0;
  double correction = 0.0;
  double stabilization = 0.0;
  std::size_t active_scores = 0;  // points with s_i = 1 when the loss was formed
};

struct RefinementSession {
  LabeledCloud cloud;
  NeighborTable neighbors;
  NetworkParams params;
  RefineConfig config;
  BnMode bn_mode = BnMode::RunningStats;
  bool warmed = false;
  /// Argmax of the running-statistics prediction taken before warm-up.
  std::vector<int> pseudo_labels;
  /// Prediction right after warm-up; the static pseudo mask of the IA baseline.
  std::vector<int> initial_labels;
  SegmentationState seg;
  std::vector<std::uint8_t> filter_scores;
  /// Current click set; a repeated click on a point replaces its record.
  std::vector<InteractionRecord> clicks;
  /// Every click in submission order, for export and replay.
  std::vector<InteractionRecord> click_log;
  std::vector<float> prev_entropies;
  int round_counter = 0;
  int interaction_counter = 0;
  OptimizerState ga_state;  // persistent optimizer state, used only with keep_ga
  std::vector<RoundTrace> history;
};

/// Builds a session around a pretrained network. The initial prediction uses
/// the stored running statistics.
inline RefinementSession make_session(LabeledCloud cloud, NetworkParams params, RefineConfig config) {
  validate(config);
  validate(cloud, params.config.num_classes);
  RefinementSession s;
  s.neighbors = knn_index(cloud.positions, params.config.knn_k);
  s.cloud = std::move(cloud);
  s.params = std::move(params);
  s.config = std::move(config);
  s.seg = forward(s.cloud, s.neighbors, s.params, s.bn_mode);
  s.filter_scores.assign(s.cloud.size(), 1);
  s.prev_entropies = s.seg.entropies;
  return s;
}

inline void reinfer(RefinementSession& s) { s.seg = forward(s.cloud, s.neighbors, s.params, s.bn_mode); }

// ---------------------------------------------------------------------------
// Energies

/// Raw sum over clicked points of -sum_m q log p. An empty click list yields
/// a zero constant.
inline Var correction_energy(Tape* tape, const Var& probs, std::span<const InteractionRecord> clicks) {
  if (clicks.empty()) return make_var(Tensor::scalar(0.0f));
  const std::size_t n = probs->value.rows(), m = probs->value.cols();
  Tensor targets({n, m});
  std::vector<float> mask(n, 0.0f);
  for (const auto& c : clicks) {
    targets(c.point_index, static_cast<std::size_t>(c.corrected_label)) = 1.0f;
    mask[c.point_index] = 1.0f;
  }
  return masked_weighted_cross_entropy(tape, probs, targets, mask, Reduction::Sum);
}

inline double correction_energy(const SegmentationState& seg, std::span<const InteractionRecord> clicks) {
  if (clicks.empty()) throw EmptySupportError("correction_energy: no clicks");
  return correction_energy(nullptr, make_var(seg.probs), clicks)->value.item();
}

/// (1/N) sum_i s_i H(p_i), with H the Shannon entropy.
inline Var stabilization_energy(Tape* tape, const Var& probs, std::span<const std::uint8_t> scores) {
  const std::size_t n = probs->value.rows();
  if (scores.size() != n) throw DimensionError("stabilization_energy: score length mismatch");
  std::vector<float> w(scores.begin(), scores.end());
  return weighted_sum(tape, row_entropy(tape, probs), w, 1.0 / static_cast<double>(n));
}

inline double stabilization_energy(const SegmentationState& seg, std::span<const std::uint8_t> scores) {
  return stabilization_energy(nullptr, make_var(seg.probs), scores)->value.item();
}

struct LossTerms {
  Var loss;
  double correction = 0.0;
  double stabilization = 0.0;
};

/// E_correction + lambda * E_stabilization, honoring the ablation flags:
/// no_stabilization drops the second term, no_filtering treats every s_i as 1.
inline LossTerms test_time_loss(Tape* tape, const Var& probs, std::span<const InteractionRecord> clicks,
                                std::span<const std::uint8_t> scores, const RefineConfig& config) {
  LossTerms t;
  const Var corr = correction_energy(tape, probs, clicks);
  t.correction = corr->value.item();
  if (config.ablation.no_stabilization) {
    t.loss = corr;
    return t;
  }
  std::vector<std::uint8_t> ones;
  if (config.ablation.no_filtering) {
    ones.assign(scores.size(), 1);
    scores = ones;
  }
  const Var stab = stabilization_energy(tape, probs, scores);
  t.stabilization = stab->value.item();
  t.loss = add_scaled(tape, corr, stab, config.lambda);
  return t;
}

// ---------------------------------------------------------------------------
// Filtering scores

/// Probe threshold rule: s_i = 0 when the entropy change reaches delta,
/// otherwise 1.
inline std::vector<std::uint8_t> probe_scores(std::span<const float> delta_entropy, double delta) {
  std::vector<std::uint8_t> s(delta_entropy.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = delta_entropy[i] >= delta ? 0 : 1;
  return s;
}

/// Between-round rule: s_i becomes 1 when entropy fell by more than
/// delta_minus, 0 when it rose by more than delta_plus, else stays.
inline void update_filter_scores(std::vector<std::uint8_t>& scores, std::span<const float> prev_entropies,
                                 std::span<const float> new_entropies, double delta_plus, double delta_minus) {
  if (prev_entropies.size() != scores.size() || new_entropies.size() != scores.size())
    throw DimensionError("update_filter_scores: length mismatch");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = static_cast<double>(new_entropies[i]) - prev_entropies[i];
    if (d < -delta_minus) scores[i] = 1;
    else if (d > delta_plus) scores[i] = 0;
  }
}

/// Scores from a throwaway optimization step on a copy of the network: the
/// copy takes one step on the full test-time loss with every s_i = 1, and
/// points whose entropy rises by at least delta_probe are filtered out. The
/// session itself is not modified.
inline std::vector<std::uint8_t> evaluate_filter_scores(const RefinementSession& s) {
  if (s.clicks.empty()) throw StateError("evaluate_filter_scores: no clicks recorded");
  NetworkParams probe = s.params;
  OptimizerState state;
  const auto opt = phase_optimizer(s.config, s.config.testtime_lr, true);
  const std::vector<std::uint8_t> ones(s.cloud.size(), 1);

  Tape tape;
  const auto fw = forward_graph(&tape, s.cloud, s.neighbors, probe, s.bn_mode);
  RefineConfig cfg = s.config;
  cfg.ablation.no_filtering = false;
  const auto terms = test_time_loss(&tape, fw.probs, s.clicks, ones, cfg);
  tape.backward(terms.loss);
  step(probe.learnable(), opt, state);

  const auto before = row_entropy(nullptr, fw.probs)->value;
  const auto after = forward(s.cloud, s.neighbors, probe, s.bn_mode);
  std::vector<float> delta(before.numel());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = after.entropies[i] - before[i];
  return probe_scores(delta, s.config.delta_probe);
}

// ---------------------------------------------------------------------------
// Session operations

/// Warm-up: snapshot the running-statistics prediction as pseudo labels,
/// switch BN to instance statistics, then minimize -(1/N) sum q_hat log p for
/// warmup_rounds steps with the full (GA-enabled) optimizer.
inline void warm_up(RefinementSession& s) {
  if (s.warmed) throw StateError("warm_up: session already warmed up");
  if (!s.clicks.empty()) throw StateError("warm_up: session already has clicks");
  s.bn_mode = BnMode::RunningStats;
  reinfer(s);
  s.pseudo_labels = s.seg.labels;
  s.bn_mode = BnMode::InstanceStats;

  const std::size_t rounds = s.config.ablation.no_warmup ? 0 : s.config.warmup_rounds;
  if (rounds > 0) {
    const Tensor targets = one_hot(s.pseudo_labels, s.params.config.num_classes);
    const std::vector<float> mask(s.cloud.size(), 1.0f);
    const auto learnable = s.params.learnable();
    const auto opt = phase_optimizer(s.config, s.config.warmup_lr, true);
    OptimizerState state;
    for (std::size_t r = 0; r < rounds; ++r) {
      Tape tape;
      s.params.zero_grad();
      const auto fw = forward_graph(&tape, s.cloud, s.neighbors, s.params, s.bn_mode);
      const auto loss = masked_weighted_cross_entropy(&tape, fw.probs, targets, mask, Reduction::MeanRows);
      tape.backward(loss);
      step(learnable, opt, state);
    }
  }
  reinfer(s);
  s.params.zero_grad();
  s.initial_labels = s.seg.labels;
  s.prev_entropies = s.seg.entropies;
  s.warmed = true;
}

struct RefineResult {
  SegmentationState seg;
  std::vector<RoundTrace> trace;
  std::vector<std::size_t> changed;
  std::vector<std::string> warnings;
};

/// One message per click that names a point outside the cloud or a class
/// outside [0, M).
inline std::vector<std::string> click_errors(const RefinementSession& s, std::span<const InteractionRecord> clicks) {
  std::vector<std::string> errors;
  const auto m = static_cast<int>(s.params.config.num_classes);
  for (std::size_t k = 0; k < clicks.size(); ++k) {
    const auto& c = clicks[k];
    if (c.point_index >= s.cloud.size())
      errors.push_back("click " + std::to_string(k) + ": index " + std::to_string(c.point_index) + " out of range [0, " +
                       std::to_string(s.cloud.size()) + ")");
    if (c.corrected_label < 0 || c.corrected_label >= m)
      errors.push_back("click " + std::to_string(k) + ": label " + std::to_string(c.corrected_label) +
                       " out of range [0, " + std::to_string(m) + ")");
  }
  return errors;
}

/// Validates clicks and merges them into the session; a click on an already
/// clicked point replaces the earlier record. Returns warnings for clicks
/// that agree with the current prediction.
inline std::vector<std::string> record_clicks(RefinementSession& s, std::span<const InteractionRecord> clicks) {
  const auto errors = click_errors(s, clicks);
  if (!errors.empty()) {
    std::string msg = "invalid clicks:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw ValidationError(msg);
  }
  std::vector<std::string> warnings;
  for (auto c : clicks) {
    c.round = s.interaction_counter;
    if (s.seg.labels[c.point_index] == c.corrected_label)
      warnings.push_back("click on point " + std::to_string(c.point_index) + " repeats its predicted class");
    s.click_log.push_back(c);
    auto it = std::find_if(s.clicks.begin(), s.clicks.end(),
                           [&](const InteractionRecord& r) { return r.point_index == c.point_index; });
    if (it != s.clicks.end()) *it = c;
    else s.clicks.push_back(c);
  }
  return warnings;
}

/// Runs T optimization rounds on the test-time loss with the current scores.
/// Exposed separately from refine so that the round loop can be exercised
/// without clicks.
inline std::vector<RoundTrace> run_refinement_rounds(RefinementSession& s) {
  const auto& cfg = s.config;
  const auto learnable = s.params.learnable();
  const auto opt = phase_optimizer(cfg, cfg.testtime_lr, cfg.ablation.keep_ga);
  OptimizerState fresh;
  OptimizerState& state = cfg.ablation.keep_ga ? s.ga_state : fresh;
  const bool filtering = !cfg.ablation.no_filtering && !cfg.ablation.no_stabilization;
  std::vector<RoundTrace> trace;
  const std::size_t rounds = cfg.rounds_per_interaction;
  for (std::size_t t = 0; t < rounds; ++t) {
    Tape tape;
    s.params.zero_grad();
    const auto fw = forward_graph(&tape, s.cloud, s.neighbors, s.params, s.bn_mode);
    if (t > 0) {
      // This forward is the re-inference after the previous round's step.
      s.seg = make_state(fw);
      if (filtering)
        update_filter_scores(s.filter_scores, s.prev_entropies, s.seg.entropies, cfg.delta_plus, cfg.delta_minus);
    }
    s.prev_entropies = s.seg.entropies;
    const auto terms = test_time_loss(&tape, fw.probs, s.clicks, s.filter_scores, cfg);
    RoundTrace rt;
    rt.interaction = s.interaction_counter;
    rt.round = s.round_counter++;
    rt.loss = terms.loss->value.item();
    rt.correction = terms.correction;
    rt.stabilization = terms.stabilization;
    rt.active_scores = static_cast<std::size_t>(std::count(s.filter_scores.begin(), s.filter_scores.end(), 1));
    trace.push_back(rt);
    if (terms.loss->requires_grad) tape.backward(terms.loss);
    step(learnable, opt, state);
  }
  reinfer(s);
  if (filtering && cfg.update_after_last_round)
    update_filter_scores(s.filter_scores, s.prev_entropies, s.seg.entropies, cfg.delta_plus, cfg.delta_minus);
  s.prev_entropies = s.seg.entropies;
  s.params.zero_grad();
  return trace;
}

inline RefineResult ia_baseline_refine(RefinementSession& s, std::span<const InteractionRecord> new_clicks);

/// One interaction: record clicks, reset the filtering scores with the probe
/// step, then run the optimization rounds.
inline RefineResult refine(RefinementSession& s, std::span<const InteractionRecord> new_clicks) {
  if (s.config.ablation.ia_baseline) return ia_baseline_refine(s, new_clicks);
  if (!s.warmed) throw StateError("refine: call warm_up first");
  RefineResult result;
  result.warnings = record_clicks(s, new_clicks);
  if (s.clicks.empty()) throw ContractError("refine: no clicks recorded");
  const auto before = s.seg.labels;

  if (s.config.ablation.no_filtering || s.config.ablation.no_stabilization) {
    s.filter_scores.assign(s.cloud.size(), 1);
  } else {
    s.filter_scores = evaluate_filter_scores(s);
  }
  result.trace = run_refinement_rounds(s);
  ++s.interaction_counter;
  s.history.insert(s.history.end(), result.trace.begin(), result.trace.end());
  for (std::size_t i = 0; i < before.size(); ++i)
    if (before[i] != s.seg.labels[i]) result.changed.push_back(i);
  result.seg = s.seg;
  return result;
}

/// Static pseudo-mask adaptation: cross-entropy on the clicked points plus
/// lambda times the mean cross-entropy of every other point against the
/// fixed post-warm-up prediction. No entropy term, no filtering.
inline RefineResult ia_baseline_refine(RefinementSession& s, std::span<const InteractionRecord> new_clicks) {
  if (!s.warmed) throw StateError("refine: call warm_up first");
  RefineResult result;
  result.warnings = record_clicks(s, new_clicks);
  if (s.clicks.empty()) throw ContractError("refine: no clicks recorded");
  const auto before = s.seg.labels;
  const std::size_t n = s.cloud.size();
  const auto& cfg = s.config;

  Tensor pseudo = one_hot(s.initial_labels, s.params.config.num_classes);
  std::vector<float> unclicked(n, 1.0f);
  for (const auto& c : s.clicks) unclicked[c.point_index] = 0.0f;
  const bool any_unclicked = std::any_of(unclicked.begin(), unclicked.end(), [](float v) { return v != 0.0f; });

  const auto learnable = s.params.learnable();
  const auto opt = phase_optimizer(cfg, cfg.testtime_lr, cfg.ablation.keep_ga);
  OptimizerState fresh;
  OptimizerState& state = cfg.ablation.keep_ga ? s.ga_state : fresh;
  for (std::size_t t = 0; t < cfg.rounds_per_interaction; ++t) {
    Tape tape;
    s.params.zero_grad();
    const auto fw = forward_graph(&tape, s.cloud, s.neighbors, s.params, s.bn_mode);
    const Var corr = correction_energy(&tape, fw.probs, s.clicks);
    Var loss = corr;
    double pseudo_term = 0.0;
    if (any_unclicked) {
      const Var ce = masked_weighted_cross_entropy(&tape, fw.probs, pseudo, unclicked, Reduction::MeanRows);
      pseudo_term = ce->value.item();
      loss = add_scaled(&tape, corr, ce, cfg.lambda);
    }
    RoundTrace rt{s.interaction_counter, s.round_counter++, loss->value.item(), corr->value.item(), pseudo_term, 0};
    result.trace.push_back(rt);
    tape.backward(loss);
    step(learnable, opt, state);
  }
  reinfer(s);
  s.params.zero_grad();
  ++s.interaction_counter;
  s.history.insert(s.history.end(), result.trace.begin(), result.trace.end());
  for (std::size_t i = 0; i < before.size(); ++i)
    if (before[i] != s.seg.labels[i]) result.changed.push_back(i);
  result.seg = s.seg;
  return result;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const OptimizerConfig& o) {
  return {{"kind", o.kind == OptimizerKind::SGD ? "sgd" : "adam"},
          {"learning_rate", o.learning_rate},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"weight_decay", o.weight_decay},
          {"epsilon", o.epsilon},
          {"ga_enabled", o.ga_enabled}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j, OptimizerConfig o = {}) {
  if (j.contains("kind")) {
    const std::string k = j.at("kind");
    if (k != "sgd" && k != "adam") throw ValidationError("optimizer kind must be 'sgd' or 'adam'");
    o.kind = k == "sgd" ? OptimizerKind::SGD : OptimizerKind::Adam;
  }
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.momentum = j.value("momentum", o.momentum);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.epsilon = j.value("epsilon", o.epsilon);
  o.ga_enabled = j.value("ga_enabled", o.ga_enabled);
  return o;
}

inline nlohmann::json to_json(const RefineConfig& c) {
  return {{"lambda", c.lambda},
          {"delta_plus", c.delta_plus},
          {"delta_minus", c.delta_minus},
          {"delta_probe", c.delta_probe},
          {"warmup_rounds", c.warmup_rounds},
          {"rounds_per_interaction", c.rounds_per_interaction},
          {"warmup_lr", c.warmup_lr},
          {"testtime_lr", c.testtime_lr},
          {"update_after_last_round", c.update_after_last_round},
          {"optimizer", to_json(c.optimizer)},
          {"ablation",
           {{"no_stabilization", c.ablation.no_stabilization},
            {"no_filtering", c.ablation.no_filtering},
            {"no_warmup", c.ablation.no_warmup},
            {"keep_ga", c.ablation.keep_ga},
            {"ia_baseline", c.ablation.ia_baseline}}}};
}

/// Fields absent from `j` keep the values of `base`.
inline RefineConfig refine_config_from_json(const nlohmann::json& j, RefineConfig c = {}) {
  c.lambda = j.value("lambda", c.lambda);
  c.delta_plus = j.value("delta_plus", c.delta_plus);
  c.delta_minus = j.value("delta_minus", c.delta_minus);
  c.delta_probe = j.value("delta_probe", c.delta_probe);
  c.warmup_rounds = j.value("warmup_rounds", c.warmup_rounds);
  c.rounds_per_interaction = j.value("rounds_per_interaction", c.rounds_per_interaction);
  c.warmup_lr = j.value("warmup_lr", c.warmup_lr);
  c.testtime_lr = j.value("testtime_lr", c.testtime_lr);
  c.update_after_last_round = j.value("update_after_last_round", c.update_after_last_round);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"), c.optimizer);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation.no_stabilization = a.value("no_stabilization", c.ablation.no_stabilization);
    c.ablation.no_filtering = a.value("no_filtering", c.ablation.no_filtering);
    c.ablation.no_warmup = a.value("no_warmup", c.ablation.no_warmup);
    c.ablation.keep_ga = a.value("keep_ga", c.ablation.keep_ga);
    c.ablation.ia_baseline = a.value("ia_baseline", c.ablation.ia_baseline);
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const InteractionRecord& r) {
  return {{"index", r.point_index}, {"label", r.corrected_label}, {"round", r.round}, {"source", to_string(r.source)}};
}

inline InteractionRecord click_from_json(const nlohmann::json& j) {
  InteractionRecord r;
  const auto idx = j.at("index").get<long long>();
  if (idx < 0) throw ValidationError("click index must be non-negative");
  r.point_index = static_cast<std::size_t>(idx);
  r.corrected_label = j.at("label").get<int>();
  r.round = j.value("round", 0);
  r.source = j.value("source", std::string("human")) == "simulator" ? ClickSource::Simulator : ClickSource::Human;
  return r;
}

inline nlohmann::json to_json(const RoundTrace& t) {
  return {{"interaction", t.interaction},
          {"round", t.round},
          {"loss", t.loss},
          {"correction", t.correction},
          {"stabilization", t.stabilization},
          {"active_scores", t.active_scores}};
}

inline std::string pack_labels(std::span<const int> labels) {
  std::vector<std::int32_t> v(labels.begin(), labels.end());
  return pack_base64<std::int32_t>(v);
}

inline std::vector<int> unpack_labels(std::string_view text) {
  const auto v = unpack_base64<std::int32_t>(text);
  return {v.begin(), v.end()};
}

/// Session export: config, click log, energy trace and label arrays
/// (base64 of little-endian int32).
inline nlohmann::json export_session(const RefinementSession& s) {
  nlohmann::json j;
  j["format"] = "ipcs-session";
  j["version"] = 1;
  j["scene"] = s.cloud.name;
  j["num_points"] = s.cloud.size();
  j["num_classes"] = s.params.config.num_classes;
  j["config"] = to_json(s.config);
  j["clicks"] = nlohmann::json::array();
  for (const auto& c : s.click_log) j["clicks"].push_back(to_json(c));
  j["trace"] = nlohmann::json::array();
  for (const auto& t : s.history) j["trace"].push_back(to_json(t));
  j["interactions"] = s.interaction_counter;
  j["initial_labels"] = pack_labels(s.initial_labels);
  j["labels"] = pack_labels(s.seg.labels);
  return j;
}

/// Rebuilds a session from an export: same config, warm-up, then the logged
/// clicks resubmitted interaction by interaction.
inline RefinementSession replay_session(LabeledCloud cloud, NetworkParams params, const nlohmann::json& exported) {
  if (exported.value("format", "") != "ipcs-session") throw ParseError("replay: not a session export");
  if (exported.at("num_points").get<std::size_t>() != cloud.size())
    throw ValidationError("replay: export has " + std::to_string(exported.at("num_points").get<std::size_t>()) +
                          " points, cloud has " + std::to_string(cloud.size()));
  auto s = make_session(std::move(cloud), std::move(params), refine_config_from_json(exported.at("config")));
  warm_up(s);
  std::vector<InteractionRecord> batch;
  int current = 0;
  auto flush = [&] {
    if (!batch.empty()) refine(s, batch);
    batch.clear();
  };
  for (const auto& jc : exported.at("clicks")) {
    const auto c = click_from_json(jc);
    if (c.round != current) {
      flush();
      current = c.round;
    }
    batch.push_back(c);
  }
  flush();
  return s;
}

}  // namespace ipcs
