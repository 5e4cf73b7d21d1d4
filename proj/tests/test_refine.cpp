#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "ipcs/interaction_sim.hpp"
#include "ipcs/refine.hpp"
#include "ipcs/scene.hpp"

using namespace ipcs;

namespace {

constexpr double kExact = 1e-6;

SegmentationState state_from(std::size_t rows, std::size_t cols, std::vector<float> probs) {
  SegmentationState s;
  s.probs = Tensor::matrix(rows, cols, std::move(probs));
  s.labels = argmax_rows(s.probs);
  s.entropies = row_entropy(nullptr, make_var(s.probs))->value.storage();
  return s;
}

InteractionRecord click(std::size_t i, int label) { return {i, label, 0, ClickSource::Human}; }

LabeledCloud room(std::uint64_t seed, bool shifted) {
  SceneSpec s;
  s.extents = {2.2f, 2.0f, 1.8f};
  s.points_per_m2 = 110.0f;
  s.seed = seed;
  if (shifted) s.shift = DomainShift::default_test();
  return grid_subsample(generate_scene(s, "room" + std::to_string(seed)), 0.05);
}

// A small backbone trained once for the whole suite.
const NetworkParams& backbone() {
  static const NetworkParams params = [] {
    SegNetConfig net;
    net.hidden_dims = {16, 16, 32};
    net.knn_k = 8;
    TrainConfig tc;
    tc.epochs = 25;
    tc.batch_size = 2;
    std::vector<LabeledCloud> train;
    for (std::uint64_t s = 0; s < 4; ++s) train.push_back(room(100 + s, false));
    return train_supervised(train, net, tc).params;
  }();
  return params;
}

const LabeledCloud& test_room() {
  static const LabeledCloud cloud = room(900, true);
  return cloud;
}

RefinementSession warmed(RefineConfig cfg = RefineConfig::sgd_regime(), const LabeledCloud* cloud = nullptr) {
  auto s = make_session(cloud ? *cloud : test_room(), backbone(), cfg);
  warm_up(s);
  return s;
}

// Simulator clicks against the ground truth of the test room.
std::vector<InteractionRecord> sim_clicks(const RefinementSession& s, std::size_t count, int round = 0) {
  SimConfig sc;
  sc.dbscan_eps = 0.15;
  sc.kde_bandwidth = 0.15;
  sc.dbscan_min_pts = 4;
  sc.min_region_size = 5;
  sc.clicks_per_round = count;
  std::unordered_set<std::size_t> excluded;
  for (const auto& c : s.clicks) excluded.insert(c.point_index);
  return next_clicks({s.seg.labels, *s.cloud.labels, s.cloud.positions}, sc, round, excluded);
}

}  // namespace

// ---------------------------------------------------------------------------
// Correction energy

TEST(CorrectionEnergy, ZeroWhenClickedClassesAreCertain) {
  const auto s = state_from(2, 3, {0, 1, 0, 1, 0, 0});
  const std::vector<InteractionRecord> c{click(0, 1), click(1, 0)};
  EXPECT_NEAR(correction_energy(s, c), 0.0, kExact);
}

TEST(CorrectionEnergy, UniformRowGivesLogM) {
  const auto s = state_from(1, 4, {0.25f, 0.25f, 0.25f, 0.25f});
  const std::vector<InteractionRecord> c{click(0, 2)};
  EXPECT_NEAR(correction_energy(s, c), std::log(4.0), kExact);
}

TEST(CorrectionEnergy, HandValueAndLinearity) {
  const auto s = state_from(3, 3, {0.7f, 0.2f, 0.1f, 0.7f, 0.2f, 0.1f, 0.1f, 0.1f, 0.8f});
  const std::vector<InteractionRecord> one{click(0, 1)};
  const std::vector<InteractionRecord> two{click(0, 1), click(1, 1)};
  EXPECT_NEAR(correction_energy(s, one), -std::log(0.2), kExact);
  EXPECT_NEAR(correction_energy(s, two), 2.0 * correction_energy(s, one), kExact);
  const std::vector<InteractionRecord> mixed{click(0, 0), click(2, 1)};
  EXPECT_NEAR(correction_energy(s, mixed), -std::log(0.7) - std::log(0.1), kExact);
}

TEST(CorrectionEnergy, EmptyClickSetIsEmptySupport) {
  const auto s = state_from(1, 2, {0.5f, 0.5f});
  EXPECT_THROW(correction_energy(s, std::vector<InteractionRecord>{}), EmptySupportError);
}

// ---------------------------------------------------------------------------
// Stabilization energy

TEST(StabilizationEnergy, OneHotRowsAreZero) {
  const auto s = state_from(2, 3, {1, 0, 0, 0, 0, 1});
  EXPECT_NEAR(stabilization_energy(s, std::vector<std::uint8_t>{1, 1}), 0.0, kExact);
}

TEST(StabilizationEnergy, AllScoresZeroIsZero) {
  const auto s = state_from(2, 2, {0.5f, 0.5f, 0.3f, 0.7f});
  EXPECT_EQ(stabilization_energy(s, std::vector<std::uint8_t>{0, 0}), 0.0);
}

TEST(StabilizationEnergy, AveragesOverAllPointsNotJustSelected) {
  const auto s = state_from(2, 5, {0.2f, 0.2f, 0.2f, 0.2f, 0.2f, 0.9f, 0.025f, 0.025f, 0.025f, 0.025f});
  EXPECT_NEAR(stabilization_energy(s, std::vector<std::uint8_t>{1, 0}), 0.5 * std::log(5.0), kExact);
  const double h1 = -(0.9 * std::log(0.9) + 4 * 0.025 * std::log(0.025));
  EXPECT_NEAR(stabilization_energy(s, std::vector<std::uint8_t>{1, 1}), 0.5 * (std::log(5.0) + h1), kExact);
}

TEST(StabilizationEnergy, ScoreLengthMismatchThrows) {
  const auto s = state_from(2, 2, {0.5f, 0.5f, 0.5f, 0.5f});
  EXPECT_THROW(stabilization_energy(s, std::vector<std::uint8_t>{1}), DimensionError);
}

// ---------------------------------------------------------------------------
// Combined loss

TEST(TestTimeLoss, CombinesTermsWithLambdaAndHonorsAblations) {
  const auto s = state_from(2, 2, {0.6f, 0.4f, 0.5f, 0.5f});
  const std::vector<InteractionRecord> c{click(0, 1)};
  const std::vector<std::uint8_t> scores{0, 1};
  RefineConfig cfg;
  cfg.lambda = 100.0f;
  const double corr = -std::log(0.4);
  const double stab = 0.5 * std::log(2.0);
  const double stab_all = 0.5 * (-(0.6 * std::log(0.6) + 0.4 * std::log(0.4)) + std::log(2.0));

  auto value = [&](const RefineConfig& k) { return test_time_loss(nullptr, make_var(s.probs), c, scores, k).loss->value.item(); };
  EXPECT_NEAR(value(cfg), corr + 100.0 * stab, 1e-4);
  cfg.ablation.no_filtering = true;
  EXPECT_NEAR(value(cfg), corr + 100.0 * stab_all, 1e-4);
  cfg.ablation = {};
  cfg.ablation.no_stabilization = true;
  EXPECT_NEAR(value(cfg), corr, kExact);
  cfg.ablation = {};
  cfg.lambda = 0.0f;
  EXPECT_NEAR(value(cfg), corr, kExact);
}

// ---------------------------------------------------------------------------
// Filtering-score rules

class ScoreUpdateTable : public ::testing::TestWithParam<std::pair<float, float>> {};

TEST_P(ScoreUpdateTable, FollowsTheThreeCaseRule) {
  const auto [dplus, dminus] = GetParam();
  for (const float delta : {dplus, dminus}) {
    const std::vector<float> dE{-2 * delta, -delta / 2, 0.0f, delta / 2, 2 * delta};
    for (const std::uint8_t prior : {0, 1}) {
      std::vector<std::uint8_t> s(dE.size(), prior);
      const std::vector<float> prev(dE.size(), 1.0f);
      std::vector<float> next;
      for (const float d : dE) next.push_back(1.0f + d);
      update_filter_scores(s, prev, next, dplus, dminus);
      for (std::size_t i = 0; i < dE.size(); ++i) {
        const double d = static_cast<double>(next[i]) - prev[i];
        const std::uint8_t want = d < -dminus ? 1 : d > dplus ? 0 : prior;
        EXPECT_EQ(s[i], want) << "dE=" << dE[i] << " prior=" << int(prior);
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Regimes, ScoreUpdateTable,
                         ::testing::Values(std::make_pair(0.03f, 0.03f), std::make_pair(0.1f, 0.01f)));

TEST(ScoreUpdate, SymmetricTableLiteral) {
  // delta = 0.25 keeps every value exact in float.
  const std::vector<float> prev(5, 0.0f), next{-0.5f, -0.125f, 0.0f, 0.125f, 0.5f};
  std::vector<std::uint8_t> from0(5, 0), from1(5, 1);
  update_filter_scores(from0, prev, next, 0.25, 0.25);
  update_filter_scores(from1, prev, next, 0.25, 0.25);
  EXPECT_EQ(from0, (std::vector<std::uint8_t>{1, 0, 0, 0, 0}));
  EXPECT_EQ(from1, (std::vector<std::uint8_t>{1, 1, 1, 1, 0}));
}

TEST(ScoreUpdate, ExamplesAndBoundaries) {
  std::vector<std::uint8_t> s{0, 1, 0, 1};
  const std::vector<float> prev{0.5f, 0.5f, 0.5f, 0.5f};
  const std::vector<float> next{0.45f, 0.55f, 0.5f, 0.5f};
  update_filter_scores(s, prev, next, 0.03, 0.03);
  EXPECT_EQ(s, (std::vector<std::uint8_t>{1, 0, 0, 1}));
  // Exactly at a threshold nothing changes.
  std::vector<std::uint8_t> edge{0, 1};
  update_filter_scores(edge, std::vector<float>{0.0f, 0.0f}, std::vector<float>{-0.25f, 0.25f}, 0.25, 0.25);
  EXPECT_EQ(edge, (std::vector<std::uint8_t>{0, 1}));
  EXPECT_THROW(update_filter_scores(edge, std::vector<float>{0.0f}, std::vector<float>{0.0f, 0.0f}, 0.1, 0.1),
               DimensionError);
}

TEST(ProbeRule, TruthTable) {
  for (const float delta : {0.03f, 0.1f, 0.25f}) {
    const std::vector<float> dE{-2 * delta, -delta / 2, 0.0f, delta / 2, 2 * delta, delta};
    EXPECT_EQ(probe_scores(dE, delta), (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0})) << delta;
  }
}

// ---------------------------------------------------------------------------
// Probe step

TEST(Probe, InfiniteThresholdsGiveAllOnesOrAllZeros) {
  auto s = warmed();
  record_clicks(s, sim_clicks(s, 2));
  s.config.delta_probe = std::numeric_limits<float>::infinity();
  const auto ones = evaluate_filter_scores(s);
  EXPECT_EQ(std::count(ones.begin(), ones.end(), 1), static_cast<std::ptrdiff_t>(s.cloud.size()));
  s.config.delta_probe = -std::numeric_limits<float>::infinity();
  const auto zeros = evaluate_filter_scores(s);
  EXPECT_EQ(std::count(zeros.begin(), zeros.end(), 0), static_cast<std::ptrdiff_t>(s.cloud.size()));
}

TEST(Probe, RequiresClicks) {
  const auto s = warmed();
  EXPECT_THROW(evaluate_filter_scores(s), StateError);
}

TEST(Probe, MatchesAnExplicitCloneAndStep) {
  auto s = warmed();
  record_clicks(s, sim_clicks(s, 3));
  NetworkParams copy = s.params;
  OptimizerState fresh;
  Tape tape;
  const auto fw = forward_graph(&tape, s.cloud, s.neighbors, copy, s.bn_mode);
  const std::vector<std::uint8_t> ones(s.cloud.size(), 1);
  const auto loss = add_scaled(&tape, correction_energy(&tape, fw.probs, s.clicks),
                               stabilization_energy(&tape, fw.probs, ones), s.config.lambda);
  tape.backward(loss);
  auto opt = s.config.optimizer;
  opt.learning_rate = s.config.testtime_lr;
  opt.ga_enabled = true;
  step(copy.learnable(), opt, fresh);
  const auto after = forward(s.cloud, s.neighbors, copy, s.bn_mode);
  const auto before = row_entropy(nullptr, fw.probs)->value;
  std::vector<std::uint8_t> want(s.cloud.size());
  for (std::size_t i = 0; i < want.size(); ++i) want[i] = after.entropies[i] - before[i] >= s.config.delta_probe ? 0 : 1;
  EXPECT_EQ(evaluate_filter_scores(s), want);
}

TEST(Probe, LeavesTheSessionBitIdentical) {
  for (std::uint64_t k = 0; k < 10; ++k) {
    RefineConfig cfg = k % 2 ? RefineConfig::adam_regime() : RefineConfig::sgd_regime();
    const auto cloud = room(700 + k, true);
    auto s = warmed(cfg, &cloud);
    record_clicks(s, sim_clicks(s, 1 + k % 3));
    const NetworkParams before = s.params;
    const auto ga_before = s.ga_state.steps;
    const auto seg_before = s.seg.labels;
    (void)evaluate_filter_scores(s);
    EXPECT_TRUE(s.params.bit_equal(before)) << "session " << k;
    EXPECT_EQ(s.ga_state.steps, ga_before);
    EXPECT_EQ(s.seg.labels, seg_before);
  }
}

// ---------------------------------------------------------------------------
// Warm-up

TEST(WarmUp, CannotRunTwice) {
  auto s = warmed();
  EXPECT_THROW(warm_up(s), StateError);
}

TEST(WarmUp, ZeroRoundsOnlySwitchesNormalization) {
  RefineConfig cfg;
  cfg.warmup_rounds = 0;
  auto s = make_session(test_room(), backbone(), cfg);
  const auto running = s.seg.labels;
  warm_up(s);
  EXPECT_EQ(s.bn_mode, BnMode::InstanceStats);
  EXPECT_EQ(s.pseudo_labels, running);
  EXPECT_TRUE(s.params.bit_equal(backbone()));
  EXPECT_EQ(s.seg.labels, forward(test_room(), s.neighbors, backbone(), BnMode::InstanceStats).labels);

  RefineConfig skip;
  skip.ablation.no_warmup = true;
  auto t = make_session(test_room(), backbone(), skip);
  warm_up(t);
  EXPECT_TRUE(t.params.bit_equal(backbone()));
}

TEST(WarmUp, MatchingStatisticsLeavePredictionsUnchanged) {
  NetworkParams p = backbone();
  const auto& cloud = test_room();
  const auto nb = knn_index(cloud.positions, p.config.knn_k);
  const auto fw = forward_graph(nullptr, cloud, nb, p, BnMode::InstanceStats);
  for (std::size_t b = 0; b < p.norms.size(); ++b) {
    p.norms[b].running_mu.assign(p.norms[b].channels(), 0.0f);
    p.norms[b].running_sigma2.assign(p.norms[b].channels(), 0.0f);
    update_running_stats(p.norms[b], fw.bn_inputs[b]->value, 0.0f);
  }
  RefineConfig cfg;
  cfg.warmup_rounds = 0;
  auto s = make_session(cloud, p, cfg);
  const auto before = s.seg;
  warm_up(s);
  EXPECT_EQ(s.seg.labels, before.labels);
  for (std::size_t i = 0; i < before.probs.numel(); ++i) EXPECT_NEAR(s.seg.probs[i], before.probs[i], 1e-4);
}

TEST(WarmUp, RaisesAgreementWithThePseudoLabels) {
  auto s = warmed();
  const auto unwarmed = forward(test_room(), s.neighbors, backbone(), BnMode::InstanceStats).labels;
  auto agree = [&](const std::vector<int>& l) {
    std::size_t a = 0;
    for (std::size_t i = 0; i < l.size(); ++i) a += l[i] == s.pseudo_labels[i];
    return a;
  };
  EXPECT_GT(agree(s.seg.labels), agree(unwarmed));
  EXPECT_EQ(s.initial_labels, s.seg.labels);
}

TEST(WarmUp, RefuseClicksBeforehandAndRefineRequiresIt) {
  auto s = make_session(test_room(), backbone(), RefineConfig{});
  EXPECT_THROW(refine(s, std::vector<InteractionRecord>{click(0, 1)}), StateError);
  record_clicks(s, std::vector<InteractionRecord>{click(0, 1)});
  EXPECT_THROW(warm_up(s), StateError);
}

// ---------------------------------------------------------------------------
// Refinement

TEST(Refine, OptimizationRoundsDropAccumulation) {
  const auto cfg = RefineConfig::sgd_regime();
  EXPECT_EQ(phase_optimizer(cfg, cfg.testtime_lr, false).effective_momentum(), 0.0f);
  EXPECT_EQ(phase_optimizer(cfg, cfg.warmup_lr, true).effective_momentum(), 0.9f);
  const auto adam = RefineConfig::adam_regime();
  EXPECT_EQ(phase_optimizer(adam, adam.testtime_lr, false).effective_beta1(), 0.0f);
  EXPECT_EQ(phase_optimizer(adam, adam.testtime_lr, false).effective_beta2(), 0.0f);

  // Stale optimizer state in the session has no influence without keep_ga.
  auto a = warmed(), b = warmed();
  const auto clicks = sim_clicks(a, 2);
  b.ga_state.first.assign(b.params.learnable().size(), {});
  for (std::size_t k = 0; k < b.ga_state.first.size(); ++k)
    b.ga_state.first[k].assign(b.params.learnable()[k]->value.numel(), 5.0f);
  refine(a, clicks);
  refine(b, clicks);
  EXPECT_TRUE(a.params.bit_equal(b.params));
}

TEST(Refine, CorrectionEnergyFallsWithLambdaZero) {
  RefineConfig cfg;
  cfg.lambda = 0.0f;
  auto s = warmed(cfg);
  const auto c = sim_clicks(s, 1);
  ASSERT_EQ(c.size(), 1u);
  const auto r = refine(s, c);
  ASSERT_EQ(r.trace.size(), cfg.rounds_per_interaction);
  for (std::size_t t = 1; t < r.trace.size(); ++t) EXPECT_LT(r.trace[t].correction, r.trace[t - 1].correction);
  EXPECT_LT(correction_energy(s.seg, s.clicks), r.trace.back().correction);
}

TEST(Refine, ZeroClicksAndZeroLambdaLeaveParametersUnchanged) {
  RefineConfig cfg;
  cfg.lambda = 0.0f;
  cfg.optimizer.weight_decay = 0.0f;
  auto s = warmed(cfg);
  const NetworkParams before = s.params;
  run_refinement_rounds(s);
  EXPECT_TRUE(s.params.bit_equal(before));

  // With weight decay the only motion is the decay itself.
  RefineConfig decay;
  decay.lambda = 0.0f;
  auto t = warmed(decay);
  const NetworkParams p0 = t.params;
  t.config.rounds_per_interaction = 1;
  run_refinement_rounds(t);
  const auto w0 = p0.head.weight->value.storage();
  const auto w1 = t.params.head.weight->value.storage();
  const double factor = 1.0 - static_cast<double>(decay.testtime_lr) * decay.optimizer.weight_decay;
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_NEAR(w1[i], w0[i] * factor, 1e-7);
}

TEST(Refine, IsDeterministic) {
  for (const auto& cfg : {RefineConfig::sgd_regime(), RefineConfig::adam_regime()}) {
    auto a = warmed(cfg), b = warmed(cfg);
    for (int round = 0; round < 3; ++round) {
      const auto c = sim_clicks(a, 1, round);
      ASSERT_FALSE(c.empty());
      refine(a, c);
      refine(b, c);
    }
    EXPECT_EQ(a.seg.labels, b.seg.labels);
    EXPECT_TRUE(a.params.bit_equal(b.params));
  }
}

TEST(Refine, InvalidClicksAreRejectedWithEveryOffender) {
  auto s = warmed();
  const NetworkParams before = s.params;
  const std::vector<InteractionRecord> bad{click(s.cloud.size(), 0), click(0, 99), click(1, -1), click(2, 0)};
  const auto errors = click_errors(s, bad);
  EXPECT_EQ(errors.size(), 3u);
  try {
    refine(s, bad);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("click 0"), std::string::npos);
    EXPECT_NE(msg.find("click 1"), std::string::npos);
    EXPECT_NE(msg.find("click 2"), std::string::npos);
  }
  EXPECT_TRUE(s.clicks.empty());
  EXPECT_TRUE(s.params.bit_equal(before));
}

TEST(Refine, ReclickReplacesAndLogKeepsHistory) {
  auto s = warmed();
  const int m = static_cast<int>(s.params.config.num_classes);
  const int l0 = (s.seg.labels[5] + 1) % m;
  refine(s, std::vector<InteractionRecord>{click(5, l0)});
  refine(s, std::vector<InteractionRecord>{click(5, (l0 + 1) % m)});
  ASSERT_EQ(s.clicks.size(), 1u);
  EXPECT_EQ(s.clicks[0].corrected_label, (l0 + 1) % m);
  EXPECT_EQ(s.clicks[0].round, 1);
  ASSERT_EQ(s.click_log.size(), 2u);
  EXPECT_EQ(s.click_log[0].round, 0);
}

TEST(Refine, WarnsWhenAClickAgreesWithThePrediction) {
  auto s = warmed();
  const auto r = refine(s, std::vector<InteractionRecord>{click(3, s.seg.labels[3])});
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("point 3"), std::string::npos);
}

TEST(Refine, ChangedListMatchesTheLabelDiff) {
  auto s = warmed();
  const auto before = s.seg.labels;
  const auto r = refine(s, sim_clicks(s, 3));
  std::vector<std::size_t> diff;
  for (std::size_t i = 0; i < before.size(); ++i)
    if (before[i] != s.seg.labels[i]) diff.push_back(i);
  EXPECT_EQ(r.changed, diff);
  EXPECT_EQ(r.seg.labels, s.seg.labels);
  // The stored prediction is what the current parameters produce.
  EXPECT_EQ(forward(s.cloud, s.neighbors, s.params, s.bn_mode).labels, s.seg.labels);
}

TEST(Refine, TraceReflectsAblations) {
  RefineConfig nostab;
  nostab.ablation.no_stabilization = true;
  auto a = warmed(nostab);
  for (const auto& t : refine(a, sim_clicks(a, 1)).trace) {
    EXPECT_EQ(t.stabilization, 0.0);
    EXPECT_EQ(t.active_scores, a.cloud.size());
  }
  RefineConfig nofilter;
  nofilter.ablation.no_filtering = true;
  auto b = warmed(nofilter);
  for (const auto& t : refine(b, sim_clicks(b, 1)).trace) {
    EXPECT_GT(t.stabilization, 0.0);
    EXPECT_EQ(t.active_scores, b.cloud.size());
  }
  auto c = warmed();
  const auto trace = refine(c, sim_clicks(c, 2)).trace;
  EXPECT_EQ(trace.front().round, 0);
  EXPECT_EQ(trace.back().round, static_cast<int>(trace.size()) - 1);
  for (const auto& t : trace) EXPECT_NEAR(t.loss, t.correction + c.config.lambda * t.stabilization, 1e-3 * t.loss);
}

TEST(Refine, LastRoundUpdateOnlyTouchesTheScores) {
  RefineConfig with_update;
  with_update.update_after_last_round = true;
  auto a = warmed(), b = warmed(with_update);
  for (int round = 0; round < 2; ++round) {
    const auto c = sim_clicks(a, 1, round);
    refine(a, c);
    refine(b, c);
    EXPECT_EQ(a.seg.labels, b.seg.labels);
    EXPECT_TRUE(a.params.bit_equal(b.params));
  }
}

TEST(Refine, ScoresStayBinaryAndRefinementHelps) {
  auto s = warmed();
  std::size_t before = 0, after = 0;
  for (std::size_t i = 0; i < s.cloud.size(); ++i) before += s.seg.labels[i] == (*s.cloud.labels)[i];
  for (int round = 0; round < 5; ++round) {
    const auto c = sim_clicks(s, 1, round);
    if (c.empty()) break;
    refine(s, c);
    for (const auto v : s.filter_scores) EXPECT_TRUE(v == 0 || v == 1);
  }
  for (std::size_t i = 0; i < s.cloud.size(); ++i) after += s.seg.labels[i] == (*s.cloud.labels)[i];
  EXPECT_GT(after, before);
}

// ---------------------------------------------------------------------------
// IA baseline

TEST(IaBaseline, ConfidentCorrectPredictionStaysPut) {
  // A large bias on one class gives a confident prediction with a wide margin
  // at every point; the ground truth is set to that prediction.
  NetworkParams p = backbone();
  p.head.bias->value[3] += 40.0f;
  RefineConfig cfg;
  cfg.ablation.ia_baseline = true;
  auto s = make_session(test_room(), p, cfg);
  warm_up(s);
  ASSERT_TRUE(std::all_of(s.seg.labels.begin(), s.seg.labels.end(), [](int l) { return l == 3; }));
  s.cloud.labels = s.seg.labels;
  const auto before = s.seg.labels;
  std::vector<InteractionRecord> clicks;
  for (const std::size_t i : {std::size_t{0}, s.cloud.size() / 2, s.cloud.size() - 1}) clicks.push_back(click(i, before[i]));
  const auto r = refine(s, clicks);
  EXPECT_EQ(s.seg.labels, before);
  for (const auto& t : r.trace) EXPECT_LT(t.loss, 1e-6);
  EXPECT_TRUE(r.changed.empty());
}

TEST(IaBaseline, IsDeterministicAndUsesThePostWarmupMask) {
  RefineConfig cfg;
  cfg.ablation.ia_baseline = true;
  auto a = warmed(cfg), b = warmed(cfg);
  const auto initial = a.initial_labels;
  for (int round = 0; round < 2; ++round) {
    const auto c = sim_clicks(a, 2, round);
    refine(a, c);
    refine(b, c);
  }
  EXPECT_EQ(a.seg.labels, b.seg.labels);
  EXPECT_EQ(a.initial_labels, initial);
  for (const auto& t : a.history) EXPECT_EQ(t.active_scores, 0u);
}

// ---------------------------------------------------------------------------
// Serialization

TEST(Json, ConfigRoundTrip) {
  auto cfg = RefineConfig::adam_regime();
  cfg.lambda = 12.5f;
  cfg.ablation.no_filtering = true;
  cfg.update_after_last_round = true;
  const auto back = refine_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_THROW(refine_config_from_json({{"lambda", -1.0}}), ContractError);
  EXPECT_THROW(refine_config_from_json({{"optimizer", {{"kind", "rmsprop"}}}}), ValidationError);
  // Missing fields fall back to the base.
  EXPECT_EQ(refine_config_from_json({{"lambda", 3.0}}, cfg).delta_plus, cfg.delta_plus);
}

TEST(Json, ClicksAndLabels) {
  const InteractionRecord r{17, 3, 2, ClickSource::Simulator};
  EXPECT_EQ(click_from_json(to_json(r)), r);
  EXPECT_THROW(click_from_json({{"index", -2}, {"label", 0}}), ValidationError);
  const std::vector<int> labels{0, 7, 3, 3, 1, 0, 5};
  EXPECT_EQ(unpack_labels(pack_labels(labels)), labels);
}

TEST(Export, ReplayReproducesTheSession) {
  for (const auto& cfg : {RefineConfig::sgd_regime(), RefineConfig::adam_regime()}) {
    auto s = warmed(cfg);
    for (int round = 0; round < 3; ++round) refine(s, sim_clicks(s, 1 + round % 2, round));
    const auto j = export_session(s);
    EXPECT_EQ(j.at("format"), "ipcs-session");
    EXPECT_EQ(j.at("clicks").size(), s.click_log.size());
    EXPECT_EQ(j.at("trace").size(), s.history.size());
    const auto text = j.dump();
    const auto replayed = replay_session(test_room(), backbone(), nlohmann::json::parse(text));
    EXPECT_EQ(replayed.seg.labels, s.seg.labels);
    EXPECT_EQ(unpack_labels(j.at("labels").get<std::string>()), s.seg.labels);
    EXPECT_TRUE(replayed.params.bit_equal(s.params));
    EXPECT_EQ(export_session(replayed).dump(), text);
  }
}

TEST(Export, ReplayRejectsForeignData) {
  auto s = warmed();
  refine(s, sim_clicks(s, 1));
  auto j = export_session(s);
  j["num_points"] = 3;
  EXPECT_THROW(replay_session(test_room(), backbone(), j), ValidationError);
  EXPECT_THROW(replay_session(test_room(), backbone(), {{"format", "other"}}), ParseError);
}
