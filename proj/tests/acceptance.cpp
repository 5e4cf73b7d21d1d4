// Acceptance run: one PASS/FAIL line per criterion, then a summary. Unit-level
// criteria re-run the relevant GoogleTest suites; the rest come from a full
// simulated-click benchmark on the synthetic test split. Generated data,
// checkpoints and reports are cached under --workdir.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ipcs/config.hpp"
#include "ipcs/eval.hpp"
#include "ipcs/scene.hpp"

#ifndef IPCS_TEST_BIN_DIR
#define IPCS_TEST_BIN_DIR "."
#endif

namespace fs = std::filesystem;
using namespace ipcs;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({name, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct SuiteRun {
  bool ok = false;
  std::size_t tests = 0;
  double seconds = 0.0;
};

// Runs a GoogleTest binary and reads the passed-test count from its summary,
// so that a filter matching nothing does not count as a pass.
SuiteRun run_suite(const fs::path& bin_dir, const std::string& binary, const std::string& filter) {
  const auto exe = bin_dir / binary;
  if (!fs::exists(exe)) return {};
  std::string cmd = "\"" + exe.string() + "\" --gtest_brief=1";
  if (!filter.empty()) cmd += " --gtest_filter='" + filter + "'";
  cmd += " 2>&1";
  const auto t0 = Clock::now();
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  std::string out;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int rc = pclose(pipe);
  SuiteRun r;
  r.seconds = since(t0);
  const auto at = out.rfind("[  PASSED  ] ");
  if (at != std::string::npos) r.tests = std::strtoul(out.c_str() + at + 13, nullptr, 10);
  r.ok = rc == 0 && r.tests > 0;
  return r;
}

void unit_criteria(const fs::path& bin_dir) {
  const auto grad = run_suite(bin_dir, "test_tensor", "GradientCheck.*");
  report("gradient_correctness", grad.ok && grad.seconds < 60.0,
         fmt("%zu finite-difference tests %s in %.2f s (limit 60 s)", grad.tests, grad.ok ? "passed" : "failed",
             grad.seconds));

  const auto energies = run_suite(bin_dir, "test_refine", "");
  const auto ops = run_suite(bin_dir, "test_tensor", "Softmax.*:RowEntropy.*:CrossEntropy.*:BatchNorm.*");
  report("unit_fidelity", energies.ok && ops.ok,
         fmt("%zu refine tests %s, %zu normalization/entropy/loss tests %s", energies.tests,
             energies.ok ? "passed" : "failed", ops.tests, ops.ok ? "passed" : "failed"));

  // Both score rules against their truth tables, in process.
  std::size_t mismatches = 0, cases = 0;
  for (const auto& [dplus, dminus] : {std::pair{0.03f, 0.03f}, std::pair{0.1f, 0.01f}, std::pair{0.25f, 0.25f}}) {
    for (const float delta : {dplus, dminus}) {
      const std::vector<float> grid{-2 * delta, -delta / 2, 0.0f, delta / 2, 2 * delta};
      const std::vector<std::uint8_t> probe_want{1, 1, 1, 1, 0};
      if (probe_scores(grid, delta) != probe_want) ++mismatches;
      ++cases;
      for (const std::uint8_t prior : {0, 1}) {
        std::vector<std::uint8_t> s(grid.size(), prior);
        const std::vector<float> prev(grid.size(), 0.0f);
        update_filter_scores(s, prev, grid, dplus, dminus);
        for (std::size_t i = 0; i < grid.size(); ++i) {
          const std::uint8_t want = grid[i] < -dminus ? 1 : grid[i] > dplus ? 0 : prior;
          mismatches += s[i] != want;
          ++cases;
        }
      }
    }
  }
  const auto tables = run_suite(bin_dir, "test_refine", "ScoreUpdate*:ProbeRule.*");
  report("filter_rule_exactness", mismatches == 0 && tables.ok,
         fmt("%zu/%zu truth-table cells match, %zu table tests %s", cases - mismatches, cases, tables.tests,
             tables.ok ? "passed" : "failed"));

  const auto oracle = run_suite(bin_dir, "test_interaction_sim", "SimulatorOracle.*");
  report("simulator_oracle_equivalence", oracle.ok,
         fmt("%zu oracle tests over 150 random instances (clustering, density, clicks): %s", oracle.tests,
             oracle.ok ? "zero mismatches" : "mismatches found"));
}

NetworkParams cached_backbone(const RunConfig& c, const std::vector<LabeledCloud>& train, std::uint64_t seed,
                              const fs::path& workdir) {
  // The file name carries a hash of everything that shapes training.
  std::ostringstream key;
  key << to_json(c.data).dump() << '|' << c.train.epochs << '|' << c.train.batch_size << '|'
      << c.train.optimizer.learning_rate << '|' << c.train.bn_momentum << '|' << c.net.knn_k << '|'
      << c.net.aggregate_after;
  for (const auto d : c.net.hidden_dims) key << ',' << d;
  char tag[32];
  std::snprintf(tag, sizeof tag, "%016llx", static_cast<unsigned long long>(fnv1a(key.str())));
  const auto path = workdir / ("backbone_" + std::string(tag) + "_seed" + std::to_string(seed) + ".ipcs");
  SegNetConfig net = c.net;
  net.seed = seed;
  if (fs::exists(path)) {
    try {
      return load_params(path.string(), &net);
    } catch (const Error& e) {
      std::cerr << "retraining: " << e.what() << "\n";
    }
  }
  TrainConfig tc = c.train;
  tc.seed = seed;
  const auto t0 = Clock::now();
  auto result = train_supervised(train, net, tc);
  std::cerr << fmt("trained backbone seed %llu in %.0f s (loss %.3f -> %.3f)\n", static_cast<unsigned long long>(seed),
                   since(t0), result.epoch_losses.front(), result.epoch_losses.back());
  save_params(result.params, path.string());
  return std::move(result.params);
}

std::vector<LabeledCloud> cached_split(const RunConfig& c, const fs::path& dir, const std::string& split) {
  const auto manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    const auto m = load_manifest(manifest);
    if (m.spec == to_json(c.data)) return load_split(m, dir, split);
  }
  return load_split(make_benchmark(c.data, dir), dir, split);
}

bool at_least(double a, double b, double tie) { return a >= b - tie; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string workdir = "acceptance_work";
  std::string bin_dir = IPCS_TEST_BIN_DIR;
  std::string config_file;
  std::vector<std::string> overrides;
  app.add_option("--workdir", workdir, "cache for data, checkpoints and reports");
  app.add_option("--test-bin-dir", bin_dir, "directory holding the test_* binaries");
  app.add_option("-c,--config", config_file, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", overrides, "override a config key, repeatable");
  CLI11_PARSE(app, argc, argv);

  const auto t_all = Clock::now();
  unit_criteria(bin_dir);

  RunConfig c;
  c.seeds = {0, 1, 2};
  c.protocol.budget = 15;
  c.protocol.run_full_budget = true;
  try {
    if (!config_file.empty()) apply_config_file(c, config_file);
    for (const auto& o : overrides) apply_override(c, o);
    validate(c);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  const fs::path work(workdir);
  fs::create_directories(work / "data");

  const auto train = cached_split(c, work / "data", "train");
  const auto test = cached_split(c, work / "data", "test");
  std::vector<std::pair<std::uint64_t, NetworkParams>> backbones;
  for (const auto seed : c.seeds) backbones.emplace_back(seed, cached_backbone(c, train, seed, work));
  const std::size_t m = c.net.num_classes;

  // Frozen-backbone baseline on the shifted test split.
  double baseline = 0.0;
  for (const auto& [seed, p] : backbones)
    for (const auto& s : test)
      baseline += miou(forward(s, knn_index(s.positions, p.config.knn_k), p, BnMode::RunningStats).labels, *s.labels, m);
  baseline /= static_cast<double>(backbones.size() * test.size());

  const auto variants = standard_variants(c.refine);
  const std::size_t threads = c.threads ? c.threads : std::max(1u, std::thread::hardware_concurrency());
  const auto t_bench = Clock::now();
  const auto runs = run_benchmark(test, backbones, variants, c.protocol, threads);
  std::cerr << fmt("benchmark: %zu runs in %.0f s\n", runs.size(), since(t_bench));
  const auto summary = summarize(runs, c.protocol);
  const auto csv = curves_csv(runs, c.protocol.budget);
  {
    std::ofstream(work / "curves.csv", std::ios::binary) << csv;
    std::ofstream(work / "summary.json") << summary_json(summary, c.protocol).dump(2) << "\n";
    std::ofstream(work / "curves.svg") << curves_svg(summary, c.protocol.budget);
  }
  std::cout << summary_table(summary, c.protocol);

  auto final_of = [&](const std::string& name) {
    for (const auto& s : summary)
      if (s.name == name) return 100.0 * s.mean_final;
    return 0.0;
  };

  // End to end: the full method against the frozen baseline.
  double full_initial = 0.0, full_final = 0.0, full_seconds_seed0 = 0.0;
  std::size_t full_runs = 0, not_worse = 0, checked = 0, kept = 0;
  for (const auto& r : runs) {
    if (r.variant != "full") continue;
    ++full_runs;
    full_initial += r.initial();
    full_final += r.final();
    not_worse += r.final() >= r.initial();
    checked += r.clicked_checked;
    kept += r.clicked_kept;
    if (r.seed == c.seeds.front()) full_seconds_seed0 += r.seconds;
  }
  full_initial = 100.0 * full_initial / static_cast<double>(full_runs);
  full_final = 100.0 * full_final / static_cast<double>(full_runs);
  const double base_pct = 100.0 * baseline;
  const double not_worse_frac = static_cast<double>(not_worse) / static_cast<double>(full_runs);
  const bool base_ok = base_pct >= 55.0 && base_pct <= 75.0;
  const bool gain_ok = full_final - base_pct >= 10.0;
  const bool mono_ok = not_worse_frac >= 0.9;
  const bool time_ok = full_seconds_seed0 < 1800.0;
  report("end_to_end_refinement", base_ok && gain_ok && mono_ok && time_ok,
         fmt("%zu scenes x %zu seeds, budget %zu: baseline %.2f (55-75), after warm-up %.2f, final %.2f, "
             "gain %+.2f (>= 10), final >= initial on %.1f%% (>= 90%%), one seed on %zu thread(s) %.0f s (< 1800)",
             test.size(), backbones.size(), c.protocol.budget, base_pct, full_initial, full_final,
             full_final - base_pct, 100.0 * not_worse_frac, threads, full_seconds_seed0));

  const double tie = 0.5;
  const double f_full = final_of("full"), f_stab = final_of("no_stabilization"), f_filt = final_of("no_filtering"),
               f_warm = final_of("no_warmup"), f_ia = final_of("ia_baseline");
  std::vector<std::string> broken;
  if (!at_least(f_full, f_filt, tie)) broken.push_back("full < no_filtering");
  if (!at_least(f_full, f_warm, tie)) broken.push_back("full < no_warmup");
  if (!at_least(f_filt, f_stab, tie)) broken.push_back("no_filtering < no_stabilization");
  if (!at_least(f_warm, f_stab, tie)) broken.push_back("no_warmup < no_stabilization");
  if (!at_least(f_full, f_ia, tie)) broken.push_back("full < ia_baseline");
  std::string violated;
  for (const auto& b : broken) violated += (violated.empty() ? "" : ", ") + b;
  report("ablation_ordering", broken.empty(),
         fmt("mean final mIoU full %.2f, no_filtering %.2f, no_warmup %.2f, no_stabilization %.2f, ia_baseline %.2f "
             "(tie 0.5)%s%s",
             f_full, f_filt, f_warm, f_stab, f_ia, broken.empty() ? "" : "; violated: ", violated.c_str()));

  const double dominance = checked ? static_cast<double>(kept) / static_cast<double>(checked) : 0.0;
  report("clicked_point_dominance", dominance >= 0.9,
         fmt("%zu of %zu clicked-point checks after refine calls of the full method keep their label (%.1f%%, >= 90%%)",
             kept, checked, 100.0 * dominance));

  // Determinism: the full method on the first seed, run again from scratch.
  {
    std::vector<RunRecord> first;
    for (const auto& r : runs)
      if (r.variant == "full" && r.seed == c.seeds.front()) first.push_back(r);
    const std::vector<Variant> full_only{variants.front()};
    const std::vector<std::pair<std::uint64_t, NetworkParams>> one{backbones.front()};
    const auto again = run_benchmark(test, one, full_only, c.protocol, threads);
    const auto a = curves_csv(first, c.protocol.budget), b = curves_csv(again, c.protocol.budget);
    std::ofstream(work / "curves_full_rerun.csv", std::ios::binary) << b;
    report("determinism", a == b, fmt("rerun of %zu runs: CSV %zu bytes, %s", again.size(), b.size(),
                                      a == b ? "byte-identical" : "differs"));
  }

  // Probe isolation on 10 sessions at different stages.
  {
    std::size_t identical = 0;
    const std::size_t sessions = std::min<std::size_t>(10, test.size());
    for (std::size_t k = 0; k < sessions; ++k) {
      const auto& [seed, params] = backbones[k % backbones.size()];
      auto s = make_session(test[k], params, c.refine);
      warm_up(s);
      SimConfig sim = c.protocol.sim;
      std::unordered_set<std::size_t> used;
      for (std::size_t round = 0; round <= k % 3; ++round) {
        auto clicks = next_clicks({s.seg.labels, *test[k].labels, test[k].positions}, sim, static_cast<int>(round), used);
        if (clicks.empty()) break;
        for (const auto& cl : clicks) used.insert(cl.point_index);
        if (round < k % 3) refine(s, clicks);
        else record_clicks(s, clicks);
      }
      if (s.clicks.empty()) continue;
      const NetworkParams before = s.params;
      (void)evaluate_filter_scores(s);
      identical += s.params.bit_equal(before);
    }
    report("probe_isolation", identical == sessions,
           fmt("%zu/%zu sessions bit-identical after the probe", identical, sessions));
  }

  std::size_t passed = 0;
  for (const auto& v : verdicts) passed += v.pass;
  std::cout << fmt("%zu/%zu criteria passed in %.0f s\n", passed, verdicts.size(), since(t_all));
  return passed == verdicts.size() ? 0 : 1;
}
