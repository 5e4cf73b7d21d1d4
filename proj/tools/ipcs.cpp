// ipcs: synthetic data generation, backbone training, simulated-click
// benchmarking and the interactive session server.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "ipcs/config.hpp"
#include "ipcs/eval.hpp"
#include "ipcs/scene.hpp"
#include "ipcs/segnet.hpp"
#include "ipcs/service.hpp"

namespace fs = std::filesystem;
using namespace ipcs;

namespace {

RunConfig load_run_config(const std::string& file, const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!file.empty()) apply_config_file(c, file);
  for (const auto& o : overrides) apply_override(c, o);
  validate(c);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw NotFoundError("cannot write '" + path.string() + "'");
  os << text;
}

NetworkParams train_backbone(const RunConfig& c, const std::vector<LabeledCloud>& train, std::uint64_t seed) {
  SegNetConfig net = c.net;
  net.seed = seed;
  TrainConfig tc = c.train;
  tc.seed = seed;
  auto result = train_supervised(train, net, tc);
  std::cerr << "trained backbone seed " << seed << ": loss " << result.epoch_losses.front() << " -> "
            << result.epoch_losses.back() << "\n";
  return std::move(result.params);
}

std::vector<LabeledCloud> split_or_generate(const std::string& data_dir, const RunConfig& c, bool test) {
  if (data_dir.empty()) return generate_split(c.data, test);
  const auto m = load_manifest(fs::path(data_dir) / "manifest.json");
  return load_split(m, data_dir, test ? "test" : "train");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive point cloud segmentation refinement workbench"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_file, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", overrides, "override a config key (key=value), repeatable");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic benchmark (PLY scenes + manifest.json)");
  std::string gen_out = "data";
  gen->add_option("-o,--out", gen_out, "output directory");

  auto* train = app.add_subcommand("train-baseline", "train the backbone on the train split");
  std::string train_data, train_out = "backbone.ipcs";
  std::uint64_t train_seed = 0;
  train->add_option("-d,--data", train_data, "benchmark directory (generated in memory when omitted)");
  train->add_option("-o,--out", train_out, "checkpoint path");
  train->add_option("--seed", train_seed, "initialization and shuffling seed");

  auto* bench = app.add_subcommand("bench", "run the simulated-click protocol over all variants and seeds");
  std::string bench_data, bench_out = "bench_out";
  std::vector<std::string> checkpoints;
  std::vector<std::string> variant_names;
  bench->add_option("-d,--data", bench_data, "benchmark directory (generated in memory when omitted)");
  bench->add_option("-o,--out", bench_out, "report directory");
  bench->add_option("--checkpoint", checkpoints, "one checkpoint per seed, in bench.seeds order (trained when omitted)");
  bench->add_option("--variants", variant_names, "subset of variants to run")
      ->check(CLI::IsMember({"full", "no_stabilization", "no_filtering", "no_warmup", "ia_baseline"}));

  auto* serve = app.add_subcommand("serve", "serve interactive sessions over HTTP");
  std::string serve_data, serve_ckpt, host = "127.0.0.1";
  int port = 8080;
  serve->add_option("-d,--data", serve_data, "benchmark directory whose test scenes are offered (generated when omitted)");
  serve->add_option("--checkpoint", serve_ckpt, "backbone checkpoint")->required();
  serve->add_option("--host", host, "bind address");
  serve->add_option("-p,--port", port, "port");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig c = load_run_config(config_file, overrides);

    if (*gen) {
      const auto m = make_benchmark(c.data, gen_out);
      std::cout << "wrote " << m.entries.size() << " scenes to " << gen_out << "\n";
    } else if (*train) {
      const auto scenes = split_or_generate(train_data, c, false);
      save_params(train_backbone(c, scenes, train_seed), train_out);
      std::cout << "wrote " << train_out << "\n";
    } else if (*bench) {
      const auto test = split_or_generate(bench_data, c, true);
      std::vector<std::pair<std::uint64_t, NetworkParams>> backbones;
      if (!checkpoints.empty()) {
        if (checkpoints.size() != c.seeds.size())
          throw ContractError("need one --checkpoint per seed (" + std::to_string(c.seeds.size()) + ")");
        for (std::size_t i = 0; i < c.seeds.size(); ++i)
          backbones.emplace_back(c.seeds[i], load_params(checkpoints[i], &c.net));
      } else {
        const auto train_set = split_or_generate(bench_data, c, false);
        for (const auto seed : c.seeds) backbones.emplace_back(seed, train_backbone(c, train_set, seed));
      }
      auto variants = standard_variants(c.refine);
      if (!variant_names.empty())
        std::erase_if(variants, [&](const Variant& v) {
          return std::find(variant_names.begin(), variant_names.end(), v.name) == variant_names.end();
        });
      const std::size_t threads = c.threads ? c.threads : std::max(1u, std::thread::hardware_concurrency());
      const auto runs = run_benchmark(test, backbones, variants, c.protocol, threads);
      const auto summary = summarize(runs, c.protocol);
      fs::create_directories(bench_out);
      const fs::path out(bench_out);
      write_text(out / "curves.csv", curves_csv(runs, c.protocol.budget));
      write_text(out / "summary.txt", summary_table(summary, c.protocol));
      write_text(out / "summary.json", summary_json(summary, c.protocol).dump(2) + "\n");
      write_text(out / "curves.svg", curves_svg(summary, c.protocol.budget));
      std::cout << summary_table(summary, c.protocol);
    } else if (*serve) {
      const auto scenes = split_or_generate(serve_data, c, true);
      SessionService service(load_params(serve_ckpt, &c.net), c.refine, scenes);
      httplib::Server server;
      service.bind(server);
      std::cout << "listening on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
