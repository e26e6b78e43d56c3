#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "jest/flop_model.hpp"
#include "jest/harness/config.hpp"
#include "jest/harness/experiment.hpp"
#include "jest/harness/plot.hpp"
#include "jest/harness/sample_bench.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out) {
  auto cfg = jest::harness::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.output_dir = out;
  const auto result = jest::harness::run_experiment(cfg);
  std::cout << result.summary_text;
  if (cfg.output_dir.empty()) std::cout << result.csv;
  return 0;
}

int cmd_sample_bench(const std::string& ratio, std::size_t size, std::size_t runs, std::size_t sweeps,
                     std::uint64_t seed, const std::string& matrix, const std::string& csv) {
  jest::harness::BenchConfig cfg;
  cfg.filter_ratio = std::stod(ratio);
  cfg.super_batch = size;
  cfg.runs = runs;
  cfg.gibbs_sweeps = sweeps;
  cfg.gibbs_runs = sweeps ? cfg.gibbs_runs : 0;
  cfg.seed = seed;
  cfg.kind = matrix == "low_rank" ? jest::harness::MatrixKind::low_rank : jest::harness::MatrixKind::learnability;
  const jest::SelectionConfig probe{.filter_ratio = cfg.filter_ratio};
  if (probe.sub_batch_size(size) < 1) throw jest::ConfigError("sample-bench: size too small for ratio " + ratio);

  const auto r = jest::harness::run_sample_bench(cfg);
  std::printf("B=%zu b=%zu chunks=%zu runs=%zu\n", size, r.b, r.n_chunks, runs);
  auto line = [](const char* name, const jest::harness::MeanAndError& m) {
    std::printf("%-12s %.6g +- %.3g (n=%zu)\n", name, m.mean, m.std_error, m.count);
  };
  line("joint", r.joint);
  line("independent", r.independent);
  line("uniform", r.uniform);
  if (sweeps) {
    line("gibbs", r.gibbs);
    std::printf("joint vs gibbs: %+.3f%%\n", 100.0 * (r.joint.mean - r.gibbs.mean) / std::abs(r.gibbs.mean));
  }
  if (!csv.empty()) std::ofstream(csv, std::ios::binary) << r.trace_csv;
  return 0;
}

int cmd_flops(const std::string& scenario, double f, double A, double lambda, double F) {
  using namespace jest::flops;
  const Method m = parse_method(scenario);
  double cost = 0.0;
  switch (m) {
    case Method::iid: cost = cost_iid(F); break;
    case Method::jest: cost = cost_jest(f, F); break;
    case Method::flexi_jest: cost = cost_flexi(f, A, F, lambda); break;
  }
  const double ratio = cost / cost_iid(F);
  std::printf("scenario=%s f=%g A=%g lambda=%g\n", scenario.c_str(), f, A, lambda);
  std::printf("cost_per_example=%.6g\n", cost);
  std::printf("ratio_vs_iid=%.6g\n", ratio);
  std::printf("overhead_pct=%.4g\n", 100.0 * (ratio - 1.0));
  std::printf("reference_scoring_cost=%.6g\n", reference_scoring_cost(f, F));
  return 0;
}

int cmd_plot(const std::string& csv, const std::string& out) {
  for (const auto& p : jest::harness::emit_plots(csv, out)) std::cout << p.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"curate: joint example selection toolkit"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train reference and learner for one scenario");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  run->add_option("--config", config_path, "experiment config")->required();
  run->add_option("--seed", seed, "override [experiment] seed");
  run->add_option("--out", out_dir, "output directory for metrics.csv and summary.txt");

  auto* bench = app.add_subcommand("sample-bench", "compare samplers on a synthetic score matrix");
  std::string ratio, matrix = "learnability", trace_csv;
  std::size_t size = 2048, runs = 20, sweeps = 1000;
  std::uint64_t bench_seed = 0;
  bench->add_option("--ratio", ratio, "filter ratio")->required()->check(CLI::IsMember({"0.5", "0.8", "0.9"}));
  bench->add_option("--size", size, "super-batch size B")->required()->check(CLI::PositiveNumber);
  bench->add_option("--runs", runs, "sampler runs")->check(CLI::PositiveNumber);
  bench->add_option("--gibbs-sweeps", sweeps, "0 disables the Gibbs oracle");
  bench->add_option("--seed", bench_seed);
  bench->add_option("--matrix", matrix)->check(CLI::IsMember({"learnability", "low_rank"}));
  bench->add_option("--csv", trace_csv, "write joint score per chunk");

  auto* flops = app.add_subcommand("flops", "per-example training cost relative to IID");
  std::string scenario;
  double f = 0.8, A = 0.25, lambda = 0.5, F = 1.0;
  flops->add_option("--scenario", scenario, "iid | jest | flexi_jest")->required();
  flops->add_option("--f", f, "filter ratio")->required();
  flops->add_option("--A", A, "approximation factor")->required();
  flops->add_option("--lambda", lambda, "approximate fraction of the batch");
  flops->add_option("--F", F, "forward cost per example");

  auto* plot = app.add_subcommand("plot", "render SVG charts from a metrics or trace CSV");
  std::string plot_csv, plot_out;
  plot->add_option("--csv", plot_csv)->required();
  plot->add_option("--out", plot_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, seed, out_dir);
    if (*bench) return cmd_sample_bench(ratio, size, runs, sweeps, bench_seed, matrix, trace_csv);
    if (*flops) return cmd_flops(scenario, f, A, lambda, F);
    if (*plot) return cmd_plot(plot_csv, plot_out);
  } catch (const jest::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}
