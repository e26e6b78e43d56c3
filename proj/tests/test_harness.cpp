#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <boost/math/distributions/binomial.hpp>
#include <gtest/gtest.h>

#include "jest/harness/config.hpp"
#include "jest/harness/experiment.hpp"
#include "jest/harness/plot.hpp"
#include "jest/harness/sample_bench.hpp"
#include "jest/harness/synthetic.hpp"

using namespace jest;
using namespace jest::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_experiment(Scenario scenario, std::uint64_t seed = 0) {
  ExperimentConfig c;
  c.scenario = scenario;
  c.seed = seed;
  c.dataset.curated_size = 400;
  c.dataset.uncurated_size = 2000;
  c.dataset.holdout_size = 200;
  c.reference.steps = 100;
  c.reference.eval_every = 50;
  c.train.steps = 40;
  c.train.eval_every = 10;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("jest_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

double mean_final(Scenario scenario, std::size_t seeds, auto&& tweak) {
  double s = 0.0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    ExperimentConfig c;
    c.scenario = scenario;
    c.seed = seed;
    tweak(c);
    s += run_experiment(c).summary.scenario_final;
  }
  return s / static_cast<double>(seeds);
}

}  // namespace

// generate_dataset

TEST(GenerateDataset, NoNoiseMeansEveryPairAligned) {
  SyntheticDatasetSpec spec;
  spec.noise_rate = 0.0;
  spec.uncurated_size = 3000;
  Rng rng(1);
  const auto d = generate_dataset(spec, rng);
  for (std::size_t i = 0; i < d.uncurated.n(); ++i) {
    EXPECT_EQ(d.uncurated.image_concept[i], d.uncurated.text_concept[i]);
    EXPECT_EQ(d.uncurated.aligned[i], 1);
  }
}

TEST(GenerateDataset, FullNoiseMatchesCollisionProbability) {
  SyntheticDatasetSpec spec;
  spec.noise_rate = 1.0;
  spec.n_concepts = 20;
  spec.uncurated_size = 20000;
  Rng rng(2);
  const auto d = generate_dataset(spec, rng);
  std::size_t same = 0;
  for (std::size_t i = 0; i < d.uncurated.n(); ++i) {
    same += d.uncurated.image_concept[i] == d.uncurated.text_concept[i];
    EXPECT_EQ(d.uncurated.aligned[i], 0);
  }
  const double n = static_cast<double>(d.uncurated.n()), p = 1.0 / 20.0;
  EXPECT_NEAR(static_cast<double>(same) / n, p, 3 * std::sqrt(p * (1 - p) / n));
}

TEST(GenerateDataset, HalfNoiseMisalignsHalf) {
  SyntheticDatasetSpec spec;
  spec.noise_rate = 0.5;
  Rng rng(3);
  const auto d = generate_dataset(spec, rng);
  double aligned = 0.0;
  for (auto a : d.uncurated.aligned) aligned += a;
  const double n = static_cast<double>(d.uncurated.n());
  EXPECT_NEAR(aligned / n, 0.5, 3 * std::sqrt(0.25 / n));
}

TEST(GenerateDataset, CuratedAndHoldoutAreClean) {
  SyntheticDatasetSpec spec;
  spec.noise_rate = 0.9;
  Rng rng(4);
  const auto d = generate_dataset(spec, rng);
  EXPECT_EQ(d.curated.n(), spec.curated_size);
  EXPECT_EQ(d.holdout.n(), spec.holdout_size);
  for (auto a : d.curated.aligned) EXPECT_EQ(a, 1);
  for (auto a : d.holdout.aligned) EXPECT_EQ(a, 1);
  EXPECT_NE(d.holdout.inputs.images(0, 0), d.uncurated.inputs.images(0, 0));
}

TEST(GenerateDataset, DeterministicPerSeed) {
  SyntheticDatasetSpec spec;
  spec.uncurated_size = 500;
  Rng a(9), b(9), c(10);
  const auto x = generate_dataset(spec, a), y = generate_dataset(spec, b), z = generate_dataset(spec, c);
  EXPECT_EQ(x.uncurated.inputs.images.values(), y.uncurated.inputs.images.values());
  EXPECT_EQ(x.uncurated.inputs.texts.values(), y.uncurated.inputs.texts.values());
  EXPECT_EQ(x.holdout.inputs.texts.values(), y.holdout.inputs.texts.values());
  EXPECT_EQ(x.uncurated.text_concept, y.uncurated.text_concept);
  EXPECT_NE(x.uncurated.inputs.images.values(), z.uncurated.inputs.images.values());
}

TEST(GenerateDataset, RejectsBadSpec) {
  Rng rng(0);
  SyntheticDatasetSpec s;
  s.input_dim = 7;
  EXPECT_THROW(generate_dataset(s, rng), ValueError);
  s = {};
  s.noise_rate = 1.5;
  EXPECT_THROW(generate_dataset(s, rng), ValueError);
  s = {};
  s.holdout_size = 0;
  EXPECT_THROW(generate_dataset(s, rng), ValueError);
}

// config

TEST(Config, ParsesSectionsAndComments) {
  const auto c = parse_config(
      "# demo\n"
      "[experiment]\n"
      "scenario = flexi_jest   # trailing\n"
      "seed = 7\n"
      "\n"
      "[dataset]\n"
      "noise_rate = 0.25\n"
      "[train]\n"
      "steps = 12\n"
      "approx_fraction = 0.5\n"
      "approx_method = feature_drop\n"
      "[selection]\n"
      "filter_ratio = 0.9\n"
      "method = easy_ref\n"
      "[reference]\n"
      "steps = 3\n");
  EXPECT_EQ(c.scenario, Scenario::flexi_jest);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.dataset.noise_rate, 0.25);
  EXPECT_EQ(c.train.steps, 12u);
  EXPECT_EQ(c.train.approx_fraction, 0.5);
  EXPECT_EQ(c.train.approx_method, ApproxMethod::feature_drop);
  EXPECT_EQ(c.train.selection.filter_ratio, 0.9);
  EXPECT_EQ(c.train.selection.method, ScoringMethod::easy_ref);
  EXPECT_EQ(c.reference.steps, 3u);
  EXPECT_EQ(c.reference.super_batch_size, default_reference_config().super_batch_size);
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](std::string_view text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("[experiment]\nbogus = 1\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("[experiment]\nbogus = 1\n").find("unknown key"), std::string::npos);
  EXPECT_NE(message("\n\n[nowhere]\n").find("line 3"), std::string::npos);
  EXPECT_NE(message("seed = 1\n").find("outside of a section"), std::string::npos);
  EXPECT_NE(message("[experiment\n").find("unterminated"), std::string::npos);
  EXPECT_NE(message("[experiment]\nseed\n").find("key = value"), std::string::npos);
  EXPECT_NE(message("[experiment]\nseed = x1\n").find("invalid value"), std::string::npos);
  EXPECT_NE(message("[experiment]\nseed = -1\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("[dataset]\nnoise_rate = 0.5abc\n").find("invalid value"), std::string::npos);
  EXPECT_NE(message("[experiment]\nscenario = best\n").find("line 2"), std::string::npos);
  const auto dup = message("[train]\nsteps = 1\n\nsteps = 2\n");
  EXPECT_NE(dup.find("line 4"), std::string::npos);
  EXPECT_NE(dup.find("first set on line 2"), std::string::npos);
  EXPECT_EQ(message("[train]\nsteps = 1\n[reference]\nsteps = 2\n"), "no error");
}

TEST(Config, RenderRoundTrips) {
  ExperimentConfig c = small_experiment(Scenario::raw_vs_filtered, 42);
  c.output_dir = "out/dir";
  c.train.learning_rate = 0.0123456789;
  c.train.selection.gain = 3.5;
  c.dataset.pair_jitter = 1e-7;
  const std::string text = render_config(c);
  const ExperimentConfig back = parse_config(text);
  EXPECT_EQ(render_config(back), text);
  EXPECT_EQ(back.train.learning_rate, c.train.learning_rate);
  EXPECT_EQ(back.dataset.pair_jitter, c.dataset.pair_jitter);
  EXPECT_EQ(back.scenario, Scenario::raw_vs_filtered);
  EXPECT_EQ(back.output_dir, "out/dir");
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/jest.cfg"), ConfigError);
}

TEST(Config, ValidationFailuresAreConfigErrors) {
  ExperimentConfig c = small_experiment(Scenario::jest);
  c.train.selection.n_chunks = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_experiment(Scenario::jest);
  c.dataset.uncurated_size = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_experiment(Scenario::jest);
  c.reference.policy = SelectionPolicy::joint;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_experiment(Scenario::raw_vs_filtered);
  c.filtered_keep = 0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(run_experiment(c), ConfigError);
}

TEST(Config, ScenarioPolicies) {
  ExperimentConfig c;
  c.scenario = Scenario::independent;
  EXPECT_EQ(c.scenario_config().policy, SelectionPolicy::independent);
  c.scenario = Scenario::hard_learner;
  EXPECT_EQ(c.scenario_config().selection.method, ScoringMethod::hard_learner);
  c.scenario = Scenario::easy_ref;
  EXPECT_EQ(c.scenario_config().selection.method, ScoringMethod::easy_ref);
  c.scenario = Scenario::flexi_jest;
  EXPECT_TRUE(c.scenario_config().approximate_scoring);
  EXPECT_EQ(c.scenario_config().approx_fraction, 0.5);
  c.scenario = Scenario::iid_baseline;
  EXPECT_EQ(c.scenario_config().policy, SelectionPolicy::uniform);
  EXPECT_EQ(c.baseline_config().super_batch_size, c.train.sub_batch_size());
  for (const char* name : {"iid_baseline", "jest", "flexi_jest", "easy_ref", "hard_learner", "independent", "raw_vs_filtered"})
    EXPECT_STREQ(to_string(parse_scenario(name)), name);
  EXPECT_THROW(parse_scenario("nope"), ConfigError);
}

// steps-to-baseline smoothing

TEST(Summary, TrailingMeanAndStepsToReach) {
  const std::vector<EvalPoint> evals{{0, 0.0, 0}, {10, 0.2, 0}, {20, 0.4, 0}, {30, 0.6, 0}, {40, 0.8, 0}, {50, 1.0, 0}};
  EXPECT_NEAR(trailing_final(evals), 0.6, 1e-12);
  EXPECT_NEAR(trailing_final(evals, 2), 0.9, 1e-12);
  EXPECT_EQ(steps_to_reach(evals, 0.6), std::optional<std::size_t>(50));
  EXPECT_EQ(steps_to_reach(evals, 0.2), std::optional<std::size_t>(50));
  auto longer = evals;
  longer.push_back({60, 1.0, 0});
  EXPECT_EQ(steps_to_reach(longer, 0.75), std::optional<std::size_t>(60));
  EXPECT_EQ(steps_to_reach(longer, 0.8), std::nullopt);
  EXPECT_EQ(steps_to_reach(evals, 0.95), std::nullopt);
}

// run_experiment

TEST(Experiment, CsvHeaderIsGolden) {
  EXPECT_EQ(kMetricsHeader,
            "scenario,run,seed,step,loss,mean_selected_score,eval_i2t_top1,eval_t2i_top1,cumulative_flops,skipped");
  const auto r = run_experiment(small_experiment(Scenario::jest));
  EXPECT_EQ(r.csv.substr(0, r.csv.find('\n')), kMetricsHeader);
  std::istringstream in(r.csv);
  const auto t = read_csv(in);
  EXPECT_EQ(t.rows.size(), 80u);
  EXPECT_EQ(t.rows.front()[1], "iid_baseline");
  EXPECT_EQ(t.rows.back()[1], "jest");
}

TEST(Experiment, ReproducibleBitForBit) {
  const auto dir = scratch_dir("repro");
  ExperimentConfig c = small_experiment(Scenario::flexi_jest, 5);
  c.output_dir = (dir / "a").string();
  const auto a = run_experiment(c);
  c.output_dir = (dir / "b").string();
  const auto b = run_experiment(c);
  EXPECT_EQ(a.csv, b.csv);
  EXPECT_EQ(a.summary_text, b.summary_text);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), a.csv);
  EXPECT_EQ(slurp(dir / "a" / "summary.txt"), a.summary_text);
  c.seed = 6;
  c.output_dir.clear();
  EXPECT_NE(run_experiment(c).csv, a.csv);
}

TEST(Experiment, FlopsColumnMatchesFlopModel) {
  const ExperimentConfig c = small_experiment(Scenario::flexi_jest);
  const auto r = run_experiment(c);
  Rng rng(0);
  const auto shape = DualEncoderParams::random(c.dataset.input_dim, c.embed_dim, rng);
  const double base_step = flop_model_for(shape, c.baseline_config()).per_step(flops::Method::iid);
  const double flexi_step = flop_model_for(shape, c.scenario_config()).per_step(flops::Method::flexi_jest);
  std::istringstream in(r.csv);
  const auto t = read_csv(in);
  const auto run = t.column("run"), step = t.column("step"), fl = t.column("cumulative_flops");
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    const double n = std::stod(t.rows[k][step]) + 1;
    const double per = t.rows[k][run] == "iid_baseline" ? base_step : flexi_step;
    EXPECT_EQ(std::stod(t.rows[k][fl]), n * per) << k;
  }
  EXPECT_EQ(r.summary.baseline_flops, base_step * static_cast<double>(c.train.steps));
}

TEST(Experiment, IidBaselineLearnsAboveChance) {
  ExperimentConfig c;
  c.scenario = Scenario::iid_baseline;
  c.dataset.noise_rate = 0.0;
  c.train.steps = 300;
  const auto r = run_experiment(c);
  const std::size_t n = c.dataset.holdout_size;
  const auto hits = static_cast<std::size_t>(std::llround(r.runs.front().evals.back().i2t * static_cast<double>(n)));
  const boost::math::binomial_distribution<double> chance(static_cast<double>(n), 1.0 / static_cast<double>(n));
  ASSERT_GE(hits, 1u);
  EXPECT_LT(boost::math::cdf(boost::math::complement(chance, static_cast<double>(hits - 1))), 0.001);
}

TEST(Experiment, WritesSummaryFields) {
  const auto r = run_experiment(small_experiment(Scenario::raw_vs_filtered));
  ASSERT_EQ(r.runs.size(), 3u);
  EXPECT_EQ(r.runs[1].label, "raw");
  EXPECT_EQ(r.runs[2].label, "filtered");
  for (const char* key : {"scenario = raw_vs_filtered", "baseline_steps = 40", "step_ratio = ", "raw_final_i2t = ",
                          "filtered_final_i2t = "})
    EXPECT_NE(r.summary_text.find(key), std::string::npos) << key;
}

TEST(Experiment, AlignmentFilterKeepsBestAlignedRows) {
  const std::vector<float> img{1, 0, 0, 1, 1, 0, 0, 1};
  const std::vector<float> txt{1, 0, 1, 0, 0.5f, 0.5f, 0, 1};
  const ReferenceCache cache(4, 2, img, txt, ContrastiveParams{});
  EXPECT_EQ(alignment_filter(cache, 0.5), (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(alignment_filter(cache, 0.75), (std::vector<std::size_t>{0, 2, 3}));
  const auto sliced = slice_cache(cache, std::vector<std::size_t>{2});
  EXPECT_EQ(sliced.n(), 1u);
  EXPECT_EQ(sliced.text()[0], 0.5f);
}

// Runs that need the default desk-scale configuration (5 seeds each).

TEST(ExperimentProperties, HardLearnerDegradesAtHighFilterRatio) {
  const double at_half = mean_final(Scenario::hard_learner, 5, [](ExperimentConfig& c) { c.train.selection.filter_ratio = 0.5; });
  const double at_high = mean_final(Scenario::hard_learner, 5, [](ExperimentConfig& c) { c.train.selection.filter_ratio = 0.9; });
  EXPECT_LE(at_high, at_half);
}

TEST(ExperimentProperties, RawAndFilteredJestAgreeWithinTwoPoints) {
  double raw = 0.0, filtered = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig c;
    c.scenario = Scenario::raw_vs_filtered;
    c.seed = seed;
    const auto s = run_experiment(c).summary;
    raw += s.raw_final / 5;
    filtered += s.filtered_final / 5;
  }
  EXPECT_LE(std::abs(raw - filtered), 0.02) << "raw " << raw << " filtered " << filtered;
}

// emit_plots

TEST(Plots, EmptyHeaderedCsvGivesEmptyAxes) {
  const auto dir = scratch_dir("empty");
  std::ofstream(dir / "m.csv") << kMetricsHeader << '\n';
  const auto files = emit_plots(dir / "m.csv", dir / "plots");
  ASSERT_EQ(files.size(), 3u);
  for (const auto& f : files) {
    const auto svg = slurp(f);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_EQ(count(svg, "class=\"series\""), 0u);
  }
}

TEST(Plots, TwoScenariosOverlay) {
  const auto dir = scratch_dir("overlay");
  std::ofstream(dir / "m.csv") << kMetricsHeader << '\n'
                               << "jest,jest,0,0,1,0.5,0.1,0.1,10,0\n"
                               << "jest,jest,0,1,0.9,0.5,0.2,0.2,20,0\n"
                               << "iid_baseline,iid_baseline,0,0,1,0,0.05,0.05,6,0\n"
                               << "iid_baseline,iid_baseline,0,1,0.95,0,0.1,0.1,12,0\n";
  const auto files = emit_plots(dir / "m.csv", dir / "plots");
  ASSERT_EQ(files.size(), 3u);
  for (const auto& f : files) {
    const auto svg = slurp(f);
    EXPECT_EQ(count(svg, "class=\"series\""), 2u);
    EXPECT_NE(svg.find("data-label=\"jest/jest/0\""), std::string::npos);
    EXPECT_NE(svg.find("data-label=\"iid_baseline/iid_baseline/0\""), std::string::npos);
  }
  const auto flops_svg = slurp(dir / "plots" / "eval_vs_flops.svg");
  EXPECT_NE(flops_svg.find(">20<"), std::string::npos);
  EXPECT_NE(flops_svg.find(">6<"), std::string::npos);
}

TEST(Plots, FlopsAxisSpansExperimentFlops) {
  const auto dir = scratch_dir("flops_axis");
  ExperimentConfig c = small_experiment(Scenario::jest);
  c.output_dir = dir.string();
  const auto r = run_experiment(c);
  emit_plots(dir / "metrics.csv", dir / "plots");
  const auto svg = slurp(dir / "plots" / "eval_vs_flops.svg");
  EXPECT_NE(svg.find('>' + format_number(r.runs[1].metrics.back().cumulative_flops) + '<'), std::string::npos);
  EXPECT_NE(svg.find('>' + format_number(r.runs[0].metrics.front().cumulative_flops) + '<'), std::string::npos);
}

TEST(Plots, SamplerTraceGivesChunkFigure) {
  const auto dir = scratch_dir("trace");
  BenchConfig b;
  b.super_batch = 128;
  b.runs = 3;
  b.gibbs_sweeps = 5;
  b.gibbs_runs = 1;
  std::ofstream(dir / "t.csv") << run_sample_bench(b).trace_csv;
  const auto files = emit_plots(dir / "t.csv", dir / "plots");
  ASSERT_EQ(files.size(), 1u);
  EXPECT_EQ(files[0].filename(), "joint_score_vs_chunks.svg");
  EXPECT_EQ(count(slurp(files[0]), "class=\"series\""), 4u);
}

TEST(Plots, MalformedRowReportsLine) {
  const auto dir = scratch_dir("bad");
  std::ofstream(dir / "m.csv") << kMetricsHeader << '\n' << "jest,jest,0,0,1,0.5,0.1,0.1,10,0\n" << "jest,jest,0\n";
  try {
    emit_plots(dir / "m.csv", dir / "plots");
    FAIL() << "expected CsvError";
  } catch (const CsvError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::ofstream(dir / "n.csv") << kMetricsHeader << '\n' << "jest,jest,0,0,1,0.5,abc,0.1,10,0\n";
  try {
    emit_plots(dir / "n.csv", dir / "plots");
    FAIL() << "expected CsvError";
  } catch (const CsvError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::ofstream(dir / "o.csv") << "a,b\n1,2\n";
  EXPECT_THROW(emit_plots(dir / "o.csv", dir / "plots"), CsvError);
  EXPECT_THROW(emit_plots(dir / "missing.csv", dir / "plots"), std::runtime_error);
}
