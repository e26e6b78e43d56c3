#pragma once

// End-to-end experiments: pretrain a reference model on the curated set,
// cache its embeddings of the uncurated set, then train learners on the
// uncurated set under the IID baseline and the scenario's selection policy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "jest/core/errors.hpp"
#include "jest/core/rng.hpp"
#include "jest/harness/csv.hpp"
#include "jest/harness/synthetic.hpp"
#include "jest/scoring.hpp"
#include "jest/trainer.hpp"

namespace jest::harness {

enum class Scenario { iid_baseline, jest, flexi_jest, easy_ref, hard_learner, independent, raw_vs_filtered };

inline Scenario parse_scenario(std::string_view s) {
  if (s == "iid_baseline") return Scenario::iid_baseline;
  if (s == "jest") return Scenario::jest;
  if (s == "flexi_jest") return Scenario::flexi_jest;
  if (s == "easy_ref") return Scenario::easy_ref;
  if (s == "hard_learner") return Scenario::hard_learner;
  if (s == "independent") return Scenario::independent;
  if (s == "raw_vs_filtered") return Scenario::raw_vs_filtered;
  throw ConfigError("unknown scenario: " + std::string(s));
}

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::iid_baseline: return "iid_baseline";
    case Scenario::jest: return "jest";
    case Scenario::flexi_jest: return "flexi_jest";
    case Scenario::easy_ref: return "easy_ref";
    case Scenario::hard_learner: return "hard_learner";
    case Scenario::independent: return "independent";
    case Scenario::raw_vs_filtered: return "raw_vs_filtered";
  }
  return "?";
}

/// Reference pretraining defaults: plain IID on the curated set.
inline TrainConfig default_reference_config() {
  TrainConfig c;
  c.steps = 1500;
  c.super_batch_size = 64;
  c.selection.filter_ratio = 0.0;
  c.policy = SelectionPolicy::uniform;
  c.learning_rate = 0.01;
  c.warmup_fraction = 0.05;
  c.eval_every = 100;
  return c;
}

inline TrainConfig default_learner_config() {
  TrainConfig c;
  c.steps = 1500;
  c.super_batch_size = 320;
  c.selection = {4, 0.8, ScoringMethod::learnability, kDefaultScoreGain, 0};
  c.policy = SelectionPolicy::joint;
  c.learning_rate = 0.01;
  c.warmup_fraction = 0.05;
  c.eval_every = 10;
  return c;
}

struct ExperimentConfig {
  Scenario scenario = Scenario::jest;
  SyntheticDatasetSpec dataset;
  TrainConfig train = default_learner_config();
  TrainConfig reference = default_reference_config();
  std::size_t embed_dim = 16;
  std::uint64_t seed = 0;
  std::string output_dir;
  double filtered_keep = 0.5;  // raw_vs_filtered: fraction kept by the reference alignment filter

  /// Scenario-specific learner config.
  TrainConfig scenario_config() const {
    TrainConfig c = train;
    switch (scenario) {
      case Scenario::iid_baseline: return baseline_config();
      case Scenario::jest:
      case Scenario::raw_vs_filtered:
        c.policy = SelectionPolicy::joint;
        c.selection.method = ScoringMethod::learnability;
        break;
      case Scenario::flexi_jest:
        c.policy = SelectionPolicy::joint;
        c.selection.method = ScoringMethod::learnability;
        c.approximate_scoring = true;
        if (c.approx_fraction == 0.0) c.approx_fraction = 0.5;
        break;
      case Scenario::easy_ref:
        c.policy = SelectionPolicy::joint;
        c.selection.method = ScoringMethod::easy_ref;
        break;
      case Scenario::hard_learner:
        c.policy = SelectionPolicy::joint;
        c.selection.method = ScoringMethod::hard_learner;
        break;
      case Scenario::independent:
        c.policy = SelectionPolicy::independent;
        c.selection.method = ScoringMethod::learnability;
        break;
    }
    return c;
  }

  /// IID comparator: trains on b uniformly drawn examples per step.
  TrainConfig baseline_config() const {
    TrainConfig c = train;
    c.super_batch_size = train.policy == SelectionPolicy::uniform ? train.super_batch_size : train.sub_batch_size();
    c.selection.filter_ratio = 0.0;
    c.policy = SelectionPolicy::uniform;
    c.approximate_scoring = false;
    c.approx_fraction = 0.0;
    return c;
  }

  void validate() const {
    try {
      dataset.validate();
      reference.validate();
      if (reference.policy != SelectionPolicy::uniform) throw ValueError("reference training must use the uniform policy");
      scenario_config().validate();
      baseline_config().validate();
      if (embed_dim < 1) throw ValueError("embed_dim must be >= 1");
      if (!(filtered_keep > 0.0 && filtered_keep <= 1.0)) throw ValueError("filtered_keep must lie in (0, 1]");
      const std::size_t need = std::max(scenario_config().super_batch_size, reference.super_batch_size);
      if (dataset.uncurated_size < need || dataset.curated_size < reference.super_batch_size) {
        throw ValueError("dataset smaller than a super-batch");
      }
      if (scenario == Scenario::raw_vs_filtered &&
          static_cast<double>(dataset.uncurated_size) * filtered_keep < static_cast<double>(train.super_batch_size)) {
        throw ValueError("filtered dataset smaller than a super-batch");
      }
    } catch (const ValueError& e) {
      throw ConfigError(std::string("scenario ") + to_string(scenario) + ": " + e.what());
    }
  }
};

struct EvalPoint {
  std::size_t steps_done = 0;  // updates applied before this evaluation
  double i2t = 0.0;
  double t2i = 0.0;
};

struct RunResult {
  std::string label;
  DualEncoderParams params;
  std::vector<TrainMetrics> metrics;
  std::vector<EvalPoint> evals;
};

/// Trains `init` for cfg.steps updates on super-batches drawn uniformly from
/// `data`. Evaluates before training, then every cfg.eval_every steps and after
/// the last step; metrics rows carry the most recent evaluation.
inline RunResult train_run(std::string label, DualEncoderParams init, const PairInputs& data,
                           const ReferenceCache* reference, const TrainConfig& cfg, const PairInputs& holdout,
                           std::uint64_t seed) {
  cfg.validate();
  Rng data_rng(mix_seed(seed) ^ 0x5eedda7aULL);
  Rng step_rng(mix_seed(seed) ^ 0x57e95ULL);
  RunResult run{std::move(label), std::move(init), {}, {}};
  AdamState opt;

  auto [i2t, t2i] = evaluate(run.params, holdout);
  run.evals.push_back({0, i2t, t2i});
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    SuperBatch batch;
    batch.rows = uniform_sample(data.n(), cfg.super_batch_size, data_rng).indices;
    batch.inputs = data.gather(batch.rows);
    auto res = train_step(std::move(run.params), reference, batch, cfg, std::move(opt), step_rng, step);
    run.params = std::move(res.learner);
    opt = std::move(res.optimizer);
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      std::tie(i2t, t2i) = evaluate(run.params, holdout);
      run.evals.push_back({step + 1, i2t, t2i});
    }
    res.metrics.eval_i2t_top1 = i2t;
    res.metrics.eval_t2i_top1 = t2i;
    run.metrics.push_back(res.metrics);
  }
  return run;
}

/// Mean i2t over the last `window` evaluation points.
inline double trailing_final(const std::vector<EvalPoint>& evals, std::size_t window = 5) {
  if (evals.empty()) throw ValueError("trailing_final: no evaluations");
  const std::size_t k = std::min(window, evals.size());
  double s = 0.0;
  for (std::size_t i = evals.size() - k; i < evals.size(); ++i) s += evals[i].i2t;
  return s / static_cast<double>(k);
}

/// Steps taken when the trailing mean of i2t over the last `window`
/// evaluations first reaches `target`; nullopt if it never does. The
/// pre-training evaluation is excluded.
inline std::optional<std::size_t> steps_to_reach(const std::vector<EvalPoint>& evals, double target,
                                                 std::size_t window = 5) {
  double sum = 0.0;
  std::size_t first = 1;
  for (std::size_t i = 1; i < evals.size(); ++i) {
    sum += evals[i].i2t;
    if (i - first + 1 > window) sum -= evals[first++].i2t;
    const double mean = sum / static_cast<double>(i - first + 1);
    if (i - first + 1 == window && mean >= target) return evals[i].steps_done;
  }
  return std::nullopt;
}

struct ExperimentSummary {
  Scenario scenario = Scenario::jest;
  std::uint64_t seed = 0;
  double reference_final = 0.0;  // reference model on the holdout
  double baseline_final = 0.0;   // IID trailing final i2t
  double scenario_final = 0.0;
  std::size_t baseline_steps = 0;
  std::optional<std::size_t> steps_to_baseline;
  double baseline_flops = 0.0;
  std::optional<double> flops_to_baseline;
  // raw_vs_filtered only
  double raw_final = 0.0;
  double filtered_final = 0.0;

  /// steps_to_baseline / baseline_steps, +inf if the baseline is never reached.
  double step_ratio() const {
    return steps_to_baseline ? static_cast<double>(*steps_to_baseline) / static_cast<double>(baseline_steps)
                             : std::numeric_limits<double>::infinity();
  }
};

struct ExperimentResult {
  std::vector<RunResult> runs;
  ExperimentSummary summary;
  std::string csv;
  std::string summary_text;
};

inline constexpr std::string_view kMetricsHeader =
    "scenario,run,seed,step,loss,mean_selected_score,eval_i2t_top1,eval_t2i_top1,cumulative_flops,skipped";

inline std::string metrics_csv(Scenario scenario, std::uint64_t seed, const std::vector<RunResult>& runs) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& run : runs) {
    for (const auto& m : run.metrics) {
      os << to_string(scenario) << ',' << run.label << ',' << seed << ',' << m.step << ',' << format_number(m.loss)
         << ',' << format_number(m.mean_selected_score) << ',' << format_number(m.eval_i2t_top1) << ','
         << format_number(m.eval_t2i_top1) << ',' << format_number(m.cumulative_flops) << ',' << (m.skipped ? 1 : 0)
         << '\n';
    }
  }
  return os.str();
}

inline std::string summary_text(const ExperimentSummary& s) {
  std::ostringstream os;
  auto opt = [](const auto& v) { return v ? format_number(static_cast<double>(*v)) : std::string("never"); };
  os << "scenario = " << to_string(s.scenario) << '\n'
     << "seed = " << s.seed << '\n'
     << "reference_final_i2t = " << format_number(s.reference_final) << '\n'
     << "baseline_final_i2t = " << format_number(s.baseline_final) << '\n'
     << "scenario_final_i2t = " << format_number(s.scenario_final) << '\n'
     << "baseline_steps = " << s.baseline_steps << '\n'
     << "steps_to_baseline = " << opt(s.steps_to_baseline) << '\n'
     << "step_ratio = " << format_number(s.step_ratio()) << '\n'
     << "baseline_flops = " << format_number(s.baseline_flops) << '\n'
     << "flops_to_baseline = " << opt(s.flops_to_baseline) << '\n';
  if (s.scenario == Scenario::raw_vs_filtered) {
    os << "raw_final_i2t = " << format_number(s.raw_final) << '\n'
       << "filtered_final_i2t = " << format_number(s.filtered_final) << '\n';
  }
  return os.str();
}

/// Rows of `cache` whose reference image-text alignment is in the top `keep`
/// fraction, ascending.
inline std::vector<std::size_t> alignment_filter(const ReferenceCache& cache, double keep) {
  std::vector<double> align(cache.n());
  for (std::size_t i = 0; i < cache.n(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < cache.d(); ++c) s += static_cast<double>(cache.image()[i * cache.d() + c]) * cache.text()[i * cache.d() + c];
    align[i] = s;
  }
  std::vector<std::size_t> order(cache.n());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return align[a] > align[b]; });
  order.resize(static_cast<std::size_t>(std::llround(keep * static_cast<double>(cache.n()))));
  std::sort(order.begin(), order.end());
  return order;
}

inline ReferenceCache slice_cache(const ReferenceCache& cache, std::span<const std::size_t> rows) {
  std::vector<float> img, txt;
  img.reserve(rows.size() * cache.d());
  txt.reserve(rows.size() * cache.d());
  for (auto r : rows) {
    img.insert(img.end(), cache.image().begin() + static_cast<std::ptrdiff_t>(r * cache.d()),
               cache.image().begin() + static_cast<std::ptrdiff_t>((r + 1) * cache.d()));
    txt.insert(txt.end(), cache.text().begin() + static_cast<std::ptrdiff_t>(r * cache.d()),
               cache.text().begin() + static_cast<std::ptrdiff_t>((r + 1) * cache.d()));
  }
  return {rows.size(), cache.d(), std::move(img), std::move(txt), cache.params()};
}

/// Reference model trained IID on the curated set, and its embedding cache of
/// the uncurated set.
struct PreparedReference {
  DualEncoderParams params;
  ReferenceCache cache;
  double holdout_i2t = 0.0;
};

inline PreparedReference prepare_reference(const ExperimentConfig& cfg, const SyntheticData& data) {
  Rng init_rng(mix_seed(cfg.seed) ^ 0x7ef0ULL);
  auto init = DualEncoderParams::random(cfg.dataset.input_dim, cfg.embed_dim, init_rng);
  auto run = train_run("reference", std::move(init), data.curated.inputs, nullptr, cfg.reference,
                       data.holdout.inputs, mix_seed(cfg.seed) ^ 0x7ef1ULL);
  auto cache = ReferenceCache::from_batch(encode(run.params, data.uncurated.inputs), run.params.head);
  return {std::move(run.params), std::move(cache), run.evals.back().i2t};
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult result;
  ExperimentSummary& s = result.summary;
  s.scenario = cfg.scenario;
  s.seed = cfg.seed;
  try {
    Rng data_rng(mix_seed(cfg.seed) ^ mix_seed(cfg.dataset.seed));
    const SyntheticData data = generate_dataset(cfg.dataset, data_rng);
    const PreparedReference ref = prepare_reference(cfg, data);
    s.reference_final = ref.holdout_i2t;

    Rng init_rng(mix_seed(cfg.seed) ^ 0x1ea7ULL);
    const auto init = DualEncoderParams::random(cfg.dataset.input_dim, cfg.embed_dim, init_rng);
    const std::uint64_t run_seed = mix_seed(cfg.seed) ^ 0x12c0ULL;

    const TrainConfig base_cfg = cfg.baseline_config();
    result.runs.push_back(
        train_run("iid_baseline", init, data.uncurated.inputs, &ref.cache, base_cfg, data.holdout.inputs, run_seed));
    const RunResult& baseline = result.runs.front();
    s.baseline_final = trailing_final(baseline.evals);
    s.baseline_steps = base_cfg.steps;
    s.baseline_flops = baseline.metrics.back().cumulative_flops;

    if (cfg.scenario == Scenario::iid_baseline) {
      s.scenario_final = s.baseline_final;
      s.steps_to_baseline = steps_to_reach(baseline.evals, s.baseline_final);
    } else if (cfg.scenario == Scenario::raw_vs_filtered) {
      const TrainConfig jest_cfg = cfg.scenario_config();
      result.runs.push_back(
          train_run("raw", init, data.uncurated.inputs, &ref.cache, jest_cfg, data.holdout.inputs, run_seed));
      const auto keep = alignment_filter(ref.cache, cfg.filtered_keep);
      const PairInputs filtered = data.uncurated.inputs.gather(keep);
      const ReferenceCache filtered_cache = slice_cache(ref.cache, keep);
      result.runs.push_back(
          train_run("filtered", init, filtered, &filtered_cache, jest_cfg, data.holdout.inputs, run_seed));
      s.raw_final = trailing_final(result.runs[1].evals);
      s.filtered_final = trailing_final(result.runs[2].evals);
      s.scenario_final = s.raw_final;
      s.steps_to_baseline = steps_to_reach(result.runs[1].evals, s.baseline_final);
    } else {
      const TrainConfig scen_cfg = cfg.scenario_config();
      result.runs.push_back(
          train_run(to_string(cfg.scenario), init, data.uncurated.inputs, &ref.cache, scen_cfg, data.holdout.inputs, run_seed));
      s.scenario_final = trailing_final(result.runs[1].evals);
      s.steps_to_baseline = steps_to_reach(result.runs[1].evals, s.baseline_final);
    }
    if (s.steps_to_baseline) {
      const auto& runs = result.runs;
      const auto& metrics = runs.size() > 1 ? runs[1].metrics : runs[0].metrics;
      s.flops_to_baseline = metrics[*s.steps_to_baseline - 1].cumulative_flops;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("scenario ") + to_string(cfg.scenario) + ": " + e.what());
  }

  result.csv = metrics_csv(cfg.scenario, cfg.seed, result.runs);
  result.summary_text = summary_text(s);
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    std::ofstream(std::filesystem::path(cfg.output_dir) / "metrics.csv", std::ios::binary) << result.csv;
    std::ofstream(std::filesystem::path(cfg.output_dir) / "summary.txt", std::ios::binary) << result.summary_text;
  }
  return result;
}

}  // namespace jest::harness
