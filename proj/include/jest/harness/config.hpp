#pragma once

// Line-oriented experiment config:
//
//   # comment
//   [section]
//   key = value
//
// Sections: experiment, dataset, train, selection, reference. [train] and
// [reference] accept the same keys; [selection] applies to the learner.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "jest/core/errors.hpp"
#include "jest/harness/csv.hpp"
#include "jest/harness/experiment.hpp"

namespace jest::harness {

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

using Table = std::map<std::string, Field, std::less<>>;

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    out = static_cast<T>(std::stod(v, &used));
    if (used != v.size()) throw std::invalid_argument(v);
  } else {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument(v);
  }
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument(v);
}

template <typename T>
Field number(T& ref) {
  return {[&ref](const std::string& v) { ref = parse_number<T>(v); },
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) return format_number(ref);
            else return std::to_string(ref);
          }};
}

inline Field boolean(bool& ref) {
  return {[&ref](const std::string& v) { ref = parse_bool(v); }, [&ref] { return std::string(ref ? "true" : "false"); }};
}

inline Table train_table(TrainConfig& t) {
  return {
      {"steps", number(t.steps)},
      {"super_batch_size", number(t.super_batch_size)},
      {"policy", {[&t](const std::string& v) { t.policy = parse_selection_policy(v); }, [&t] { return std::string(to_string(t.policy)); }}},
      {"loss", {[&t](const std::string& v) {
                  if (v == "sigmoid") t.loss_kind = LossKind::sigmoid;
                  else if (v == "softmax") t.loss_kind = LossKind::softmax;
                  else throw std::invalid_argument(v);
                },
                [&t] { return std::string(to_string(t.loss_kind)); }}},
      {"approx_fraction", number(t.approx_fraction)},
      {"approx_factor", number(t.approx_factor)},
      {"approx_method", {[&t](const std::string& v) { t.approx_method = parse_approx_method(v); }, [&t] { return std::string(to_string(t.approx_method)); }}},
      {"approximate_scoring", boolean(t.approximate_scoring)},
      {"count_reference_scoring", boolean(t.count_reference_scoring)},
      {"learning_rate", number(t.learning_rate)},
      {"warmup_fraction", number(t.warmup_fraction)},
      {"adam_beta1", number(t.adam_beta1)},
      {"adam_beta2", number(t.adam_beta2)},
      {"adam_epsilon", number(t.adam_epsilon)},
      {"weight_decay", number(t.weight_decay)},
      {"grad_clip_norm", number(t.grad_clip_norm)},
      {"eval_every", number(t.eval_every)},
  };
}

inline std::map<std::string, Table, std::less<>> tables(ExperimentConfig& c) {
  auto& d = c.dataset;
  auto& s = c.train.selection;
  return {
      {"experiment",
       {
           {"scenario", {[&c](const std::string& v) { c.scenario = parse_scenario(v); }, [&c] { return std::string(to_string(c.scenario)); }}},
           {"seed", number(c.seed)},
           {"output_dir", {[&c](const std::string& v) { c.output_dir = v; }, [&c] { return c.output_dir; }}},
           {"embed_dim", number(c.embed_dim)},
           {"filtered_keep", number(c.filtered_keep)},
       }},
      {"dataset",
       {
           {"latent_dim", number(d.latent_dim)},
           {"input_dim", number(d.input_dim)},
           {"n_concepts", number(d.n_concepts)},
           {"noise_rate", number(d.noise_rate)},
           {"curated_size", number(d.curated_size)},
           {"uncurated_size", number(d.uncurated_size)},
           {"holdout_size", number(d.holdout_size)},
           {"concept_scale", number(d.concept_scale)},
           {"item_spread", number(d.item_spread)},
           {"feature_noise", number(d.feature_noise)},
           {"pair_jitter", number(d.pair_jitter)},
           {"seed", number(d.seed)},
       }},
      {"train", train_table(c.train)},
      {"reference", train_table(c.reference)},
      {"selection",
       {
           {"n_chunks", number(s.n_chunks)},
           {"filter_ratio", number(s.filter_ratio)},
           {"method", {[&s](const std::string& v) { s.method = parse_scoring_method(v); }, [&s] { return std::string(to_string(s.method)); }}},
           {"gain", number(s.gain)},
       }},
  };
}

}  // namespace config_detail

/// Applies `text` on top of the defaults. Errors name the offending line.
inline ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  auto tables = config_detail::tables(cfg);
  std::map<std::string, std::size_t> seen;  // "section.key" -> line
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = config_detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = config_detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!tables.contains(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of a section");
    const std::string key = config_detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = config_detail::trim(std::string_view(line).substr(eq + 1));
    auto& table = tables.find(section)->second;
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    const std::string full = section + "." + key;
    if (auto prev = seen.find(full); prev != seen.end()) {
      throw ConfigError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(prev->second) + ")");
    }
    seen[full] = lineno;
    try {
      it->second.set(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const std::exception&) {
      throw ConfigError(where + "invalid value '" + value + "' for " + full);
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text for a config; parse_config(render_config(c)) reproduces c.
inline std::string render_config(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  auto tables = config_detail::tables(copy);
  std::ostringstream os;
  bool first = true;
  for (const char* name : {"experiment", "dataset", "train", "selection", "reference"}) {
    if (!first) os << '\n';
    first = false;
    os << '[' << name << "]\n";
    for (const auto& [key, field] : tables.find(name)->second) os << key << " = " << field.get() << '\n';
  }
  return os.str();
}

}  // namespace jest::harness
