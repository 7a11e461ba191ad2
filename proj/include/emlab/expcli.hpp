#pragma once

// Experiment orchestration: config files, multi-seed runs, analyses and
// cross-seed reports.
//
// Config files are sectioned key = value text:
//
//   [train]
//   lr = 0.001
//   batch_size = 64
//   total_steps = 10000
//
// Unknown sections or keys are errors, as are duplicates. `#` starts a
// comment. serialize_config() emits every key in a fixed order, which is the
// canonical form.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "emlab/commutator.hpp"
#include "emlab/errors.hpp"
#include "emlab/geometry.hpp"
#include "emlab/model.hpp"
#include "emlab/sae.hpp"
#include "emlab/taskgen.hpp"
#include "emlab/trainer.hpp"
#include "emlab/trajstore.hpp"

namespace emlab {

struct AnalysisConfig {
  bool rank = true;
  double tau = 0.90;
  std::size_t k_per_block = 0;  ///< 0: min(r90, 8) per block

  bool commutator = true;
  std::size_t probe_every = 100;
  std::size_t trials = 3;
  std::size_t random_trials = 10;
  std::size_t probe_batch = 64;

  bool sae = true;
  std::size_t sae_hidden = 0;  ///< 0: 4 * embed_dim
  double sae_lambda = 1e-3;
  double sae_lr = 0.05;
  std::size_t sae_steps = 4000;
  std::size_t sae_batch = 256;
  std::size_t capture_layer = 1;
  bool capture_eos_only = true;
  std::size_t sae_activations = 10000;
  std::size_t sae_eval_size = 2048;

  friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

struct ExperimentConfig {
  // [train]
  double lr = 0.001;
  std::size_t batch_size = 64;
  std::size_t total_steps = 10000;
  std::size_t checkpoint_every = 100;
  std::size_t eval_size = 2048;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  // [task]
  TaskSpec task;  ///< num_markers / mixed_markers unused; see below
  ScheduleKind schedule = ScheduleKind::mixed;
  std::vector<std::size_t> markers{1, 2, 3, 4};
  /// (m, steps) stages; empty means an equal split of total_steps over `markers`.
  std::vector<std::pair<std::size_t, std::size_t>> curriculum;
  // [model]
  std::size_t embed_dim = 128;
  std::size_t num_layers = 2;
  Variant variant = Variant::attention_only;
  std::size_t mlp_hidden = 0;
  double init_std = 0.02;

  AnalysisConfig analysis;
  std::string out_dir = "runs";

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// Value codecs

namespace cfg {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty())
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return v;
}

inline std::size_t parse_size(const std::string& s) { return static_cast<std::size_t>(parse_u64(s)); }

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "on" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "off" || s == "no" || s == "0") return false;
  throw std::invalid_argument("expected true/false, got '" + s + "'");
}

inline std::string fmt_bool(bool b) { return b ? "true" : "false"; }

/// "0,1,2" or ranges like "0-4", mixed freely.
inline std::vector<std::uint64_t> parse_u64_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  if (trim(s).empty()) return out;
  for (const auto& part : split(s, ',')) {
    const auto dash = part.find('-');
    if (dash != std::string::npos && dash > 0) {
      const auto lo = parse_u64(trim(part.substr(0, dash)));
      const auto hi = parse_u64(trim(part.substr(dash + 1)));
      if (hi < lo) throw std::invalid_argument("empty range '" + part + "'");
      for (auto v = lo; v <= hi; ++v) out.push_back(v);
    } else {
      out.push_back(parse_u64(part));
    }
  }
  return out;
}

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct KeyDef {
  std::string section;
  std::string key;
  bool required = false;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<KeyDef>& key_table() {
  using E = ExperimentConfig;
  static const std::vector<KeyDef> table = [] {
    std::vector<KeyDef> t;
    auto add = [&t](std::string sec, std::string key, bool req, auto set, auto get) {
      t.push_back({std::move(sec), std::move(key), req, set, get});
    };
    // [train]
    add("train", "lr", true, [](E& e, const std::string& v) { e.lr = parse_double(v); },
        [](const E& e) { return fmt_double(e.lr); });
    add("train", "batch_size", true, [](E& e, const std::string& v) { e.batch_size = parse_size(v); },
        [](const E& e) { return std::to_string(e.batch_size); });
    add("train", "total_steps", true, [](E& e, const std::string& v) { e.total_steps = parse_size(v); },
        [](const E& e) { return std::to_string(e.total_steps); });
    add("train", "checkpoint_every", false, [](E& e, const std::string& v) { e.checkpoint_every = parse_size(v); },
        [](const E& e) { return std::to_string(e.checkpoint_every); });
    add("train", "eval_size", false, [](E& e, const std::string& v) { e.eval_size = parse_size(v); },
        [](const E& e) { return std::to_string(e.eval_size); });
    add("train", "seeds", false, [](E& e, const std::string& v) { e.seeds = parse_u64_list(v); },
        [](const E& e) { return fmt_list(e.seeds); });
    // [task]
    add("task", "seq_len", false, [](E& e, const std::string& v) { e.task.seq_len = parse_size(v); },
        [](const E& e) { return std::to_string(e.task.seq_len); });
    add("task", "modulus", false, [](E& e, const std::string& v) { e.task.modulus = parse_size(v); },
        [](const E& e) { return std::to_string(e.task.modulus); });
    add("task", "op", false, [](E& e, const std::string& v) { e.task.op = parse_task_op(v); },
        [](const E& e) { return std::string(to_string(e.task.op)); });
    add("task", "num_distractors", false, [](E& e, const std::string& v) { e.task.num_distractors = parse_size(v); },
        [](const E& e) { return std::to_string(e.task.num_distractors); });
    add("task", "schedule", false,
        [](E& e, const std::string& v) {
          if (v == "mixed")
            e.schedule = ScheduleKind::mixed;
          else if (v == "curriculum")
            e.schedule = ScheduleKind::curriculum;
          else
            throw std::invalid_argument("expected mixed or curriculum, got '" + v + "'");
        },
        [](const E& e) { return std::string(e.schedule == ScheduleKind::mixed ? "mixed" : "curriculum"); });
    add("task", "markers", false,
        [](E& e, const std::string& v) {
          e.markers.clear();
          for (auto x : parse_u64_list(v)) e.markers.push_back(static_cast<std::size_t>(x));
        },
        [](const E& e) { return fmt_list(e.markers); });
    add("task", "curriculum", false,
        [](E& e, const std::string& v) {
          e.curriculum.clear();
          if (trim(v).empty()) return;
          for (const auto& part : split(v, ',')) {
            const auto colon = part.find(':');
            if (colon == std::string::npos) throw std::invalid_argument("expected m:steps, got '" + part + "'");
            e.curriculum.emplace_back(parse_size(trim(part.substr(0, colon))), parse_size(trim(part.substr(colon + 1))));
          }
        },
        [](const E& e) {
          std::string out;
          for (std::size_t i = 0; i < e.curriculum.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(e.curriculum[i].first) + ":" + std::to_string(e.curriculum[i].second);
          }
          return out;
        });
    // [model]
    add("model", "embed_dim", false, [](E& e, const std::string& v) { e.embed_dim = parse_size(v); },
        [](const E& e) { return std::to_string(e.embed_dim); });
    add("model", "num_layers", false, [](E& e, const std::string& v) { e.num_layers = parse_size(v); },
        [](const E& e) { return std::to_string(e.num_layers); });
    add("model", "variant", false, [](E& e, const std::string& v) { e.variant = parse_variant(v); },
        [](const E& e) { return std::string(to_string(e.variant)); });
    add("model", "mlp_hidden", false, [](E& e, const std::string& v) { e.mlp_hidden = parse_size(v); },
        [](const E& e) { return std::to_string(e.mlp_hidden); });
    add("model", "init_std", false, [](E& e, const std::string& v) { e.init_std = parse_double(v); },
        [](const E& e) { return fmt_double(e.init_std); });
    // [geometry]
    add("geometry", "rank", false, [](E& e, const std::string& v) { e.analysis.rank = parse_bool(v); },
        [](const E& e) { return fmt_bool(e.analysis.rank); });
    add("geometry", "tau", false, [](E& e, const std::string& v) { e.analysis.tau = parse_double(v); },
        [](const E& e) { return fmt_double(e.analysis.tau); });
    add("geometry", "k_per_block", false, [](E& e, const std::string& v) { e.analysis.k_per_block = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.k_per_block); });
    // [commutator]
    add("commutator", "enabled", false, [](E& e, const std::string& v) { e.analysis.commutator = parse_bool(v); },
        [](const E& e) { return fmt_bool(e.analysis.commutator); });
    add("commutator", "probe_every", false, [](E& e, const std::string& v) { e.analysis.probe_every = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.probe_every); });
    add("commutator", "trials", false, [](E& e, const std::string& v) { e.analysis.trials = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.trials); });
    add("commutator", "random_trials", false,
        [](E& e, const std::string& v) { e.analysis.random_trials = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.random_trials); });
    add("commutator", "probe_batch", false, [](E& e, const std::string& v) { e.analysis.probe_batch = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.probe_batch); });
    // [sae]
    add("sae", "enabled", false, [](E& e, const std::string& v) { e.analysis.sae = parse_bool(v); },
        [](const E& e) { return fmt_bool(e.analysis.sae); });
    add("sae", "hidden", false, [](E& e, const std::string& v) { e.analysis.sae_hidden = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.sae_hidden); });
    add("sae", "lambda", false, [](E& e, const std::string& v) { e.analysis.sae_lambda = parse_double(v); },
        [](const E& e) { return fmt_double(e.analysis.sae_lambda); });
    add("sae", "lr", false, [](E& e, const std::string& v) { e.analysis.sae_lr = parse_double(v); },
        [](const E& e) { return fmt_double(e.analysis.sae_lr); });
    add("sae", "steps", false, [](E& e, const std::string& v) { e.analysis.sae_steps = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.sae_steps); });
    add("sae", "batch_size", false, [](E& e, const std::string& v) { e.analysis.sae_batch = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.sae_batch); });
    add("sae", "capture_layer", false, [](E& e, const std::string& v) { e.analysis.capture_layer = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.capture_layer); });
    add("sae", "capture", false,
        [](E& e, const std::string& v) {
          if (v == "eos_only")
            e.analysis.capture_eos_only = true;
          else if (v == "all_positions")
            e.analysis.capture_eos_only = false;
          else
            throw std::invalid_argument("expected eos_only or all_positions, got '" + v + "'");
        },
        [](const E& e) { return std::string(e.analysis.capture_eos_only ? "eos_only" : "all_positions"); });
    add("sae", "activations", false, [](E& e, const std::string& v) { e.analysis.sae_activations = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.sae_activations); });
    add("sae", "eval_size", false, [](E& e, const std::string& v) { e.analysis.sae_eval_size = parse_size(v); },
        [](const E& e) { return std::to_string(e.analysis.sae_eval_size); });
    // [output]
    add("output", "dir", false, [](E& e, const std::string& v) { e.out_dir = v; },
        [](const E& e) { return e.out_dir; });
    return t;
  }();
  return table;
}

}  // namespace cfg

// ---------------------------------------------------------------------------
// Derived configs

inline std::vector<CurriculumStage> curriculum_stages(const ExperimentConfig& e) {
  std::vector<std::pair<std::size_t, std::size_t>> plan = e.curriculum;
  if (plan.empty()) {
    const std::size_t k = e.markers.size();
    if (k == 0) return {};
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t steps = e.total_steps / k + (i + 1 == k ? e.total_steps % k : 0);
      plan.emplace_back(e.markers[i], steps);
    }
  }
  std::vector<CurriculumStage> out;
  for (const auto& [m, steps] : plan) {
    TaskSpec s = e.task;
    s.mixed_markers.clear();
    s.num_markers = m;
    out.push_back({s, steps});
  }
  return out;
}

inline TrainConfig train_config_for(const ExperimentConfig& e, std::uint64_t seed, ScheduleKind kind) {
  TrainConfig c;
  c.lr = e.lr;
  c.batch_size = e.batch_size;
  c.total_steps = e.total_steps;
  c.checkpoint_every = e.checkpoint_every;
  c.seed = seed;
  c.eval_size = e.eval_size;
  TaskSpec base = e.task;
  base.mixed_markers.clear();
  c.schedule = kind == ScheduleKind::mixed ? Schedule::mixed(base, e.markers) : Schedule::curriculum(curriculum_stages(e));
  c.model = ModelConfig::for_task(base, e.embed_dim, e.num_layers, e.variant);
  c.model.mlp_hidden = e.mlp_hidden;
  c.model.init_std = e.init_std;
  return c;
}

inline TrainConfig train_config_for(const ExperimentConfig& e, std::uint64_t seed) {
  return train_config_for(e, seed, e.schedule);
}

inline void validate(const ExperimentConfig& e) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (e.seeds.empty()) fail("[train] seeds: seed list is empty");
  if (e.markers.empty()) fail("[task] markers: marker set is empty");
  if (e.out_dir.empty()) fail("[output] dir: empty output directory");
  if (e.schedule == ScheduleKind::curriculum || !e.curriculum.empty()) {
    std::size_t sum = 0;
    for (const auto& st : curriculum_stages(e)) sum += st.steps;
    if (!e.curriculum.empty() && sum != e.total_steps)
      fail("[task] curriculum: stage steps sum to " + std::to_string(sum) + ", expected total_steps " +
           std::to_string(e.total_steps));
  }
  if (e.analysis.probe_every == 0 || e.analysis.probe_every % e.checkpoint_every != 0)
    fail("[commutator] probe_every: must be a positive multiple of checkpoint_every");
  if (e.analysis.trials == 0) fail("[commutator] trials: must be >= 1");
  if (e.analysis.random_trials == 0) fail("[commutator] random_trials: must be >= 1");
  if (!(e.analysis.tau > 0.0 && e.analysis.tau <= 1.0)) fail("[geometry] tau: must be in (0, 1]");
  if (e.analysis.capture_layer >= e.num_layers) fail("[sae] capture_layer: must be < num_layers");
  try {
    validate(train_config_for(e, e.seeds.front(), ScheduleKind::mixed));
    validate(train_config_for(e, e.seeds.front(), ScheduleKind::curriculum));
  } catch (const ContractViolation& err) {
    fail(err.what());
  }
}

// ---------------------------------------------------------------------------
// Parse / serialize

inline ExperimentConfig parse_config(std::string_view text, const std::string& origin = "<config>") {
  const auto& table = cfg::key_table();
  std::set<std::string> sections;
  for (const auto& k : table) sections.insert(k.section);

  ExperimentConfig e;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const auto where = origin + ":" + std::to_string(line_no) + ": ";
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = cfg::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = cfg::trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = cfg::trim(line.substr(0, eq));
    const std::string value = cfg::trim(line.substr(eq + 1));
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const cfg::KeyDef& k) { return k.section == section && k.key == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    const std::string full = section + "." + key;
    if (!seen.insert(full).second) throw ConfigError(where + "duplicate key '" + key + "' in [" + section + "]");
    try {
      it->set(e, value);
    } catch (const std::exception& err) {
      throw ConfigError(where + "[" + section + "] " + key + ": " + err.what());
    }
  }
  for (const auto& k : table)
    if (k.required && !seen.count(k.section + "." + k.key))
      throw ConfigError(origin + ": missing required key '" + k.key + "' in [" + k.section + "]");
  validate(e);
  return e;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

inline std::string serialize_config(const ExperimentConfig& e) {
  std::string out, section;
  for (const auto& k : cfg::key_table()) {
    if (k.section != section) {
      if (!section.empty()) out += '\n';
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.key + " = " + k.get(e) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Jobs

/// Runs tasks on up to `jobs` threads; rethrows the first failure.
inline void run_jobs(const std::vector<std::function<void()>>& tasks, std::size_t jobs) {
  jobs = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (jobs == 1) {
    for (const auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < tasks.size(); i = next++) {
        try {
          tasks[i]();
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

// ---------------------------------------------------------------------------
// Training

namespace fs = std::filesystem;

inline std::string schedule_name(ScheduleKind k) { return k == ScheduleKind::mixed ? "mixed" : "curriculum"; }

inline std::string run_id_for(const TrainConfig& c) {
  return schedule_name(c.schedule.kind) + "-" + std::string(to_string(c.schedule.base.op)) + "-seed" +
         std::to_string(c.seed);
}

inline fs::path run_dir_for(const fs::path& root, std::uint64_t seed) { return root / ("seed_" + std::to_string(seed)); }

/// True when `dir` holds a finished run of exactly `c`.
inline bool run_complete(const fs::path& dir, const TrainConfig& c) {
  if (!fs::exists(dir / "manifest.json") || !fs::exists(dir / "metrics.csv")) return false;
  try {
    const auto m = read_manifest(dir);
    if (!(train_config_from_json(m.config) == c)) return false;
    std::size_t last = 0;
    for (const auto& e : m.checkpoints) last = std::max(last, e.step);
    const std::size_t expected_rows = c.total_steps / c.checkpoint_every + 1;
    return last == c.total_steps - c.total_steps % c.checkpoint_every &&
           m.checkpoints.size() == expected_rows &&
           read_metrics_csv(dir / "metrics.csv").rows.size() == expected_rows;
  } catch (const std::exception&) {
    return false;
  }
}

using LogFn = std::function<void(const std::string&)>;

/// Trains into `dir` unless a finished identical run is already there;
/// resumes an interrupted identical run. Progress is logged every
/// `log_every` steps (0: every checkpoint).
inline void ensure_run(const TrainConfig& c, const fs::path& dir, const LogFn& log = {}, std::size_t log_every = 0) {
  if (run_complete(dir, c)) {
    if (log) log("cached " + dir.string());
    return;
  }
  TrainOptions opts;
  bool resumable = false;
  if (fs::exists(dir / "state.bin") && fs::exists(dir / "manifest.json")) {
    try {
      auto old = train_config_from_json(read_manifest(dir).config);
      old.total_steps = c.total_steps;
      resumable = old == c;
    } catch (const std::exception&) {
      resumable = false;
    }
  }
  if (resumable) {
    opts.resume = true;
  } else if (fs::exists(dir)) {
    fs::remove_all(dir);
  }
  if (log) {
    const std::string id = dir.string();
    opts.on_row = [log, id, log_every](const MetricsRow& r) {
      if (log_every > 0 && r.step % log_every != 0) return;
      std::ostringstream os;
      os << id << " step " << r.step << " loss " << r.train_loss << " acc " << r.eval.accuracy;
      log(os.str());
    };
  }
  train_run(c, dir, run_id_for(c), opts);
}

inline void write_text(const fs::path& path, const std::string& text) { detail::write_file_atomic(path, text); }

/// One run per seed under exp.out_dir; returns the run directories.
inline std::vector<fs::path> cmd_train(const ExperimentConfig& e, std::size_t jobs = 1, const LogFn& log = {}) {
  validate(e);
  const fs::path root = e.out_dir;
  fs::create_directories(root);
  std::vector<fs::path> dirs;
  std::vector<std::function<void()>> tasks;
  for (auto seed : e.seeds) {
    const fs::path dir = run_dir_for(root, seed);
    dirs.push_back(dir);
    tasks.push_back([&e, seed, dir, log] {
      ensure_run(train_config_for(e, seed), dir, log);
      write_text(dir / "experiment.cfg", serialize_config(e));
    });
  }
  run_jobs(tasks, jobs);
  return dirs;
}

// ---------------------------------------------------------------------------
// Analyses

/// Experiment settings stored beside a run, or defaults shaped to its config.
inline ExperimentConfig experiment_for_run(const fs::path& dir) {
  if (fs::exists(dir / "experiment.cfg")) return load_config(dir / "experiment.cfg");
  const auto tc = train_config_from_json(read_manifest(dir).config);
  ExperimentConfig e;
  e.lr = tc.lr;
  e.batch_size = tc.batch_size;
  e.total_steps = tc.total_steps;
  e.checkpoint_every = tc.checkpoint_every;
  e.eval_size = tc.eval_size;
  e.seeds = {tc.seed};
  e.task = tc.schedule.base;
  e.task.mixed_markers.clear();
  e.schedule = tc.schedule.kind;
  e.markers = tc.schedule.marker_counts();
  e.embed_dim = tc.model.embed_dim;
  e.num_layers = tc.model.num_layers;
  e.variant = tc.model.variant;
  e.mlp_hidden = tc.model.mlp_hidden;
  e.init_std = tc.model.init_std;
  e.out_dir = dir.parent_path().string();
  return e;
}

inline std::vector<std::string> attention_tensor_names(const RunManifest& m) {
  std::vector<std::string> out;
  for (const auto& s : attention_slots(m.layout)) out.push_back(s.name);
  return out;
}

inline std::string role_of(const std::string& tensor) {
  const auto dot = tensor.rfind('.');
  return dot == std::string::npos ? tensor : tensor.substr(dot + 1);
}

inline std::vector<RankRecord> analyze_rank(const fs::path& dir, const ExperimentConfig& e) {
  const auto m = read_manifest(dir);
  const auto names = attention_tensor_names(m);
  const auto traj = load_trajectory(dir, names);
  const auto recs = rank_timeseries(traj, names, e.analysis.tau);
  std::ostringstream os;
  write_rank_csv(os, recs);
  write_text(dir / "rank.csv", os.str());

  // Per-role mean across layers.
  std::map<std::pair<std::size_t, std::string>, std::pair<double, int>> acc;
  for (const auto& r : recs) {
    auto& a = acc[{r.step, role_of(r.tensor)}];
    a.first += static_cast<double>(r.r90);
    a.second += 1;
  }
  std::ostringstream rs;
  rs << "step,role,mean_r90\n";
  for (const auto& [key, v] : acc) rs << key.first << ',' << key.second << ',' << v.first / v.second << '\n';
  write_text(dir / "rank_roles.csv", rs.str());
  return recs;
}

struct EntropyRow {
  std::size_t step = 0;
  std::vector<double> per_layer;
  double mean = 0.0;
};

inline std::vector<EntropyRow> analyze_entropy(const fs::path& dir) {
  if (!fs::exists(dir / "metrics.csv")) throw IntegrityError("missing metrics.csv in " + dir.string());
  const auto t = read_metrics_csv(dir / "metrics.csv");
  std::vector<EntropyRow> out;
  std::ostringstream os;
  os << "step";
  for (std::size_t l = 0; l < t.num_layers; ++l) os << ",entropy_l" << l + 1;
  os << ",entropy_mean\n";
  os.precision(10);
  for (const auto& r : t.rows) {
    EntropyRow e{r.step, r.eval.eos_entropy, 0.0};
    for (double x : e.per_layer) e.mean += x / static_cast<double>(e.per_layer.size());
    os << e.step;
    for (double x : e.per_layer) os << ',' << x;
    os << ',' << e.mean << '\n';
    out.push_back(std::move(e));
  }
  write_text(dir / "entropy.csv", os.str());
  return out;
}

inline std::vector<CommutatorRecord> analyze_commutator(const fs::path& dir, const ExperimentConfig& e,
                                                        const LogFn& log = {}) {
  CommutatorOptions opts;
  opts.probe_every = e.analysis.probe_every;
  opts.trials_per_step = e.analysis.trials;
  opts.random_trials = e.analysis.random_trials;
  opts.probe_batch = e.analysis.probe_batch;
  opts.basis.tau = e.analysis.tau;
  if (e.analysis.k_per_block > 0) opts.basis.k_per_block = e.analysis.k_per_block;
  if (log) {
    opts.basis.warn = log;
    opts.on_record = [log, dir](const CommutatorRecord& r) {
      if (!r.is_mean()) return;
      std::ostringstream os;
      os << dir.string() << " probe " << r.step << " D " << r.defect << " ratio " << r.ratio << " perp "
         << r.perp_fraction << " K " << r.k;
      log(os.str());
    };
  }
  const auto recs = commutator_timeseries(dir, opts);
  std::ostringstream a, b;
  write_commutator_csv(a, recs);
  write_commutator_full_csv(b, recs);
  write_text(dir / "commutator.csv", a.str());
  write_text(dir / "commutator_full.csv", b.str());
  return recs;
}

/// Checkpoint step nearest below `fraction` of the run.
inline std::size_t stage_step(const RunManifest& m, double fraction, std::size_t total_steps) {
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total_steps)));
  std::size_t best = 0;
  for (const auto& c : m.checkpoints)
    if (c.step <= target) best = std::max(best, c.step);
  return best;
}

struct SaeStageSummary {
  std::string stage;
  std::size_t step = 0;
  double raw_acc = 0.0;
  double splice_acc = 0.0;
  double top_ablated_acc = 0.0;
  double recon_error = 0.0;
  std::vector<std::size_t> top;
  std::vector<double> top_corr;
};

inline std::vector<SaeStageSummary> analyze_sae(const fs::path& dir, const ExperimentConfig& e, const LogFn& log = {}) {
  const auto m = read_manifest(dir);
  const auto tc = train_config_from_json(m.config);
  const auto counts = tc.schedule.marker_counts();
  TaskSpec mixed = tc.schedule.base;
  mixed.mixed_markers = counts;
  const EvalSet eval = make_eval_set(tc.schedule.base, counts, e.analysis.sae_eval_size, tc.seed);

  SaeConfig sc;
  sc.input_dim = tc.model.embed_dim;
  sc.hidden = e.analysis.sae_hidden == 0 ? 4 * tc.model.embed_dim : e.analysis.sae_hidden;
  sc.lambda = e.analysis.sae_lambda;
  sc.lr = e.analysis.sae_lr;
  sc.steps = e.analysis.sae_steps;
  sc.batch_size = e.analysis.sae_batch;
  sc.capture = {e.analysis.capture_layer, e.analysis.capture_eos_only};

  std::vector<SaeRow> rows;
  std::vector<SaeStageSummary> out;
  std::ostringstream latents;
  latents << "checkpoint_stage,latent,corr_m,freq";
  for (std::size_t b = 0; b < kPositionBuckets; ++b) latents << ",mean_bucket" << b;
  latents << '\n';
  latents.precision(10);
  const std::pair<const char*, double> stages[] = {{"early", 0.1}, {"mid", 0.5}, {"late", 1.0}};
  for (const auto& [name, frac] : stages) {
    const std::size_t step = stage_step(m, frac, tc.total_steps);
    const auto ck = load_checkpoint(dir / checkpoint_filename(step));
    const ModelParams p = unflatten(ck.values, tc.model);
    Rng act_rng(tc.seed, stream_label("sae-acts", step));
    const auto set = collect_activations(p, mixed, e.analysis.sae_activations, act_rng, sc.capture);
    Rng train_rng(tc.seed, stream_label("sae-train", step));
    const auto sae = train_sae(set.acts, sc, train_rng).params;
    const auto report = latent_correlations(sae, set, tc.model.seq_len);

    SaeStageSummary s;
    s.stage = name;
    s.step = step;
    s.raw_acc = evaluate(p, eval).accuracy;
    s.recon_error = reconstruction_error(sae, set.acts);
    s.top = report.top;
    for (std::size_t j : report.top) {
      const auto r = ablate_and_eval(p, sae, {j}, eval, sc.capture);
      s.splice_acc = r.baseline;
      rows.push_back({name, std::to_string(j), report.latents[j].corr_m, report.latents[j].frequency, r.baseline,
                      r.ablated, s.raw_acc});
      s.top_corr.push_back(report.latents[j].corr_m);
    }
    const auto joint = ablate_and_eval(p, sae, report.top, eval, sc.capture);
    s.splice_acc = joint.baseline;
    s.top_ablated_acc = joint.ablated;
    double mc = 0, mf = 0;
    for (std::size_t j : report.top) {
      mc += report.latents[j].corr_m / static_cast<double>(report.top.size());
      mf += report.latents[j].frequency / static_cast<double>(report.top.size());
    }
    rows.push_back({name, "top" + std::to_string(report.top.size()), mc, mf, joint.baseline, joint.ablated, s.raw_acc});
    for (const auto& l : report.latents) {
      latents << name << ',' << l.latent << ',' << l.corr_m << ',' << l.frequency;
      for (double b : l.mean_by_bucket) latents << ',' << b;
      latents << '\n';
    }
    if (log) {
      std::ostringstream os;
      os << dir.string() << " sae " << name << " step " << step << " raw " << s.raw_acc << " splice " << s.splice_acc
         << " ablated " << s.top_ablated_acc << " recon " << s.recon_error;
      log(os.str());
    }
    out.push_back(std::move(s));
  }
  std::ostringstream os;
  write_sae_csv(os, rows);
  write_text(dir / "sae.csv", os.str());
  write_text(dir / "sae_latents.csv", latents.str());

  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : out)
    j.push_back({{"stage", s.stage},
                 {"step", s.step},
                 {"raw_acc", s.raw_acc},
                 {"splice_acc", s.splice_acc},
                 {"top_ablated_acc", s.top_ablated_acc},
                 {"recon_error", s.recon_error},
                 {"top_latents", s.top},
                 {"top_corr", s.top_corr}});
  write_text(dir / "sae_summary.json", j.dump(2) + "\n");
  return out;
}

struct AngleRecord {
  std::string run_a, run_b, tensor;
  std::size_t k = 0;
  std::vector<double> angles_deg;
};

/// Principal angles between each attention block's final-step principal
/// subspaces (K = min(r90, 8), the smaller of the two runs) across runs.
inline std::vector<AngleRecord> analyze_angles(const std::vector<fs::path>& dirs, const fs::path& out_csv,
                                               double tau = 0.90) {
  if (dirs.size() < 2) throw ContractViolation("angles: need at least two runs");
  struct Dirs {
    std::vector<Matrix> per_tensor;
  };
  std::vector<std::string> names;
  std::vector<Dirs> all;
  for (const auto& d : dirs) {
    const auto m = read_manifest(d);
    if (names.empty()) names = attention_tensor_names(m);
    const auto traj = load_trajectory(d, names);
    Dirs x;
    for (const auto& n : names) {
      const auto blk = snapshot_block(traj, find_tensor(traj, n));
      const auto ts = trajectory_spectrum(blk);
      const std::size_t k = std::min(effective_rank(ts.spectrum, tau), kMaxComponentsPerBlock);
      x.per_tensor.push_back(principal_directions(blk, ts, k));
    }
    all.push_back(std::move(x));
  }
  std::vector<AngleRecord> recs;
  std::ostringstream os;
  os << "run_a,run_b,tensor,index,angle_deg\n";
  os.precision(10);
  for (std::size_t a = 0; a < dirs.size(); ++a)
    for (std::size_t b = a + 1; b < dirs.size(); ++b)
      for (std::size_t t = 0; t < names.size(); ++t) {
        const auto& A = all[a].per_tensor[t];
        const auto& B = all[b].per_tensor[t];
        AngleRecord r{dirs[a].filename().string(), dirs[b].filename().string(), names[t], std::min(A.cols(), B.cols()), {}};
        for (double th : principal_angles(A, B)) r.angles_deg.push_back(th * 180.0 / std::numbers::pi);
        for (std::size_t i = 0; i < r.angles_deg.size(); ++i)
          os << r.run_a << ',' << r.run_b << ',' << r.tensor << ',' << i << ',' << r.angles_deg[i] << '\n';
        recs.push_back(std::move(r));
      }
  if (!out_csv.empty()) write_text(out_csv, os.str());
  return recs;
}

// ---------------------------------------------------------------------------
// Statistics and report

struct Quartiles {
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  std::size_t n = 0;
};

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& s, double q) {
  if (s.empty()) throw UndefinedInputError("quantile of an empty set");
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

inline Quartiles quartiles(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return {quantile_sorted(v, 0.25), quantile_sorted(v, 0.5), quantile_sorted(v, 0.75), v.size()};
}

/// Least-squares slope of y on x.
inline double linear_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw UndefinedInputError("slope needs >= 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) throw UndefinedInputError("slope: all x equal");
  return sxy / sxx;
}

/// Mean rows of a commutator table, in step order.
inline std::vector<CommutatorRecord> mean_records(const std::vector<CommutatorRecord>& recs) {
  std::vector<CommutatorRecord> out;
  for (const auto& r : recs)
    if (r.is_mean()) out.push_back(r);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  return out;
}

/// Medians of the ratio over the first and last 20% of probes (at least one each).
inline std::pair<double, double> early_late_ratio(const std::vector<CommutatorRecord>& recs) {
  const auto means = mean_records(recs);
  if (means.empty()) throw UndefinedInputError("no commutator probes");
  const std::size_t k = std::max<std::size_t>(1, means.size() / 5);
  std::vector<double> early, late;
  for (std::size_t i = 0; i < k; ++i) {
    early.push_back(means[i].ratio);
    late.push_back(means[means.size() - k + i].ratio);
  }
  return {median(early), median(late)};
}

struct RunSummary {
  std::string dir;
  std::uint64_t seed = 0;
  std::optional<double> final_acc;
  std::map<std::size_t, double> final_acc_per_m;
  std::optional<double> entropy_initial, entropy_final;
  std::map<std::string, std::size_t> r90_final;
  std::optional<double> r90_median;
  std::optional<double> ratio_early, ratio_late, perp_median, perp_min;
};

inline RunSummary summarize_run(const fs::path& dir) {
  RunSummary s;
  s.dir = dir.string();
  const auto m = read_manifest(dir);
  s.seed = train_config_from_json(m.config).seed;
  if (fs::exists(dir / "metrics.csv")) {
    const auto t = read_metrics_csv(dir / "metrics.csv");
    if (!t.rows.empty()) {
      const auto& last = t.rows.back();
      s.final_acc = last.eval.accuracy;
      for (std::size_t i = 0; i < t.marker_counts.size(); ++i) s.final_acc_per_m[t.marker_counts[i]] = last.eval.accuracy_per_m[i];
      auto mean = [](const std::vector<double>& v) {
        double x = 0;
        for (double y : v) x += y / static_cast<double>(v.size());
        return x;
      };
      s.entropy_initial = mean(t.rows.front().eval.eos_entropy);
      s.entropy_final = mean(last.eval.eos_entropy);
    }
  }
  if (fs::exists(dir / "rank.csv")) {
    std::istringstream in(detail::read_file(dir / "rank.csv"));
    std::string line;
    std::getline(in, line);
    std::size_t last_step = 0;
    std::map<std::string, std::size_t> at_last;
    while (std::getline(in, line)) {
      const auto f = cfg::split(line, ',');
      if (f.size() < 3) continue;
      const std::size_t step = std::stoul(f[0]);
      if (step > last_step) {
        last_step = step;
        at_last.clear();
      }
      if (step == last_step) at_last[f[1]] = std::stoul(f[2]);
    }
    s.r90_final = at_last;
    if (!at_last.empty()) {
      std::vector<double> v;
      for (const auto& [k, r] : at_last) v.push_back(static_cast<double>(r));
      s.r90_median = median(v);
    }
  }
  if (fs::exists(dir / "commutator.csv")) {
    std::ifstream in(dir / "commutator.csv");
    const auto recs = read_commutator_csv(in);
    const auto means = mean_records(recs);
    if (!means.empty()) {
      const auto [e, l] = early_late_ratio(recs);
      s.ratio_early = e;
      s.ratio_late = l;
      std::vector<double> perp;
      for (const auto& r : means) perp.push_back(r.perp_fraction);
      s.perp_median = median(perp);
      s.perp_min = *std::min_element(perp.begin(), perp.end());
    }
  }
  return s;
}

inline nlohmann::json to_json(const Quartiles& q) {
  return {{"q1", q.q1}, {"median", q.median}, {"q3", q.q3}, {"n", q.n}};
}

/// Cross-seed summary; every number is recomputable from the per-run CSVs.
inline nlohmann::json cmd_report(const std::vector<fs::path>& dirs, const fs::path& out_json = {}) {
  if (dirs.empty()) throw ContractViolation("report: no runs");
  nlohmann::json runs = nlohmann::json::array();
  std::map<std::string, std::vector<double>> pooled;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& d : dirs) {
    const auto s = summarize_run(d);
    nlohmann::json per_m = nlohmann::json::object();
    for (const auto& [m, a] : s.final_acc_per_m) per_m[std::to_string(m)] = a;
    nlohmann::json r90 = nlohmann::json::object();
    for (const auto& [t, r] : s.r90_final) r90[t] = r;
    runs.push_back({{"dir", s.dir},
                    {"seed", s.seed},
                    {"final_acc", opt(s.final_acc)},
                    {"final_acc_per_m", per_m},
                    {"entropy_initial", opt(s.entropy_initial)},
                    {"entropy_final", opt(s.entropy_final)},
                    {"r90_final", r90},
                    {"r90_median", opt(s.r90_median)},
                    {"ratio_early", opt(s.ratio_early)},
                    {"ratio_late", opt(s.ratio_late)},
                    {"perp_fraction_median", opt(s.perp_median)},
                    {"perp_fraction_min", opt(s.perp_min)}});
    auto pool = [&pooled](const char* k, const std::optional<double>& v) {
      if (v) pooled[k].push_back(*v);
    };
    pool("final_acc", s.final_acc);
    pool("r90_median", s.r90_median);
    pool("ratio_early", s.ratio_early);
    pool("ratio_late", s.ratio_late);
    pool("perp_fraction_median", s.perp_median);
    pool("entropy_final", s.entropy_final);
  }
  nlohmann::json agg = nlohmann::json::object();
  for (const auto& [k, v] : pooled) agg[k] = to_json(quartiles(v));
  nlohmann::json out = {{"schema", "emlab-report-v1"}, {"runs", runs}, {"aggregate", agg}};
  if (!out_json.empty()) write_text(out_json, out.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// Curriculum comparison

struct ForgettingRow {
  std::string condition;
  std::uint64_t seed = 0;
  std::size_t stage = 0;       ///< 1-based stage whose end this row marks
  std::size_t step = 0;
  std::vector<double> acc_per_m;
};

struct ForgettingSummary {
  std::string condition;
  std::uint64_t seed = 0;
  double acc_m1_after_stage1 = 0.0;
  double max_drop_m1 = 0.0;  ///< largest later fall below the stage-1 value
  std::vector<double> final_acc_per_m;
};

struct CurriculumComparison {
  std::vector<std::size_t> marker_counts;
  std::vector<ForgettingRow> rows;
  std::vector<ForgettingSummary> summaries;
};

inline const MetricsRow& row_at(const MetricsTable& t, std::size_t step) {
  const MetricsRow* best = &t.rows.front();
  for (const auto& r : t.rows)
    if (r.step <= step) best = &r;
  return *best;
}

/// Per-stage, per-m accuracy from the metrics of a finished run, using the
/// curriculum's stage boundaries for both conditions.
inline void tabulate_forgetting(const std::string& condition, std::uint64_t seed, const MetricsTable& t,
                                const std::vector<std::size_t>& stage_ends, CurriculumComparison& out) {
  if (out.marker_counts.empty()) out.marker_counts = t.marker_counts;
  const std::size_t m1 = 0;  // smallest marker count comes first
  for (std::size_t i = 0; i < stage_ends.size(); ++i) {
    const auto& r = row_at(t, stage_ends[i]);
    out.rows.push_back({condition, seed, i + 1, r.step, r.eval.accuracy_per_m});
  }
  ForgettingSummary s;
  s.condition = condition;
  s.seed = seed;
  s.final_acc_per_m = t.rows.back().eval.accuracy_per_m;
  if (!stage_ends.empty()) {
    const auto& first = row_at(t, stage_ends.front());
    s.acc_m1_after_stage1 = first.eval.accuracy_per_m[m1];
    for (const auto& r : t.rows)
      if (r.step > first.step) s.max_drop_m1 = std::max(s.max_drop_m1, s.acc_m1_after_stage1 - r.eval.accuracy_per_m[m1]);
  }
  out.summaries.push_back(s);
}

inline CurriculumComparison cmd_compare_curricula(const ExperimentConfig& e, std::size_t jobs = 1,
                                                  const LogFn& log = {}) {
  validate(e);
  const fs::path root = e.out_dir;
  std::vector<std::function<void()>> tasks;
  for (auto kind : {ScheduleKind::mixed, ScheduleKind::curriculum})
    for (auto seed : e.seeds) {
      const fs::path dir = run_dir_for(root / schedule_name(kind), seed);
      tasks.push_back([&e, kind, seed, dir, log] {
        ensure_run(train_config_for(e, seed, kind), dir, log);
        write_text(dir / "experiment.cfg", serialize_config(e));
      });
    }
  run_jobs(tasks, jobs);

  std::vector<std::size_t> ends;
  std::size_t acc = 0;
  for (const auto& st : curriculum_stages(e)) ends.push_back(acc += st.steps);

  CurriculumComparison out;
  for (auto kind : {ScheduleKind::mixed, ScheduleKind::curriculum})
    for (auto seed : e.seeds) {
      const fs::path dir = run_dir_for(root / schedule_name(kind), seed);
      tabulate_forgetting(schedule_name(kind), seed, read_metrics_csv(dir / "metrics.csv"), ends, out);
    }

  std::ostringstream os;
  os << "condition,seed,stage,step";
  for (std::size_t m : out.marker_counts) os << ",acc_m" << m;
  os << '\n';
  os.precision(10);
  for (const auto& r : out.rows) {
    os << r.condition << ',' << r.seed << ',' << r.stage << ',' << r.step;
    for (double a : r.acc_per_m) os << ',' << a;
    os << '\n';
  }
  write_text(root / "forgetting.csv", os.str());

  std::ostringstream ss;
  ss << "condition,seed,acc_m1_after_stage1,max_drop_m1";
  for (std::size_t m : out.marker_counts) ss << ",final_acc_m" << m;
  ss << '\n';
  ss.precision(10);
  for (const auto& s : out.summaries) {
    ss << s.condition << ',' << s.seed << ',' << s.acc_m1_after_stage1 << ',' << s.max_drop_m1;
    for (double a : s.final_acc_per_m) ss << ',' << a;
    ss << '\n';
  }
  write_text(root / "forgetting_summary.csv", ss.str());
  return out;
}

}  // namespace emlab
