#pragma once

// Plain SGD training with aligned checkpointing and evaluation.

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "emlab/errors.hpp"
#include "emlab/model.hpp"
#include "emlab/numkit.hpp"
#include "emlab/taskgen.hpp"
#include "emlab/trajstore.hpp"

namespace emlab {

struct TrainConfig {
  double lr = 0.001;
  std::size_t batch_size = 64;
  std::size_t total_steps = 10000;
  std::size_t checkpoint_every = 100;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::mixed(TaskSpec{}, {1, 2, 3, 4});
  std::size_t eval_size = 2048;  ///< per marker count
  ModelConfig model = ModelConfig::for_task(TaskSpec{});

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ContractViolation("TrainConfig: lr must be > 0");
  if (c.batch_size < 1) throw ContractViolation("TrainConfig: batch_size must be >= 1");
  if (c.checkpoint_every < 1) throw ContractViolation("TrainConfig: checkpoint_every must be >= 1");
  if (c.eval_size < 1) throw ContractViolation("TrainConfig: eval_size must be >= 1");
  validate(c.model);
  if (c.schedule.kind == ScheduleKind::curriculum && c.schedule.stages.empty())
    throw ContractViolation("TrainConfig: curriculum has no stages");
  if (c.schedule.kind == ScheduleKind::mixed && !c.schedule.base.is_mixed())
    throw ContractViolation("TrainConfig: mixed schedule needs a marker set");
  std::vector<TaskSpec> specs;
  if (c.schedule.kind == ScheduleKind::mixed) specs.push_back(c.schedule.base);
  for (const auto& st : c.schedule.stages) specs.push_back(st.spec);
  for (const auto& s : specs) {
    validate(s);
    if (s.vocab().size() != c.model.vocab_size || s.seq_len != c.model.seq_len ||
        s.modulus != c.model.num_classes)
      throw ContractViolation("TrainConfig: model shape does not match the task vocabulary");
  }
}

// ---------------------------------------------------------------------------
// JSON form (stored in the run manifest)

inline nlohmann::json to_json(const TaskSpec& s) {
  nlohmann::json j = {{"seq_len", s.seq_len},   {"modulus", s.modulus},
                      {"op", to_string(s.op)},  {"num_distractors", s.num_distractors}};
  if (s.is_mixed())
    j["mixed_markers"] = s.mixed_markers;
  else
    j["num_markers"] = s.num_markers;
  return j;
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.seq_len = j.at("seq_len").get<std::size_t>();
  s.modulus = j.at("modulus").get<std::size_t>();
  s.op = parse_task_op(j.at("op").get<std::string>());
  s.num_distractors = j.at("num_distractors").get<std::size_t>();
  if (j.contains("mixed_markers"))
    s.mixed_markers = j.at("mixed_markers").get<std::vector<std::size_t>>();
  else
    s.num_markers = j.at("num_markers").get<std::size_t>();
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json sched;
  if (c.schedule.kind == ScheduleKind::mixed) {
    sched = {{"kind", "mixed"}, {"spec", to_json(c.schedule.base)}};
  } else {
    auto stages = nlohmann::json::array();
    for (const auto& st : c.schedule.stages)
      stages.push_back({{"steps", st.steps}, {"spec", to_json(st.spec)}});
    sched = {{"kind", "curriculum"}, {"stages", stages}};
  }
  const auto& m = c.model;
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed},
          {"eval_size", c.eval_size},
          {"schedule", sched},
          {"model",
           {{"embed_dim", m.embed_dim},
            {"num_layers", m.num_layers},
            {"variant", to_string(m.variant)},
            {"mlp_hidden", m.mlp_hidden},
            {"vocab_size", m.vocab_size},
            {"seq_len", m.seq_len},
            {"num_classes", m.num_classes},
            {"init_std", m.init_std}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.total_steps = j.at("total_steps").get<std::size_t>();
    c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.eval_size = j.at("eval_size").get<std::size_t>();
    const auto& s = j.at("schedule");
    if (s.at("kind") == "mixed") {
      c.schedule = Schedule::mixed(task_spec_from_json(s.at("spec")), {});
      c.schedule.base.mixed_markers = s.at("spec").at("mixed_markers").get<std::vector<std::size_t>>();
    } else {
      std::vector<CurriculumStage> stages;
      for (const auto& st : s.at("stages"))
        stages.push_back({task_spec_from_json(st.at("spec")), st.at("steps").get<std::size_t>()});
      c.schedule = Schedule::curriculum(std::move(stages));
    }
    const auto& m = j.at("model");
    c.model.embed_dim = m.at("embed_dim").get<std::size_t>();
    c.model.num_layers = m.at("num_layers").get<std::size_t>();
    c.model.variant = parse_variant(m.at("variant").get<std::string>());
    c.model.mlp_hidden = m.at("mlp_hidden").get<std::size_t>();
    c.model.vocab_size = m.at("vocab_size").get<std::size_t>();
    c.model.seq_len = m.at("seq_len").get<std::size_t>();
    c.model.num_classes = m.at("num_classes").get<std::size_t>();
    c.model.init_std = m.at("init_std").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fixed held-out samples, one block per marker count.
struct EvalSet {
  std::vector<std::size_t> marker_counts;
  std::vector<std::vector<TaskSample>> samples;  ///< aligned with marker_counts
};

/// Eval streams are labelled "eval" and never collide with "train"/"probe".
inline EvalSet make_eval_set(const TaskSpec& base, std::span<const std::size_t> marker_counts,
                             std::size_t eval_size, std::uint64_t seed) {
  EvalSet out;
  for (std::size_t m : marker_counts) {
    TaskSpec spec = base;
    spec.mixed_markers.clear();
    spec.num_markers = m;
    Rng rng(seed, stream_label("eval", m));
    out.marker_counts.push_back(m);
    out.samples.push_back(sample_batch(spec, eval_size, rng));
  }
  return out;
}

inline EvalSet make_eval_set(const TrainConfig& c) {
  const auto counts = c.schedule.marker_counts();
  return make_eval_set(c.schedule.base, counts, c.eval_size, c.seed);
}

struct EvalResult {
  double accuracy = 0.0;  ///< mean of the per-m accuracies
  std::vector<std::size_t> marker_counts;
  std::vector<double> accuracy_per_m;
  std::vector<double> eos_entropy;  ///< per layer, averaged over all eval samples
  double loss = 0.0;

  double accuracy_at(std::size_t m) const {
    for (std::size_t i = 0; i < marker_counts.size(); ++i)
      if (marker_counts[i] == m) return accuracy_per_m[i];
    throw ContractViolation("EvalResult: no accuracy for m = " + std::to_string(m));
  }
};

inline constexpr std::size_t kEvalChunk = 512;

inline EvalResult evaluate(const ModelParams& p, const EvalSet& set,
                           const ResidualSplice& splice = {}, CapturePoint capture = {}) {
  EvalResult r;
  r.marker_counts = set.marker_counts;
  r.eos_entropy.assign(p.config.num_layers, 0.0);
  std::size_t total = 0;
  for (const auto& block : set.samples) {
    std::size_t correct = 0;
    for (std::size_t start = 0; start < block.size(); start += kEvalChunk) {
      const std::span<const TaskSample> chunk(block.data() + start,
                                              std::min(kEvalChunk, block.size() - start));
      const auto tokens = tokens_of(chunk);
      const auto labels = labels_of(chunk);
      const auto acts = forward_batch(p, tokens, ForwardMode::readout_only, splice, capture);
      const auto pred = predictions(acts);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
      r.loss += cross_entropy(acts, labels) * static_cast<double>(chunk.size());
      const auto ent = mean_eos_entropy(acts);
      for (std::size_t l = 0; l < ent.size(); ++l)
        r.eos_entropy[l] += ent[l] * static_cast<double>(chunk.size());
    }
    total += block.size();
    r.accuracy_per_m.push_back(block.empty() ? 0.0
                                             : static_cast<double>(correct) / static_cast<double>(block.size()));
  }
  if (total > 0) {
    r.loss /= static_cast<double>(total);
    for (double& e : r.eos_entropy) e /= static_cast<double>(total);
  }
  double sum = 0.0;
  for (double a : r.accuracy_per_m) sum += a;
  r.accuracy = r.accuracy_per_m.empty() ? 0.0 : sum / static_cast<double>(r.accuracy_per_m.size());
  return r;
}

/// Evaluates on eval_size fresh samples per marker count of `spec`, drawn from `rng`.
inline EvalResult evaluate(const ModelParams& p, const TaskSpec& spec, std::size_t eval_size, Rng& rng) {
  EvalSet set;
  for (std::size_t m : spec.marker_counts()) {
    TaskSpec s = spec;
    s.mixed_markers.clear();
    s.num_markers = m;
    set.marker_counts.push_back(m);
    set.samples.push_back(sample_batch(s, eval_size, rng));
  }
  return evaluate(p, set);
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  EvalResult eval;
};

struct MetricsTable {
  std::vector<std::size_t> marker_counts;
  std::size_t num_layers = 0;
  std::vector<MetricsRow> rows;

  void write_csv(std::ostream& os) const {
    os << "step,loss,acc";
    for (std::size_t m : marker_counts) os << ",acc_m" << m;
    for (std::size_t l = 0; l < num_layers; ++l) os << ",entropy_l" << l + 1;
    os << '\n';
    const auto old_precision = os.precision(10);
    for (const auto& r : rows) {
      os << r.step << ',' << r.train_loss << ',' << r.eval.accuracy;
      for (double a : r.eval.accuracy_per_m) os << ',' << a;
      for (double e : r.eval.eos_entropy) os << ',' << e;
      os << '\n';
    }
    os.precision(old_precision);
  }
};

// ---------------------------------------------------------------------------
// SGD

inline void sgd_step(ModelParams& p, std::span<const double> grads, double lr) {
  if (grads.size() != p.values.size()) throw ContractViolation("sgd_step: gradient length mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) p.values[i] -= lr * grads[i];
}

/// Minibatch for a given step; reproducible in isolation.
inline std::vector<TaskSample> train_batch(const TrainConfig& c, std::size_t step) {
  Rng rng(c.seed, stream_label("train", step));
  return sample_batch(spec_at_step(c.schedule, step), c.batch_size, rng);
}

inline ModelParams initial_params(const TrainConfig& c) {
  Rng rng(c.seed, stream_label("init"));
  return init_params(c.model, rng);
}

/// Stepwise driver; `step()` applies the update for minibatch `current_step()`.
class Trainer {
 public:
  explicit Trainer(TrainConfig config) : config_(std::move(config)), params_(config_.model) {
    validate(config_);
    params_ = initial_params(config_);
  }

  Trainer(TrainConfig config, ModelParams params, std::size_t step)
      : config_(std::move(config)), params_(std::move(params)), step_(step) {
    validate(config_);
    if (!(params_.config == config_.model)) throw ContractViolation("Trainer: params do not match model config");
  }

  double step() {
    const auto batch = train_batch(config_, step_);
    auto lg = loss_and_grad(params_, batch);
    if (!std::isfinite(lg.loss)) {
      throw NonFiniteError("non-finite loss at step " + std::to_string(step_));
    }
    for (double g : lg.grads) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient at step " + std::to_string(step_));
    }
    sgd_step(params_, lg.grads, config_.lr);
    ++step_;
    return lg.loss;
  }

  std::size_t current_step() const noexcept { return step_; }
  const ModelParams& params() const noexcept { return params_; }
  const TrainConfig& config() const noexcept { return config_; }

 private:
  TrainConfig config_;
  ModelParams params_;
  std::size_t step_ = 0;
};

struct TrainResult {
  std::filesystem::path dir;
  MetricsTable metrics;
  ModelParams final_params;
};

struct TrainOptions {
  /// Continue from `state.bin` in the run directory when present.
  bool resume = false;
  /// Called after each metrics row; useful for progress output.
  std::function<void(const MetricsRow&)> on_row;
};

inline void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& t) {
  std::ostringstream os;
  t.write_csv(os);
  detail::write_file_atomic(path, os.str());
}

/// Reads a metrics CSV written by write_metrics_csv back into rows.
inline MetricsTable read_metrics_csv(const std::filesystem::path& path) {
  std::istringstream in(detail::read_file(path));
  std::string line;
  MetricsTable t;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty metrics file");
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    for (std::string f; std::getline(h, f, ',');) header.push_back(f);
  }
  for (const auto& f : header) {
    if (f.rfind("acc_m", 0) == 0) t.marker_counts.push_back(std::stoul(f.substr(5)));
    if (f.rfind("entropy_l", 0) == 0) ++t.num_layers;
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) v.push_back(std::stod(f));
    if (v.size() != header.size()) throw FormatError(path.string() + ": ragged metrics row");
    MetricsRow r;
    r.step = static_cast<std::size_t>(v[0]);
    r.train_loss = v[1];
    r.eval.accuracy = v[2];
    r.eval.marker_counts = t.marker_counts;
    std::size_t k = 3;
    for (std::size_t i = 0; i < t.marker_counts.size(); ++i) r.eval.accuracy_per_m.push_back(v[k++]);
    for (std::size_t l = 0; l < t.num_layers; ++l) r.eval.eos_entropy.push_back(v[k++]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

/// Trains one run into `dir`: ckpt_<step>.bin at step 0 and every
/// checkpoint_every steps, manifest.json, metrics.csv and state.bin (the
/// latest checkpoint in full precision).
inline TrainResult train_run(const TrainConfig& config, const std::filesystem::path& dir,
                             const std::string& run_id, const TrainOptions& opts = {}) {
  validate(config);
  namespace fs = std::filesystem;
  const EvalSet eval_set = make_eval_set(config);

  std::optional<Trainer> trainer;
  MetricsTable table;
  table.marker_counts = eval_set.marker_counts;
  table.num_layers = config.model.num_layers;
  RunManifest manifest;
  manifest.run_id = run_id;
  manifest.config = to_json(config);
  manifest.layout = ParamLayout(config.model);

  const fs::path state_path = dir / "state.bin";
  if (opts.resume && fs::exists(state_path) && fs::exists(dir / "manifest.json")) {
    const RunManifest old = read_manifest(dir);
    TrainConfig old_cfg = train_config_from_json(old.config);
    old_cfg.total_steps = config.total_steps;
    if (!(old_cfg == config)) throw ContractViolation("train_run: cannot resume with a different config");
    const Checkpoint st = load_state(state_path);
    ModelParams p(config.model);
    if (st.values.size() != p.size()) throw IntegrityError("state.bin: wrong parameter count");
    p.values = st.values;
    trainer.emplace(config, std::move(p), st.step);
    for (const auto& e : old.checkpoints)
      if (e.step <= st.step) manifest.checkpoints.push_back(e);
    if (fs::exists(dir / "metrics.csv")) {
      table = read_metrics_csv(dir / "metrics.csv");
      std::erase_if(table.rows, [&](const MetricsRow& r) { return r.step > st.step; });
    }
  } else {
    fs::create_directories(dir);
    trainer.emplace(config);
    // Step-0 row: loss of the first minibatch at initialization.
    MetricsRow row;
    row.step = 0;
    row.train_loss = loss_only(trainer->params(), train_batch(config, 0));
    row.eval = evaluate(trainer->params(), eval_set);
    manifest.checkpoints.push_back({0, save_checkpoint(dir, 0, trainer->params().values, manifest.param_count())});
    save_state(state_path, 0, trainer->params().values);
    table.rows.push_back(row);
    if (opts.on_row) opts.on_row(row);
  }
  write_manifest(dir, manifest);
  write_metrics_csv(dir / "metrics.csv", table);

  double window_loss = 0.0;
  std::size_t window_n = 0;
  while (trainer->current_step() < config.total_steps) {
    window_loss += trainer->step();
    ++window_n;
    const std::size_t s = trainer->current_step();
    if (s % config.checkpoint_every != 0) continue;
    MetricsRow row;
    row.step = s;
    row.train_loss = window_loss / static_cast<double>(window_n);
    row.eval = evaluate(trainer->params(), eval_set);
    window_loss = 0.0;
    window_n = 0;
    manifest.checkpoints.push_back({s, save_checkpoint(dir, s, trainer->params().values, manifest.param_count())});
    save_state(state_path, s, trainer->params().values);
    write_manifest(dir, manifest);
    table.rows.push_back(row);
    write_metrics_csv(dir / "metrics.csv", table);
    if (opts.on_row) opts.on_row(row);
  }
  return {dir, std::move(table), trainer->params()};
}

}  // namespace emlab
