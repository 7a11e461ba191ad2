#pragma once

// Two-step SGD commutator probes.
//
// For minibatches A and B, applying A then B versus B then A from the same
// θ₀ ends at points that differ by δ. Its size relative to the two step
// lengths (D) measures non-commutativity; its projection onto the execution
// basis (ρ_exec) against random subspaces of the same dimension (ρ_rand)
// measures where that non-commutativity lives.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "emlab/errors.hpp"
#include "emlab/geometry.hpp"
#include "emlab/model.hpp"
#include "emlab/numkit.hpp"
#include "emlab/trainer.hpp"
#include "emlab/trajstore.hpp"

namespace emlab {

using GradFn = std::function<std::vector<double>(std::span<const double> theta)>;

struct TwoStepResult {
  std::vector<double> delta;   ///< θ_AB − θ_BA
  std::vector<double> step_a;  ///< η ∇L(θ₀; A)
  std::vector<double> step_b;  ///< η ∇L(θ₀; B)
};

namespace detail {

inline void require_finite(std::span<const double> g, const char* which) {
  for (double x : g)
    if (!std::isfinite(x)) throw NonFiniteError(std::string("commutator probe: non-finite gradient on batch ") + which);
}

}  // namespace detail

/// δ = θ_AB − θ_BA, evaluated as η[(g_B(θ₀) − g_B(θ_A)) − (g_A(θ₀) − g_A(θ_B))],
/// which equals the parameter difference exactly in real arithmetic but
/// avoids cancelling against the size of θ.
inline TwoStepResult two_step_delta(std::span<const double> theta0, const GradFn& grad_a,
                                    const GradFn& grad_b, double lr) {
  const std::size_t n = theta0.size();
  for (double x : theta0)
    if (!std::isfinite(x)) throw ContractViolation("two_step_delta: non-finite θ₀");
  const auto ga0 = grad_a(theta0);
  detail::require_finite(ga0, "A");
  const auto gb0 = grad_b(theta0);
  detail::require_finite(gb0, "B");
  if (ga0.size() != n || gb0.size() != n) throw ContractViolation("two_step_delta: gradient length mismatch");

  std::vector<double> theta_a(n), theta_b(n);
  for (std::size_t i = 0; i < n; ++i) {
    theta_a[i] = theta0[i] - lr * ga0[i];
    theta_b[i] = theta0[i] - lr * gb0[i];
  }
  const auto gb_a = grad_b(theta_a);
  detail::require_finite(gb_a, "B");
  const auto ga_b = grad_a(theta_b);
  detail::require_finite(ga_b, "A");

  TwoStepResult r;
  r.delta.resize(n);
  r.step_a.resize(n);
  r.step_b.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.delta[i] = lr * ((gb0[i] - gb_a[i]) - (ga0[i] - ga_b[i]));
    r.step_a[i] = lr * ga0[i];
    r.step_b[i] = lr * gb0[i];
  }
  return r;
}

inline TwoStepResult two_step_delta(const ModelParams& p0, std::span<const TaskSample> batch_a,
                                    std::span<const TaskSample> batch_b, double lr) {
  if (batch_a.empty() || batch_b.empty()) throw ContractViolation("two_step_delta: empty batch");
  auto grad_on = [&p0](std::span<const TaskSample> batch) {
    return [&p0, batch](std::span<const double> theta) {
      ModelParams p(p0.config);
      std::copy(theta.begin(), theta.end(), p.values.begin());
      return loss_and_grad(p, batch).grads;
    };
  };
  return two_step_delta(p0.values, grad_on(batch_a), grad_on(batch_b), lr);
}

/// D = ‖δ‖ / (‖ηg_A‖·‖ηg_B‖).
inline double normalized_defect(double delta_norm, double step_a_norm, double step_b_norm) {
  if (!(step_a_norm > 0.0) || !(step_b_norm > 0.0))
    throw UndefinedInputError("normalized_defect: zero step norm");
  return delta_norm / (step_a_norm * step_b_norm);
}

inline double normalized_defect(std::span<const double> delta, std::span<const double> grad_a,
                                std::span<const double> grad_b, double lr) {
  return normalized_defect(norm2(delta), std::abs(lr) * norm2(grad_a), std::abs(lr) * norm2(grad_b));
}

// ---------------------------------------------------------------------------
// Attention coordinates

/// Attention-matrix slots of a layout, in flatten order.
inline std::vector<TensorSlot> attention_slots(const ParamLayout& layout) {
  std::vector<TensorSlot> out;
  for (const auto& s : layout.slots())
    if (s.name.find(".W_") != std::string::npos) out.push_back(s);
  return out;
}

inline std::vector<double> gather(std::span<const double> full, std::span<const TensorSlot> slots) {
  std::vector<double> out;
  for (const auto& s : slots)
    out.insert(out.end(), full.begin() + static_cast<std::ptrdiff_t>(s.offset),
               full.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Time series

struct CommutatorRecord {
  std::size_t step = 0;
  int trial = 0;  ///< -1 marks the across-trial mean
  // Attention coordinates.
  double delta_norm = 0.0;
  double step_a_norm = 0.0;
  double step_b_norm = 0.0;
  double defect = 0.0;
  double rho_exec = 0.0;
  double rho_rand = 0.0;
  double ratio = 0.0;
  double perp_fraction = 0.0;
  std::size_t k = 0;
  // All parameters.
  double delta_norm_full = 0.0;
  double step_a_norm_full = 0.0;
  double step_b_norm_full = 0.0;
  double defect_full = 0.0;

  bool is_mean() const noexcept { return trial < 0; }
};

struct CommutatorOptions {
  std::size_t probe_every = 100;   ///< must be a multiple of checkpoint_every
  std::size_t trials_per_step = 3;
  std::size_t random_trials = 10;
  std::size_t probe_batch = 64;
  BasisOptions basis;
  std::function<void(const CommutatorRecord&)> on_record;
};

/// Probes one 64-bit parameter state. `attn_traj` holds the attention-block
/// trajectory through `step`; batches come from the "probe" streams.
inline std::vector<CommutatorRecord> probe_step(const TrainConfig& cfg, const ModelParams& params,
                                                std::size_t step, const TrajectoryMatrix& attn_traj,
                                                const CommutatorOptions& opts) {
  const auto slots = attention_slots(params.layout);
  std::vector<std::string> blocks;
  for (const auto& s : slots) blocks.push_back(s.name);
  const ExecutionBasis basis = build_execution_basis(attn_traj, blocks, step, opts.basis);
  const TaskSpec spec = spec_at_step(cfg.schedule, step);

  std::vector<CommutatorRecord> recs;
  std::vector<std::vector<double>> deltas;
  for (std::size_t t = 0; t < opts.trials_per_step; ++t) {
    Rng rng(cfg.seed, stream_label("probe", step, t));
    const auto a = sample_batch(spec, opts.probe_batch, rng);
    const auto b = sample_batch(spec, opts.probe_batch, rng);
    const auto r = two_step_delta(params, a, b, cfg.lr);

    CommutatorRecord rec;
    rec.step = step;
    rec.trial = static_cast<int>(t);
    rec.delta_norm_full = norm2(r.delta);
    rec.step_a_norm_full = norm2(r.step_a);
    rec.step_b_norm_full = norm2(r.step_b);
    rec.defect_full = normalized_defect(rec.delta_norm_full, rec.step_a_norm_full, rec.step_b_norm_full);

    auto delta = gather(r.delta, slots);
    rec.delta_norm = norm2(delta);
    rec.step_a_norm = norm2(gather(r.step_a, slots));
    rec.step_b_norm = norm2(gather(r.step_b, slots));
    rec.defect = normalized_defect(rec.delta_norm, rec.step_a_norm, rec.step_b_norm);
    rec.k = basis.k();
    if (rec.delta_norm > 0.0 && basis.k() > 0) {
      const auto d = decompose(delta, basis.basis);
      rec.rho_exec = d.rho;
      rec.perp_fraction = d.perp_fraction;
    } else {
      rec.perp_fraction = rec.delta_norm > 0.0 ? 1.0 : 0.0;
    }
    recs.push_back(rec);
    deltas.push_back(std::move(delta));
  }

  // The same random subspaces serve every trial at this step.
  if (basis.k() > 0) {
    std::vector<std::span<const double>> views;
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < deltas.size(); ++t)
      if (recs[t].delta_norm > 0.0) {
        views.emplace_back(deltas[t]);
        idx.push_back(t);
      }
    Rng rng(cfg.seed, stream_label("random-basis", step));
    const auto rand = random_projection_baseline(views, basis.k(), opts.random_trials, rng);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto& rec = recs[idx[i]];
      rec.rho_rand = rand[i];
      rec.ratio = rec.rho_rand > 0.0 ? rec.rho_exec / rec.rho_rand : 0.0;
    }
  }

  CommutatorRecord mean;
  mean.step = step;
  mean.trial = -1;
  mean.k = basis.k();
  const double n = static_cast<double>(recs.size());
  for (const auto& r : recs) {
    mean.delta_norm += r.delta_norm / n;
    mean.step_a_norm += r.step_a_norm / n;
    mean.step_b_norm += r.step_b_norm / n;
    mean.defect += r.defect / n;
    mean.rho_exec += r.rho_exec / n;
    mean.rho_rand += r.rho_rand / n;
    mean.ratio += r.ratio / n;
    mean.perp_fraction += r.perp_fraction / n;
    mean.delta_norm_full += r.delta_norm_full / n;
    mean.step_a_norm_full += r.step_a_norm_full / n;
    mean.step_b_norm_full += r.step_b_norm_full / n;
    mean.defect_full += r.defect_full / n;
  }
  if (!recs.empty()) recs.push_back(mean);
  return recs;
}

/// Replays training from the run's seed to recover 64-bit states (stored
/// checkpoints are 32-bit), checks each replayed checkpoint against the
/// archive, and probes at every probe_every-th step.
inline std::vector<CommutatorRecord> commutator_timeseries(const std::filesystem::path& run_dir,
                                                           const CommutatorOptions& opts = {}) {
  const RunManifest manifest = read_manifest(run_dir);
  const TrainConfig cfg = train_config_from_json(manifest.config);
  if (opts.probe_every == 0 || opts.probe_every % cfg.checkpoint_every != 0)
    throw ContractViolation("commutator: probe_every must be a positive multiple of checkpoint_every");
  if (opts.trials_per_step < 1) throw ContractViolation("commutator: trials_per_step must be >= 1");

  std::vector<std::string> blocks;
  for (const auto& s : attention_slots(manifest.layout)) blocks.push_back(s.name);
  const TrajectoryMatrix attn = load_trajectory(run_dir, blocks);
  std::size_t last = 0;
  for (const auto& c : manifest.checkpoints) last = std::max(last, c.step);

  std::vector<CommutatorRecord> out;
  Trainer trainer(cfg);
  auto check_replay = [&](std::size_t step) {
    const fs::path path = run_dir / checkpoint_filename(step);
    if (!fs::exists(path)) return;
    const std::string stored = detail::read_file(path);
    if (stored != encode_checkpoint(step, trainer.params().values))
      throw IntegrityError("commutator: replay diverged from stored checkpoint at step " + std::to_string(step));
  };
  check_replay(0);
  for (std::size_t s = opts.probe_every; s <= last; s += opts.probe_every) {
    while (trainer.current_step() < s) {
      trainer.step();
      if (trainer.current_step() % cfg.checkpoint_every == 0) check_replay(trainer.current_step());
    }
    for (auto& r : probe_step(cfg, trainer.params(), s, attn, opts)) {
      if (opts.on_record) opts.on_record(r);
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline void write_commutator_csv(std::ostream& os, const std::vector<CommutatorRecord>& recs) {
  os << "step,trial,delta_norm,stepA_norm,stepB_norm,D,rho_exec,rho_rand,ratio,perp_frac,K\n";
  const auto old = os.precision(12);
  for (const auto& r : recs) {
    os << r.step << ',';
    if (r.is_mean())
      os << "mean";
    else
      os << r.trial;
    os << ',' << r.delta_norm << ',' << r.step_a_norm << ',' << r.step_b_norm << ',' << r.defect << ','
       << r.rho_exec << ',' << r.rho_rand << ',' << r.ratio << ',' << r.perp_fraction << ',' << r.k << '\n';
  }
  os.precision(old);
}

/// Same probes measured over every parameter (embeddings and readout included).
inline void write_commutator_full_csv(std::ostream& os, const std::vector<CommutatorRecord>& recs) {
  os << "step,trial,delta_norm,stepA_norm,stepB_norm,D\n";
  const auto old = os.precision(12);
  for (const auto& r : recs) {
    os << r.step << ',';
    if (r.is_mean())
      os << "mean";
    else
      os << r.trial;
    os << ',' << r.delta_norm_full << ',' << r.step_a_norm_full << ',' << r.step_b_norm_full << ','
       << r.defect_full << '\n';
  }
  os.precision(old);
}

/// Reads the attention-coordinate CSV back (for reports).
inline std::vector<CommutatorRecord> read_commutator_csv(std::istream& in) {
  std::string line;
  std::vector<CommutatorRecord> out;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    if (f.size() != 11) throw FormatError("commutator CSV: expected 11 fields");
    CommutatorRecord r;
    r.step = std::stoul(f[0]);
    r.trial = f[1] == "mean" ? -1 : std::stoi(f[1]);
    r.delta_norm = std::stod(f[2]);
    r.step_a_norm = std::stod(f[3]);
    r.step_b_norm = std::stod(f[4]);
    r.defect = std::stod(f[5]);
    r.rho_exec = std::stod(f[6]);
    r.rho_rand = std::stod(f[7]);
    r.ratio = std::stod(f[8]);
    r.perp_fraction = std::stod(f[9]);
    r.k = std::stoul(f[10]);
    out.push_back(r);
  }
  return out;
}

}  // namespace emlab
