#pragma once

// Sparse autoencoders on residual-stream activations, latent/task
// correlations, and ablation through a reconstruction splice.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "emlab/errors.hpp"
#include "emlab/model.hpp"
#include "emlab/numkit.hpp"
#include "emlab/taskgen.hpp"
#include "emlab/trainer.hpp"

namespace emlab {

struct SaeConfig {
  std::size_t input_dim = 128;
  std::size_t hidden = 512;
  double lambda = 1e-3;
  double lr = 0.05;
  std::size_t steps = 4000;
  std::size_t batch_size = 256;
  CapturePoint capture{};

  friend bool operator==(const SaeConfig&, const SaeConfig&) = default;
};

inline void validate(const SaeConfig& c) {
  if (c.input_dim < 1) throw ContractViolation("SaeConfig: input_dim must be >= 1");
  if (c.hidden < c.input_dim) throw ContractViolation("SaeConfig: hidden must be >= input_dim");
  if (c.lambda < 0.0) throw ContractViolation("SaeConfig: lambda must be >= 0");
  if (!(c.lr > 0.0)) throw ContractViolation("SaeConfig: lr must be > 0");
  if (c.batch_size < 1) throw ContractViolation("SaeConfig: batch_size must be >= 1");
}

struct SaeParams {
  EigenRowMat w_enc;        // h x d
  Eigen::RowVectorXd b_enc; // h
  EigenRowMat w_dec;        // d x h, unit columns
  Eigen::RowVectorXd b_dec; // d

  std::size_t hidden() const noexcept { return static_cast<std::size_t>(w_enc.rows()); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(w_enc.cols()); }

  /// All parameters, in the order w_enc, b_enc, w_dec, b_dec.
  std::vector<double> flat() const {
    std::vector<double> out;
    auto push = [&out](const auto& m) {
      out.insert(out.end(), m.data(), m.data() + m.size());
    };
    push(w_enc);
    push(b_enc);
    push(w_dec);
    push(b_dec);
    return out;
  }
  void set_flat(std::span<const double> v) {
    std::size_t k = 0;
    auto pull = [&](auto& m) {
      if (k + static_cast<std::size_t>(m.size()) > v.size()) throw ContractViolation("SaeParams: flat vector too short");
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(k), m.size(), m.data());
      k += static_cast<std::size_t>(m.size());
    };
    pull(w_enc);
    pull(b_enc);
    pull(w_dec);
    pull(b_dec);
    if (k != v.size()) throw ContractViolation("SaeParams: flat vector too long");
  }
};

inline void normalize_decoder(SaeParams& p) {
  for (Eigen::Index j = 0; j < p.w_dec.cols(); ++j) {
    const double n = p.w_dec.col(j).norm();
    if (n > 0.0) p.w_dec.col(j) /= n;
  }
}

/// Encoder rows Gaussian(1/√d); decoder starts as the normalized transpose;
/// decoder bias at the data mean when provided.
inline SaeParams init_sae(std::size_t d, std::size_t h, Rng& rng, const EigenRowMat* data = nullptr) {
  SaeParams p;
  p.w_enc.resize(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(d));
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (Eigen::Index i = 0; i < p.w_enc.size(); ++i) p.w_enc.data()[i] = s * rng.normal();
  p.b_enc = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(h));
  p.w_dec = p.w_enc.transpose();
  normalize_decoder(p);
  p.b_dec = data != nullptr && data->rows() > 0 ? Eigen::RowVectorXd(data->colwise().mean())
                                                : Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(d));
  return p;
}

inline EigenRowMat sae_pre(const SaeParams& p, const EigenRowMat& x) {
  EigenRowMat pre = x * p.w_enc.transpose();
  pre.rowwise() += p.b_enc;
  return pre;
}

inline EigenRowMat encode(const SaeParams& p, const EigenRowMat& x) { return sae_pre(p, x).cwiseMax(0.0); }

inline EigenRowMat decode(const SaeParams& p, const EigenRowMat& h) {
  EigenRowMat out = h * p.w_dec.transpose();
  out.rowwise() += p.b_dec;
  return out;
}

struct SaeLossGrad {
  double loss = 0.0;
  double recon = 0.0;
  double sparsity = 0.0;
  SaeParams grad;
};

/// Mean over rows of ‖x̂ − x‖² + λ‖h‖₁ and its exact gradient.
inline SaeLossGrad sae_loss_and_grad(const SaeParams& p, const EigenRowMat& x, double lambda) {
  const auto B = static_cast<double>(x.rows());
  const EigenRowMat pre = sae_pre(p, x);
  const EigenRowMat h = pre.cwiseMax(0.0);
  const EigenRowMat r = decode(p, h) - x;

  SaeLossGrad out;
  out.recon = r.squaredNorm() / B;
  out.sparsity = lambda * h.sum() / B;
  out.loss = out.recon + out.sparsity;

  const EigenRowMat dxhat = (2.0 / B) * r;
  out.grad.w_dec = dxhat.transpose() * h;
  out.grad.b_dec = dxhat.colwise().sum();
  EigenRowMat dh = dxhat * p.w_dec;
  dh.array() += lambda / B;
  const EigenRowMat dpre = (pre.array() > 0.0).select(dh, 0.0);
  out.grad.w_enc = dpre.transpose() * x;
  out.grad.b_enc = dpre.colwise().sum();
  return out;
}

struct SaeTrainResult {
  SaeParams params;
  std::vector<double> loss_curve;  ///< minibatch loss per step
};

/// Plain SGD on random minibatches, renormalizing decoder columns after
/// every update.
inline SaeTrainResult train_sae(const EigenRowMat& acts, const SaeConfig& cfg, Rng& rng) {
  validate(cfg);
  if (acts.rows() == 0) throw ContractViolation("train_sae: no activations");
  if (static_cast<std::size_t>(acts.cols()) != cfg.input_dim)
    throw ContractViolation("train_sae: activation width " + std::to_string(acts.cols()) + " != input_dim " +
                            std::to_string(cfg.input_dim));
  SaeTrainResult out;
  out.params = init_sae(cfg.input_dim, cfg.hidden, rng, &acts);
  const std::size_t n = static_cast<std::size_t>(acts.rows());
  const std::size_t bs = std::min(cfg.batch_size, n);
  EigenRowMat batch(static_cast<Eigen::Index>(bs), acts.cols());
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (bs == n) {
      batch = acts;
    } else {
      for (std::size_t i = 0; i < bs; ++i) batch.row(static_cast<Eigen::Index>(i)) = acts.row(static_cast<Eigen::Index>(rng.below(n)));
    }
    auto lg = sae_loss_and_grad(out.params, batch, cfg.lambda);
    if (!std::isfinite(lg.loss)) throw NonFiniteError("SAE training diverged at step " + std::to_string(step));
    out.params.w_enc -= cfg.lr * lg.grad.w_enc;
    out.params.b_enc -= cfg.lr * lg.grad.b_enc;
    out.params.w_dec -= cfg.lr * lg.grad.w_dec;
    out.params.b_dec -= cfg.lr * lg.grad.b_dec;
    normalize_decoder(out.params);
    out.loss_curve.push_back(lg.loss);
  }
  return out;
}

/// ‖x̂ − x‖_F / ‖x‖_F over a set of activations.
inline double reconstruction_error(const SaeParams& p, const EigenRowMat& x) {
  const double nx = x.norm();
  if (nx == 0.0) throw UndefinedInputError("reconstruction_error: zero activations");
  return (decode(p, encode(p, x)) - x).norm() / nx;
}

// ---------------------------------------------------------------------------
// Activations

struct ActivationMeta {
  std::size_t num_markers = 0;
  std::size_t label = 0;
  std::vector<std::size_t> marker_positions;
  std::size_t position = 0;  ///< sequence position of this row
};

struct ActivationSet {
  EigenRowMat acts;
  std::vector<ActivationMeta> meta;  ///< aligned with rows
};

/// Residual vectors at the capture point for `samples` (unchanged forward pass).
inline ActivationSet collect_activations(const ModelParams& p, std::span<const TaskSample> samples,
                                         CapturePoint capture = {}) {
  if (capture.layer >= p.config.num_layers)
    throw ContractViolation("collect_activations: capture layer out of range");
  ActivationSet out;
  const std::size_t T = p.config.seq_len;
  const std::size_t per = capture.eos_only ? 1 : T;
  out.acts.resize(static_cast<Eigen::Index>(samples.size() * per), static_cast<Eigen::Index>(p.config.embed_dim));
  std::size_t row = 0;
  for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
    const std::span<const TaskSample> chunk(samples.data() + start, std::min(kEvalChunk, samples.size() - start));
    const auto tokens = tokens_of(chunk);
    ResidualSplice record = [&](MatMap rows) {
      out.acts.middleRows(static_cast<Eigen::Index>(row), rows.rows()) = rows;
    };
    forward_batch(p, tokens, ForwardMode::readout_only, record, capture);
    for (const auto& s : chunk) {
      for (std::size_t k = 0; k < per; ++k) {
        out.meta.push_back({s.num_markers(), s.label, s.marker_positions, capture.eos_only ? T - 1 : k});
      }
    }
    row += chunk.size() * per;
  }
  return out;
}

inline ActivationSet collect_activations(const ModelParams& p, const TaskSpec& spec, std::size_t count, Rng& rng,
                                         CapturePoint capture = {}) {
  const auto samples = sample_batch(spec, count, rng);
  return collect_activations(p, samples, capture);
}

// ---------------------------------------------------------------------------
// Latent report

struct LatentStat {
  std::size_t latent = 0;
  double corr_m = 0.0;   ///< Pearson correlation with marker count
  double frequency = 0.0;
  std::vector<double> mean_by_bucket;  ///< first-marker position quartile
};

struct LatentReport {
  std::vector<LatentStat> latents;
  std::vector<std::size_t> top;  ///< by |corr_m|, descending
};

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n != b.size()) throw ContractViolation("pearson: length mismatch");
  if (n < 2) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline constexpr std::size_t kTopLatents = 5;
inline constexpr std::size_t kPositionBuckets = 4;

/// Statistics over precomputed latent activations (rows aligned with meta).
inline LatentReport latent_report(const EigenRowMat& h, std::span<const ActivationMeta> meta,
                                  std::size_t seq_len, std::size_t top_k = kTopLatents) {
  if (static_cast<std::size_t>(h.rows()) != meta.size())
    throw ContractViolation("latent_report: metadata not aligned with activations");
  const std::size_t n = meta.size();
  std::vector<double> m(n);
  std::vector<std::size_t> bucket(n);
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = static_cast<double>(meta[i].num_markers);
    const std::size_t first = meta[i].marker_positions.empty() ? 0 : meta[i].marker_positions.front();
    bucket[i] = std::min(kPositionBuckets - 1, first * kPositionBuckets / std::max<std::size_t>(seq_len, 1));
  }
  LatentReport r;
  std::vector<double> col(n);
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    LatentStat s;
    s.latent = static_cast<std::size_t>(j);
    std::size_t fired = 0;
    std::vector<double> sum(kPositionBuckets, 0.0), cnt(kPositionBuckets, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = h(static_cast<Eigen::Index>(i), j);
      fired += col[i] > 0.0;
      sum[bucket[i]] += col[i];
      cnt[bucket[i]] += 1.0;
    }
    s.frequency = n == 0 ? 0.0 : static_cast<double>(fired) / static_cast<double>(n);
    s.corr_m = pearson(col, m);
    for (std::size_t b = 0; b < kPositionBuckets; ++b) s.mean_by_bucket.push_back(cnt[b] > 0 ? sum[b] / cnt[b] : 0.0);
    r.latents.push_back(std::move(s));
  }
  std::vector<std::size_t> order(r.latents.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(r.latents[a].corr_m) > std::abs(r.latents[b].corr_m);
  });
  order.resize(std::min(top_k, order.size()));
  r.top = order;
  return r;
}

inline LatentReport latent_correlations(const SaeParams& p, const ActivationSet& set, std::size_t seq_len,
                                        std::size_t top_k = kTopLatents) {
  return latent_report(encode(p, set.acts), set.meta, seq_len, top_k);
}

// ---------------------------------------------------------------------------
// Ablation

/// Splice replacing x by decode(encode(x)) with `zeroed` latents set to 0.
inline ResidualSplice sae_splice(const SaeParams& p, std::vector<std::size_t> zeroed) {
  for (std::size_t j : zeroed)
    if (j >= p.hidden())
      throw ContractViolation("sae_splice: latent id " + std::to_string(j) + " >= hidden " + std::to_string(p.hidden()));
  return [&p, zeroed = std::move(zeroed)](MatMap rows) {
    const EigenRowMat x = rows;
    EigenRowMat h = encode(p, x);
    for (std::size_t j : zeroed) h.col(static_cast<Eigen::Index>(j)).setZero();
    rows = decode(p, h);
  };
}

struct AblationResult {
  double baseline = 0.0;  ///< splice without zeroing
  double ablated = 0.0;
};

inline AblationResult ablate_and_eval(const ModelParams& model, const SaeParams& sae,
                                      const std::vector<std::size_t>& latents, const EvalSet& set,
                                      CapturePoint capture = {}) {
  if (sae.input_dim() != model.config.embed_dim)
    throw ContractViolation("ablate_and_eval: SAE width does not match the model");
  const auto ablate = sae_splice(sae, latents);  // validates ids first
  AblationResult r;
  r.baseline = evaluate(model, set, sae_splice(sae, {}), capture).accuracy;
  r.ablated = latents.empty() ? r.baseline : evaluate(model, set, ablate, capture).accuracy;
  return r;
}

inline AblationResult ablate_and_eval(const ModelParams& model, const SaeParams& sae,
                                      const std::vector<std::size_t>& latents, const TaskSpec& spec,
                                      std::size_t eval_size, Rng& rng, CapturePoint capture = {}) {
  EvalSet set;
  for (std::size_t m : spec.marker_counts()) {
    TaskSpec s = spec;
    s.mixed_markers.clear();
    s.num_markers = m;
    set.marker_counts.push_back(m);
    set.samples.push_back(sample_batch(s, eval_size, rng));
  }
  return ablate_and_eval(model, sae, latents, set, capture);
}

struct SaeRow {
  std::string stage;   ///< early / mid / late
  std::string latent;  ///< latent id, or "top5" for the joint ablation
  double corr_m = 0.0;
  double freq = 0.0;
  double baseline_acc = 0.0;
  double ablated_acc = 0.0;
  double raw_acc = 0.0;  ///< unspliced model, for the fidelity gate
};

inline void write_sae_csv(std::ostream& os, const std::vector<SaeRow>& rows) {
  os << "checkpoint_stage,latent,corr_m,freq,baseline_acc,ablated_acc\n";
  const auto old = os.precision(10);
  for (const auto& r : rows)
    os << r.stage << ',' << r.latent << ',' << r.corr_m << ',' << r.freq << ',' << r.baseline_acc << ','
       << r.ablated_acc << '\n';
  os.precision(old);
}

}  // namespace emlab
