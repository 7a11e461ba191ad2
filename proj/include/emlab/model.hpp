#pragma once

// Single-head attention-only transformer (optionally with ReLU MLP blocks)
// with an exact forward pass and hand-derived backpropagation.
//
// Residual stream, row-vector convention, per layer:
//   A = softmax_rows((x W_Q)(x W_K)^T / sqrt(d))     (full, non-causal)
//   x <- x + (A (x W_V)) W_O
//   x <- x + relu(x W_in + b_in) W_out + b_out       (standard variant only)
// Logits are read from the residual at the last (EOS) position.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emlab/errors.hpp"
#include "emlab/numkit.hpp"
#include "emlab/taskgen.hpp"

namespace emlab {

enum class Variant { attention_only, standard };

inline std::string_view to_string(Variant v) {
  return v == Variant::attention_only ? "attention_only" : "standard";
}
inline Variant parse_variant(std::string_view s) {
  if (s == "attention_only") return Variant::attention_only;
  if (s == "standard") return Variant::standard;
  throw ContractViolation("unknown model variant '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t embed_dim = 128;
  std::size_t num_layers = 2;
  Variant variant = Variant::attention_only;
  std::size_t mlp_hidden = 0;  ///< 0 means 4 * embed_dim
  std::size_t vocab_size = 26;
  std::size_t seq_len = 32;
  std::size_t num_classes = 8;
  double init_std = 0.02;

  std::size_t hidden() const noexcept { return mlp_hidden == 0 ? 4 * embed_dim : mlp_hidden; }
  bool has_mlp() const noexcept { return variant == Variant::standard; }

  static ModelConfig for_task(const TaskSpec& spec, std::size_t d = 128, std::size_t layers = 2,
                              Variant variant = Variant::attention_only) {
    ModelConfig c;
    c.embed_dim = d;
    c.num_layers = layers;
    c.variant = variant;
    c.vocab_size = spec.vocab().size();
    c.seq_len = spec.seq_len;
    c.num_classes = spec.modulus;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.embed_dim < 1) throw ContractViolation("ModelConfig: embed_dim must be >= 1");
  if (c.num_layers < 1) throw ContractViolation("ModelConfig: num_layers must be >= 1");
  if (c.vocab_size < 1 || c.seq_len < 1 || c.num_classes < 2)
    throw ContractViolation("ModelConfig: vocab_size, seq_len >= 1 and num_classes >= 2 required");
}

/// One named tensor inside the flat parameter vector.
struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const noexcept { return rows * cols; }
  friend bool operator==(const TensorSlot&, const TensorSlot&) = default;
};

enum class AttnRole : std::size_t { query = 0, key = 1, value = 2, output = 3 };

inline constexpr std::string_view kAttnRoleNames[4] = {"W_Q", "W_K", "W_V", "W_O"};

/// Flat ordering: token_embed, pos_embed, then per layer W_Q, W_K, W_V, W_O
/// (and mlp_in, mlp_in_bias, mlp_out, mlp_out_bias for the standard
/// variant), then readout and readout_bias.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& c) {
    validate(c);
    const std::size_t d = c.embed_dim;
    add("token_embed", c.vocab_size, d);
    add("pos_embed", c.seq_len, d);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      for (auto role : kAttnRoleNames) add(p + std::string(role), d, d);
      if (c.has_mlp()) {
        add(p + "mlp_in", d, c.hidden());
        add(p + "mlp_in_bias", 1, c.hidden());
        add(p + "mlp_out", c.hidden(), d);
        add(p + "mlp_out_bias", 1, d);
      }
    }
    add("readout", d, c.num_classes);
    add("readout_bias", 1, c.num_classes);
    per_layer_ = c.has_mlp() ? 8 : 4;
  }

  explicit ParamLayout(std::vector<TensorSlot> slots) : slots_(std::move(slots)) {
    std::size_t expect = 0;
    for (const auto& s : slots_) {
      if (s.offset != expect) throw FormatError("layout: slot '" + s.name + "' not contiguous");
      expect += s.size();
    }
    total_ = expect;
  }

  const std::vector<TensorSlot>& slots() const noexcept { return slots_; }
  std::size_t total() const noexcept { return total_; }

  const TensorSlot& find(std::string_view name) const {
    for (const auto& s : slots_)
      if (s.name == name) return s;
    throw ContractViolation("unknown tensor '" + std::string(name) + "'");
  }
  bool contains(std::string_view name) const {
    for (const auto& s : slots_)
      if (s.name == name) return true;
    return false;
  }

  const TensorSlot& token_embed() const { return slots_[0]; }
  const TensorSlot& pos_embed() const { return slots_[1]; }
  const TensorSlot& attn(std::size_t layer, AttnRole role) const {
    return slots_[2 + layer * per_layer_ + static_cast<std::size_t>(role)];
  }
  const TensorSlot& mlp(std::size_t layer, std::size_t which) const {
    return slots_[2 + layer * per_layer_ + 4 + which];
  }
  const TensorSlot& readout() const { return slots_[slots_.size() - 2]; }
  const TensorSlot& readout_bias() const { return slots_[slots_.size() - 1]; }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  void add(std::string name, std::size_t rows, std::size_t cols) {
    slots_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
  }

  std::vector<TensorSlot> slots_;
  std::size_t total_ = 0;
  std::size_t per_layer_ = 4;
};

inline std::string attn_tensor_name(std::size_t layer, AttnRole role) {
  return "layer" + std::to_string(layer) + "." +
         std::string(kAttnRoleNames[static_cast<std::size_t>(role)]);
}

/// Names of every attention weight matrix, layer-major.
inline std::vector<std::string> attention_tensor_names(const ModelConfig& c) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < c.num_layers; ++l)
    for (std::size_t r = 0; r < 4; ++r) out.push_back(attn_tensor_name(l, AttnRole(r)));
  return out;
}

/// All trainable tensors, stored contiguously in the documented flat order.
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<double> values;

  ModelParams() = default;
  explicit ModelParams(const ModelConfig& c)
      : config(c), layout(c), values(layout.total(), 0.0) {}

  MatMap tensor(const TensorSlot& s) {
    return {values.data() + s.offset, static_cast<Eigen::Index>(s.rows),
            static_cast<Eigen::Index>(s.cols)};
  }
  ConstMatMap tensor(const TensorSlot& s) const {
    return {values.data() + s.offset, static_cast<Eigen::Index>(s.rows),
            static_cast<Eigen::Index>(s.cols)};
  }
  MatMap tensor(std::string_view name) { return tensor(layout.find(name)); }
  ConstMatMap tensor(std::string_view name) const { return tensor(layout.find(name)); }

  std::size_t size() const noexcept { return values.size(); }
};

/// Gaussian(init_std) weights and embeddings, zero biases.
inline ModelParams init_params(const ModelConfig& c, Rng& rng) {
  ModelParams p(c);
  for (const auto& s : p.layout.slots()) {
    if (s.rows == 1 && s.name.ends_with("bias")) continue;
    auto t = p.tensor(s);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = c.init_std * rng.normal();
  }
  return p;
}

inline std::vector<double> flatten(const ModelParams& p) { return p.values; }

inline ModelParams unflatten(std::span<const double> flat, const ModelConfig& c) {
  ModelParams p(c);
  if (flat.size() != p.size()) {
    throw ContractViolation("unflatten: length " + std::to_string(flat.size()) + " != P " +
                            std::to_string(p.size()));
  }
  std::copy(flat.begin(), flat.end(), p.values.begin());
  return p;
}

// ---------------------------------------------------------------------------
// Batched forward / backward

/// Rewrites residual rows at a capture point during the forward pass. With
/// eos_only capture the rows are the batch's EOS residuals in sample order.
using ResidualSplice = std::function<void(MatMap rows)>;

struct CapturePoint {
  std::size_t layer = 1;  ///< residual after this block (0-based)
  bool eos_only = true;   ///< false: every position
};

/// `readout_only` computes the last block for the EOS query row alone, which
/// is all the logits depend on. `full` keeps every position in every layer.
enum class ForwardMode { readout_only, full };

struct LayerActivations {
  std::size_t query_rows = 0;  // rows per sample produced by this block (T or 1)
  EigenRowMat xq;              // B*R x d, input rows used as queries
  EigenRowMat q;               // B*R x d
  EigenRowMat k, v;            // BT x d
  EigenRowMat scores;          // B*R x T, scaled, pre-softmax
  EigenRowMat attn;            // B*R x T
  EigenRowMat z;               // B*R x d, A·V
  EigenRowMat mid;             // residual after attention (MLP variant only)
  EigenRowMat pre, hid;        // B*R x h (MLP variant only)

  std::size_t eos_row(std::size_t b) const noexcept { return b * query_rows + query_rows - 1; }
};

struct BatchActivations {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<EigenRowMat> residual;  // num_layers + 1 entries; entry l+1 has B*R_l rows
  std::vector<LayerActivations> layers;
  EigenRowMat logits;                 // B x C

  std::size_t rows_per_sample(std::size_t l) const noexcept {
    return l == 0 ? seq_len : layers[l - 1].query_rows;
  }
  /// Row of sample b's EOS position in residual[l].
  std::size_t eos_row(std::size_t l, std::size_t b) const noexcept {
    const std::size_t r = rows_per_sample(l);
    return b * r + r - 1;
  }
};

namespace detail {

inline void check_tokens(const ModelConfig& c, std::span<const std::size_t> tokens) {
  if (tokens.size() != c.seq_len) {
    throw ContractViolation("forward: token length " + std::to_string(tokens.size()) +
                            " != seq_len " + std::to_string(c.seq_len));
  }
  for (std::size_t t : tokens) {
    if (t >= c.vocab_size) {
      throw ContractViolation("forward: token id " + std::to_string(t) + " >= vocab_size " +
                              std::to_string(c.vocab_size));
    }
  }
}

inline void softmax_rows_inplace(EigenRowMat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

inline Eigen::Index idx(std::size_t i) noexcept { return static_cast<Eigen::Index>(i); }

}  // namespace detail

/// Forward pass over a batch of token sequences. `splice`, when set, is
/// applied to the residual rows selected by `capture` before the next block
/// (or the readout) consumes them.
inline BatchActivations forward_batch(const ModelParams& p,
                                      std::span<const std::vector<std::size_t>> batch,
                                      ForwardMode mode = ForwardMode::readout_only,
                                      const ResidualSplice& splice = {},
                                      CapturePoint capture = {}) {
  using detail::idx;
  const ModelConfig& c = p.config;
  const std::size_t B = batch.size();
  const std::size_t T = c.seq_len;
  const std::size_t d = c.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  if (splice && capture.layer >= c.num_layers)
    throw ContractViolation("capture layer " + std::to_string(capture.layer) + " out of range");
  if (splice && !capture.eos_only) mode = ForwardMode::full;

  BatchActivations acts;
  acts.batch = B;
  acts.seq_len = T;
  acts.residual.resize(c.num_layers + 1);
  acts.layers.resize(c.num_layers);

  EigenRowMat& x0 = acts.residual[0];
  x0.resize(idx(B * T), idx(d));
  const auto te = p.tensor(p.layout.token_embed());
  const auto pe = p.tensor(p.layout.pos_embed());
  for (std::size_t b = 0; b < B; ++b) {
    detail::check_tokens(c, batch[b]);
    for (std::size_t t = 0; t < T; ++t)
      x0.row(idx(b * T + t)) = te.row(idx(batch[b][t])) + pe.row(idx(t));
  }

  const auto Ti = idx(T);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const EigenRowMat& x = acts.residual[l];
    LayerActivations& la = acts.layers[l];
    const bool last = l + 1 == c.num_layers;
    const std::size_t R = (last && mode == ForwardMode::readout_only) ? 1 : T;
    const auto Ri = idx(R);
    la.query_rows = R;

    const auto wq = p.tensor(p.layout.attn(l, AttnRole::query));
    const auto wk = p.tensor(p.layout.attn(l, AttnRole::key));
    const auto wv = p.tensor(p.layout.attn(l, AttnRole::value));
    const auto wo = p.tensor(p.layout.attn(l, AttnRole::output));
    if (R == T) {
      la.xq = x;
    } else {
      la.xq.resize(idx(B), idx(d));
      for (std::size_t b = 0; b < B; ++b) la.xq.row(idx(b)) = x.row(idx(b * T + T - 1));
    }
    la.q.noalias() = la.xq * wq;
    la.k.noalias() = x * wk;
    la.v.noalias() = x * wv;
    la.scores.resize(idx(B * R), Ti);
    la.z.resize(idx(B * R), idx(d));
    for (std::size_t b = 0; b < B; ++b) {
      la.scores.middleRows(idx(b * R), Ri).noalias() =
          scale * la.q.middleRows(idx(b * R), Ri) * la.k.middleRows(idx(b * T), Ti).transpose();
    }
    la.attn = la.scores;
    detail::softmax_rows_inplace(la.attn);
    for (std::size_t b = 0; b < B; ++b) {
      la.z.middleRows(idx(b * R), Ri).noalias() =
          la.attn.middleRows(idx(b * R), Ri) * la.v.middleRows(idx(b * T), Ti);
    }
    EigenRowMat& out = acts.residual[l + 1];
    out = la.xq;
    out.noalias() += la.z * wo;
    if (c.has_mlp()) {
      la.mid = out;
      const auto w_in = p.tensor(p.layout.mlp(l, 0));
      const auto b_in = p.tensor(p.layout.mlp(l, 1));
      const auto w_out = p.tensor(p.layout.mlp(l, 2));
      const auto b_out = p.tensor(p.layout.mlp(l, 3));
      la.pre.noalias() = la.mid * w_in;
      la.pre.rowwise() += b_in.row(0);
      la.hid = la.pre.cwiseMax(0.0);
      out.noalias() += la.hid * w_out;
      out.rowwise() += b_out.row(0);
    }
    if (splice && capture.layer == l) {
      if (capture.eos_only && R != 1) {
        EigenRowMat rows(idx(B), idx(d));
        for (std::size_t b = 0; b < B; ++b) rows.row(idx(b)) = out.row(idx(la.eos_row(b)));
        splice(MatMap(rows.data(), rows.rows(), rows.cols()));
        for (std::size_t b = 0; b < B; ++b) out.row(idx(la.eos_row(b))) = rows.row(idx(b));
      } else {
        splice(MatMap(out.data(), out.rows(), out.cols()));
      }
    }
  }

  const auto ro = p.tensor(p.layout.readout());
  const auto rb = p.tensor(p.layout.readout_bias());
  const EigenRowMat& xl = acts.residual.back();
  acts.logits.resize(idx(B), idx(c.num_classes));
  for (std::size_t b = 0; b < B; ++b) {
    acts.logits.row(idx(b)).noalias() =
        xl.row(idx(acts.eos_row(c.num_layers, b))) * ro + rb.row(0);
  }
  return acts;
}

inline std::vector<std::vector<std::size_t>> tokens_of(std::span<const TaskSample> batch) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(s.tokens);
  return out;
}

inline std::vector<std::size_t> labels_of(std::span<const TaskSample> batch) {
  std::vector<std::size_t> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(s.label);
  return out;
}

struct ForwardCache {
  std::vector<Matrix> scores;     ///< per layer, T x T (scaled, pre-softmax)
  std::vector<Matrix> attention;  ///< per layer, T x T
  std::vector<Matrix> residual;   ///< num_layers + 1 states, T x d
  std::vector<double> logits;
};

struct ForwardResult {
  std::vector<double> logits;
  ForwardCache cache;
};

/// Single-sequence forward keeping every position of every layer.
inline ForwardResult forward(const ModelParams& p, std::span<const std::size_t> tokens) {
  const std::vector<std::vector<std::size_t>> one{
      std::vector<std::size_t>(tokens.begin(), tokens.end())};
  const auto acts = forward_batch(p, one, ForwardMode::full);
  ForwardResult r;
  r.logits.assign(acts.logits.data(), acts.logits.data() + acts.logits.size());
  r.cache.logits = r.logits;
  for (const auto& la : acts.layers) {
    r.cache.scores.push_back(Matrix::from_eigen(la.scores));
    r.cache.attention.push_back(Matrix::from_eigen(la.attn));
  }
  for (const auto& x : acts.residual) r.cache.residual.push_back(Matrix::from_eigen(x));
  return r;
}

struct EntropyReport {
  std::vector<double> per_layer;
  double mean = 0.0;
};

inline double row_entropy(std::span<const double> row) {
  double h = 0.0;
  for (double a : row)
    if (a > 0.0) h -= a * std::log(a);
  return h;
}

/// Natural-log entropy of row `position` of each layer's attention matrix.
inline EntropyReport attention_entropy(const ForwardCache& cache, std::size_t position) {
  EntropyReport out;
  for (const auto& a : cache.attention) {
    if (position >= a.rows()) throw ContractViolation("attention_entropy: position out of range");
    out.per_layer.push_back(row_entropy(a.row(position)));
  }
  for (double h : out.per_layer) out.mean += h;
  if (!out.per_layer.empty()) out.mean /= static_cast<double>(out.per_layer.size());
  return out;
}

/// Mean EOS-row attention entropy per layer over a batch.
inline std::vector<double> mean_eos_entropy(const BatchActivations& acts) {
  std::vector<double> out;
  for (const auto& la : acts.layers) {
    double sum = 0.0;
    for (std::size_t b = 0; b < acts.batch; ++b) {
      const auto row = la.attn.row(detail::idx(la.eos_row(b)));
      sum += row_entropy(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    }
    out.push_back(acts.batch == 0 ? 0.0 : sum / static_cast<double>(acts.batch));
  }
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grads;  ///< flat, same layout as ModelParams
};

/// Mean cross-entropy over the batch; optionally its gradient w.r.t. logits.
inline double cross_entropy(const BatchActivations& acts, std::span<const std::size_t> labels,
                            EigenRowMat* dlogits = nullptr) {
  const std::size_t B = acts.batch;
  double loss = 0.0;
  if (dlogits != nullptr) dlogits->resize(acts.logits.rows(), acts.logits.cols());
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = acts.logits.row(detail::idx(b));
    const double mx = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - mx).exp();
    const double z = e.sum();
    loss += -(row(detail::idx(labels[b])) - mx - std::log(z));
    if (dlogits != nullptr) {
      auto g = dlogits->row(detail::idx(b));
      g = e / z;
      g(detail::idx(labels[b])) -= 1.0;
      g /= static_cast<double>(B);
    }
  }
  return loss / static_cast<double>(B);
}

/// Exact gradient of the loss given a completed forward pass and dL/dlogits.
inline std::vector<double> backward(const ModelParams& p,
                                    std::span<const std::vector<std::size_t>> batch,
                                    const BatchActivations& acts, const EigenRowMat& dlogits) {
  using detail::idx;
  const ModelConfig& c = p.config;
  const std::size_t B = acts.batch;
  const std::size_t T = c.seq_len;
  const auto Ti = idx(T);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.embed_dim));

  ModelParams g(c);
  auto grad = [&](const TensorSlot& s) { return g.tensor(s); };

  const EigenRowMat& xl = acts.residual.back();
  const auto ro = p.tensor(p.layout.readout());
  EigenRowMat dx = EigenRowMat::Zero(xl.rows(), xl.cols());
  {
    auto dro = grad(p.layout.readout());
    auto drb = grad(p.layout.readout_bias());
    for (std::size_t b = 0; b < B; ++b) {
      const auto r = idx(acts.eos_row(c.num_layers, b));
      const auto dl = dlogits.row(idx(b));
      dro.noalias() += xl.row(r).transpose() * dl;
      drb.row(0) += dl;
      dx.row(r).noalias() = dl * ro.transpose();
    }
  }

  EigenRowMat dmid, dpre, dz, dq, dk, dv, dA, dS, dxin;
  Eigen::VectorXd rowdot;
  for (std::size_t li = c.num_layers; li-- > 0;) {
    const LayerActivations& la = acts.layers[li];
    const EigenRowMat& x = acts.residual[li];
    const std::size_t R = la.query_rows;
    const auto Ri = idx(R);

    if (c.has_mlp()) {
      const auto w_in = p.tensor(p.layout.mlp(li, 0));
      const auto w_out = p.tensor(p.layout.mlp(li, 2));
      grad(p.layout.mlp(li, 2)).noalias() += la.hid.transpose() * dx;
      grad(p.layout.mlp(li, 3)).row(0) += dx.colwise().sum();
      dpre.noalias() = dx * w_out.transpose();
      dpre.array() *= (la.pre.array() > 0.0).cast<double>();
      grad(p.layout.mlp(li, 0)).noalias() += la.mid.transpose() * dpre;
      grad(p.layout.mlp(li, 1)).row(0) += dpre.colwise().sum();
      dmid = dx;
      dmid.noalias() += dpre * w_in.transpose();
    } else {
      dmid = dx;
    }

    const auto wq = p.tensor(p.layout.attn(li, AttnRole::query));
    const auto wk = p.tensor(p.layout.attn(li, AttnRole::key));
    const auto wv = p.tensor(p.layout.attn(li, AttnRole::value));
    const auto wo = p.tensor(p.layout.attn(li, AttnRole::output));

    grad(p.layout.attn(li, AttnRole::output)).noalias() += la.z.transpose() * dmid;
    dz.noalias() = dmid * wo.transpose();

    dq.resize(dz.rows(), dz.cols());
    dk.resize(x.rows(), x.cols());
    dv.resize(x.rows(), x.cols());
    for (std::size_t b = 0; b < B; ++b) {
      const auto rq = idx(b * R);
      const auto rk = idx(b * T);
      const auto A = la.attn.middleRows(rq, Ri);
      const auto dzb = dz.middleRows(rq, Ri);
      dA.noalias() = dzb * la.v.middleRows(rk, Ti).transpose();
      dv.middleRows(rk, Ti).noalias() = A.transpose() * dzb;
      rowdot = (dA.array() * A.array()).rowwise().sum();
      dS = A.array() * (dA.colwise() - rowdot).array();
      dq.middleRows(rq, Ri).noalias() = scale * dS * la.k.middleRows(rk, Ti);
      dk.middleRows(rk, Ti).noalias() = scale * dS.transpose() * la.q.middleRows(rq, Ri);
    }
    grad(p.layout.attn(li, AttnRole::query)).noalias() += la.xq.transpose() * dq;
    grad(p.layout.attn(li, AttnRole::key)).noalias() += x.transpose() * dk;
    grad(p.layout.attn(li, AttnRole::value)).noalias() += x.transpose() * dv;

    // Gradient w.r.t. this block's query-side input (residual + W_Q path).
    dxin = dmid;
    dxin.noalias() += dq * wq.transpose();
    if (R == T) {
      dx = std::move(dxin);
    } else {
      dx = EigenRowMat::Zero(x.rows(), x.cols());
      for (std::size_t b = 0; b < B; ++b) dx.row(idx(b * T + T - 1)) = dxin.row(idx(b));
    }
    dx.noalias() += dk * wk.transpose();
    dx.noalias() += dv * wv.transpose();
  }

  auto dte = grad(p.layout.token_embed());
  auto dpe = grad(p.layout.pos_embed());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const auto r = idx(b * T + t);
      dte.row(idx(batch[b][t])) += dx.row(r);
      dpe.row(idx(t)) += dx.row(r);
    }
  }
  return std::move(g.values);
}

inline LossAndGrad loss_and_grad(const ModelParams& p, std::span<const TaskSample> batch,
                                 ForwardMode mode = ForwardMode::readout_only) {
  if (batch.empty()) throw ContractViolation("loss_and_grad: empty batch");
  const auto tokens = tokens_of(batch);
  const auto labels = labels_of(batch);
  const auto acts = forward_batch(p, tokens, mode);
  EigenRowMat dlogits;
  LossAndGrad out;
  out.loss = cross_entropy(acts, labels, &dlogits);
  out.grads = backward(p, tokens, acts, dlogits);
  return out;
}

inline double loss_only(const ModelParams& p, std::span<const TaskSample> batch) {
  if (batch.empty()) throw ContractViolation("loss_only: empty batch");
  return cross_entropy(forward_batch(p, tokens_of(batch)), labels_of(batch));
}

/// Argmax of each logits row.
inline std::vector<std::size_t> predictions(const BatchActivations& acts) {
  std::vector<std::size_t> out(acts.batch);
  for (std::size_t b = 0; b < acts.batch; ++b) {
    Eigen::Index arg = 0;
    acts.logits.row(detail::idx(b)).maxCoeff(&arg);
    out[b] = static_cast<std::size_t>(arg);
  }
  return out;
}

}  // namespace emlab
