#pragma once

// Trajectory PCA, effective rank, execution bases and subspace projections.
//
// PCA runs on the n x n Gram matrix of centered snapshots rather than the
// P' x P' covariance: with n ~ 100 checkpoints and P' ~ 16k the nonzero
// spectra coincide and only the small problem is solved.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "emlab/errors.hpp"
#include "emlab/model.hpp"
#include "emlab/numkit.hpp"
#include "emlab/trajstore.hpp"

namespace emlab {

/// Rows [0, rows) and columns [col0, col0 + width) of a snapshot matrix.
inline Matrix snapshot_block(const Matrix& snapshots, std::size_t col0, std::size_t width,
                             std::size_t rows) {
  if (col0 + width > snapshots.cols() || rows > snapshots.rows())
    throw ContractViolation("snapshot_block: range out of bounds");
  Matrix out(rows, width);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto src = snapshots.row(i);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(col0), width, out.row(i).begin());
  }
  return out;
}

inline Matrix snapshot_block(const TrajectoryMatrix& traj, const TensorSlot& slot,
                             std::optional<std::size_t> rows = std::nullopt) {
  return snapshot_block(traj.data, slot.offset, slot.size(), rows.value_or(traj.snapshots()));
}

inline const TensorSlot& find_tensor(const TrajectoryMatrix& traj, std::string_view name) {
  for (const auto& t : traj.tensors)
    if (t.name == name) return t;
  throw ContractViolation("trajectory has no tensor '" + std::string(name) + "'");
}

/// Mean-removed snapshots.
inline Matrix centered(const Matrix& snapshots) {
  Matrix out = snapshots;
  const std::size_t n = snapshots.rows();
  if (n == 0) return out;
  auto m = out.map();
  const Eigen::RowVectorXd mean = m.colwise().mean();
  m.rowwise() -= mean;
  return out;
}

struct TrajectorySpectrum {
  Spectrum spectrum;   ///< eigenvalues of the 1/n covariance; n entries, descending
  Matrix gram_vectors; ///< n x n, columns pair with `spectrum`
  std::size_t snapshots = 0;
};

/// Spectrum of the 1/n covariance from an n x n centered Gram matrix.
inline TrajectorySpectrum spectrum_from_gram(const Matrix& centered_gram) {
  const std::size_t n = centered_gram.rows();
  if (n < 2) throw ContractViolation("trajectory spectrum needs n >= 2 snapshots");
  Matrix g = centered_gram;
  g.map() /= static_cast<double>(n);
  TrajectorySpectrum out;
  out.snapshots = n;
  if (g.map().cwiseAbs().maxCoeff() == 0.0) {
    out.spectrum.eigenvalues.assign(n, 0.0);
    out.gram_vectors = Matrix::identity(n);
    return out;
  }
  auto eig = sym_eig(g);
  out.spectrum = std::move(eig.spectrum);
  out.gram_vectors = std::move(eig.vectors);
  return out;
}

inline TrajectorySpectrum trajectory_spectrum(const Matrix& snapshots) {
  if (snapshots.rows() < 2) throw ContractViolation("trajectory spectrum needs n >= 2 snapshots");
  const Matrix xc = centered(snapshots);
  Matrix g(xc.rows(), xc.rows());
  g.map().noalias() = xc.map() * xc.map().transpose();
  // Symmetrize away rounding asymmetry before the eigensolver's check.
  g.map() = (0.5 * (g.map() + g.map().transpose())).eval();
  return spectrum_from_gram(g);
}

inline TrajectorySpectrum trajectory_spectrum(const TrajectoryMatrix& traj) {
  return trajectory_spectrum(traj.data);
}

/// Top-k principal directions (P' x k, unit columns) recovered as
/// combinations of centered snapshots. Only directions with a nonzero
/// eigenvalue are returned, so the result may have fewer than k columns.
/// Each column's largest-magnitude entry is positive.
inline Matrix principal_directions(const Matrix& snapshots, const TrajectorySpectrum& ts,
                                   std::size_t k) {
  std::size_t nonzero = 0;
  while (nonzero < ts.spectrum.size() && ts.spectrum.eigenvalues[nonzero] > 0.0) ++nonzero;
  k = std::min(k, nonzero);
  const Matrix xc = centered(snapshots);
  Matrix out(snapshots.cols(), k);
  if (k == 0) return out;
  const auto v = ts.gram_vectors.map().leftCols(static_cast<Eigen::Index>(k));
  auto u = out.map();
  u.noalias() = xc.map().transpose() * v;
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    auto c = u.col(j);
    c.normalize();
    Eigen::Index arg = 0;
    c.cwiseAbs().maxCoeff(&arg);
    if (c(arg) < 0) c = -c;
  }
  return out;
}

/// Smallest k whose leading eigenvalues hold at least `tau` of the total.
inline std::size_t effective_rank(const Spectrum& s, double tau = 0.90) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ContractViolation("effective_rank: tau must be in (0, 1]");
  const double total = s.total();
  if (total <= 0.0) return 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    acc += s.eigenvalues[k];
    // Relative slack keeps exact-threshold cases (e.g. 0.9 of 1.0) stable
    // under summation rounding.
    if (acc >= tau * total * (1.0 - 1e-12)) return k + 1;
  }
  return s.size();
}

/// Centered Gram matrices of every row prefix of a snapshot block, without
/// recomputing inner products: entries are displacements from row 0, and
/// centering a prefix is J G J on its leading principal submatrix.
class PrefixGram {
 public:
  explicit PrefixGram(const Matrix& snapshots) : n_(snapshots.rows()), raw_(n_, n_) {
    if (n_ == 0) return;
    Matrix disp = snapshots;
    auto d = disp.map();
    const Eigen::RowVectorXd w0 = d.row(0);
    d.rowwise() -= w0;
    raw_.map().noalias() = d * d.transpose();
    raw_.map() = (0.5 * (raw_.map() + raw_.map().transpose())).eval();
  }

  std::size_t size() const noexcept { return n_; }

  Matrix centered_gram(std::size_t rows) const {
    if (rows > n_) throw ContractViolation("PrefixGram: prefix longer than trajectory");
    const auto r = static_cast<Eigen::Index>(rows);
    const Eigen::MatrixXd g = raw_.map().topLeftCorner(r, r);
    const Eigen::VectorXd mean = g.rowwise().mean();
    const double grand = mean.mean();
    Matrix out(rows, rows);
    auto o = out.map();
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < r; ++j) o(i, j) = g(i, j) - mean(i) - mean(j) + grand;
    o = (0.5 * (o + o.transpose())).eval();
    return out;
  }

  TrajectorySpectrum spectrum(std::size_t rows) const { return spectrum_from_gram(centered_gram(rows)); }

 private:
  std::size_t n_;
  Matrix raw_;
};

// ---------------------------------------------------------------------------
// Execution basis

inline constexpr std::size_t kMaxComponentsPerBlock = 8;

struct ExecutionBasis {
  Matrix basis;                          ///< dims x K, orthonormal columns
  std::vector<std::string> tensors;      ///< blocks that contributed
  std::vector<std::size_t> k_per_block;  ///< components requested per block
  std::vector<std::size_t> r90_per_block;
  std::size_t upto_step = 0;
  std::size_t dropped = 0;               ///< columns removed as dependent

  std::size_t dims() const noexcept { return basis.rows(); }
  std::size_t k() const noexcept { return basis.cols(); }
};

struct BasisOptions {
  /// Fixed components per block; unset means min(block r90, 8).
  std::optional<std::size_t> k_per_block;
  double tau = 0.90;
  /// Receives a message when dependent columns are dropped.
  std::function<void(const std::string&)> warn;
};

/// Builds the execution basis in the coordinate space of `traj` (its
/// columns), from the named blocks' snapshots with step <= upto_step.
inline ExecutionBasis build_execution_basis(const TrajectoryMatrix& traj,
                                            const std::vector<std::string>& blocks,
                                            std::size_t upto_step, const BasisOptions& opts = {}) {
  std::size_t rows = 0;
  while (rows < traj.steps.size() && traj.steps[rows] <= upto_step) ++rows;
  if (rows < 2)
    throw ContractViolation("build_execution_basis: need >= 2 checkpoints at or before step " +
                            std::to_string(upto_step));

  ExecutionBasis out;
  out.upto_step = upto_step;
  std::vector<std::pair<const TensorSlot*, Matrix>> parts;
  std::size_t total_k = 0;
  for (const auto& name : blocks) {
    const TensorSlot& slot = find_tensor(traj, name);
    const Matrix block = snapshot_block(traj, slot, rows);
    const auto ts = trajectory_spectrum(block);
    const std::size_t r90 = effective_rank(ts.spectrum, opts.tau);
    const std::size_t want = opts.k_per_block.value_or(std::min(r90, kMaxComponentsPerBlock));
    Matrix dirs = principal_directions(block, ts, want);
    out.tensors.push_back(name);
    out.k_per_block.push_back(want);
    out.r90_per_block.push_back(r90);
    total_k += dirs.cols();
    parts.emplace_back(&slot, std::move(dirs));
  }

  Matrix stacked(traj.dims(), total_k);
  std::size_t col = 0;
  for (const auto& [slot, dirs] : parts) {
    for (std::size_t j = 0; j < dirs.cols(); ++j, ++col)
      for (std::size_t i = 0; i < dirs.rows(); ++i) stacked(slot->offset + i, col) = dirs(i, j);
  }
  auto ortho = orthonormalize_columns(stacked);
  out.dropped = ortho.dropped.size();
  if (out.dropped > 0 && opts.warn)
    opts.warn("execution basis: dropped " + std::to_string(out.dropped) +
              " dependent column(s) at step " + std::to_string(upto_step));
  out.basis = std::move(ortho.q);
  return out;
}

/// Basis over the full parameter vector, from every attention block of a
/// run archive.
inline ExecutionBasis build_execution_basis(const std::filesystem::path& run_dir, std::size_t upto_step,
                                            const BasisOptions& opts = {}) {
  const auto traj = load_trajectory(run_dir, {}, upto_step);
  std::vector<std::string> blocks;
  for (const auto& t : traj.tensors)
    if (t.name.find(".W_") != std::string::npos) blocks.push_back(t.name);
  return build_execution_basis(traj, blocks, upto_step, opts);
}

// ---------------------------------------------------------------------------
// Projections

/// ‖B Bᵀ v‖ / ‖v‖.
inline double projection_fraction(std::span<const double> v, const Matrix& basis) {
  if (v.size() != basis.rows())
    throw ContractViolation("projection_fraction: vector length " + std::to_string(v.size()) +
                            " != basis rows " + std::to_string(basis.rows()));
  const double nv = norm2(v);
  if (nv == 0.0) throw UndefinedInputError("projection_fraction: zero vector");
  const ConstVecMap vm(v.data(), static_cast<Eigen::Index>(v.size()));
  const Eigen::VectorXd coeff = basis.map().transpose() * vm;
  return std::min(1.0, coeff.norm() / nv);
}

struct Decomposition {
  std::vector<double> parallel;  ///< B Bᵀ v
  std::vector<double> perp;      ///< v − B Bᵀ v
  double rho = 0.0;              ///< ‖parallel‖ / ‖v‖
  double perp_fraction = 0.0;    ///< ‖perp‖ / ‖v‖
};

inline Decomposition decompose(std::span<const double> v, const Matrix& basis) {
  const double rho = projection_fraction(v, basis);
  const ConstVecMap vm(v.data(), static_cast<Eigen::Index>(v.size()));
  const Eigen::VectorXd coeff = basis.map().transpose() * vm;
  Decomposition d;
  d.parallel.resize(v.size());
  d.perp.resize(v.size());
  VecMap par(d.parallel.data(), static_cast<Eigen::Index>(v.size()));
  par.noalias() = basis.map() * coeff;
  VecMap(d.perp.data(), static_cast<Eigen::Index>(v.size())) = vm - par;
  d.rho = rho;
  // ‖perp‖ from the exact Pythagorean split is more accurate than 1 − ρ²
  // when ρ ≈ 1, and the explicit residual is more accurate when ρ ≈ 0.
  d.perp_fraction = std::min(1.0, norm2(d.perp) / norm2(v));
  return d;
}

/// K-column orthonormal basis of a Gaussian random subspace of R^dims.
inline Matrix random_basis(std::size_t dims, std::size_t k, Rng& rng) {
  if (k >= dims) throw ContractViolation("random basis: need K < P");
  return qr_thin(gaussian(rng, dims, k, 1.0)).q;
}

/// Mean projection fraction of each vector onto `trials` random K-dimensional
/// subspaces (the same subspaces for every vector).
inline std::vector<double> random_projection_baseline(const std::vector<std::span<const double>>& vs,
                                                      std::size_t k, std::size_t trials, Rng& rng) {
  if (vs.empty()) return {};
  if (trials < 1) throw ContractViolation("random_projection_baseline: trials must be >= 1");
  const std::size_t dims = vs.front().size();
  std::vector<double> mean(vs.size(), 0.0);
  for (std::size_t t = 0; t < trials; ++t) {
    const Matrix q = random_basis(dims, k, rng);
    for (std::size_t i = 0; i < vs.size(); ++i) mean[i] += projection_fraction(vs[i], q);
  }
  for (double& m : mean) m /= static_cast<double>(trials);
  return mean;
}

inline double random_projection_baseline(std::span<const double> v, std::size_t k, std::size_t trials,
                                         Rng& rng) {
  return random_projection_baseline(std::vector<std::span<const double>>{v}, k, trials, rng).front();
}

/// Principal angles between the column spans of two orthonormal bases,
/// ascending. Small angles come from sines of the complement projection,
/// large ones from cosines, so both ends are accurate.
inline std::vector<double> principal_angles(const Matrix& a_in, const Matrix& b_in) {
  if (a_in.rows() != b_in.rows())
    throw ContractViolation("principal_angles: bases over different dimensions " +
                            std::to_string(a_in.rows()) + " vs " + std::to_string(b_in.rows()));
  const bool swap = a_in.cols() < b_in.cols();
  const Matrix& a = swap ? b_in : a_in;  // a has at least as many columns
  const Matrix& b = swap ? a_in : b_in;
  const std::size_t k = b.cols();
  if (k == 0) return {};

  const Matrix c = matmul_tn(a, b);  // ka x k
  auto cos = singular_values(c);     // descending
  Matrix resid = b;
  resid.map().noalias() -= a.map() * c.map();
  auto sin = singular_values(resid);  // descending
  std::reverse(sin.begin(), sin.end());

  std::vector<double> angles(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double ci = std::clamp(cos[i], 0.0, 1.0);
    const double si = std::clamp(sin[i], 0.0, 1.0);
    angles[i] = si * si < 0.5 ? std::asin(si) : std::acos(ci);
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

// ---------------------------------------------------------------------------
// Rank time series

struct RankRecord {
  std::size_t step = 0;
  std::string tensor;
  std::size_t r90 = 0;
  std::vector<double> top;  ///< leading eigenvalues, up to 8
};

/// r90 of each named block over the accumulated trajectory [0, step] at
/// every checkpoint step with at least two snapshots.
inline std::vector<RankRecord> rank_timeseries(const TrajectoryMatrix& traj,
                                               const std::vector<std::string>& blocks,
                                               double tau = 0.90) {
  std::vector<RankRecord> out;
  std::vector<PrefixGram> grams;
  for (const auto& name : blocks) grams.emplace_back(snapshot_block(traj, find_tensor(traj, name)));
  for (std::size_t rows = 2; rows <= traj.snapshots(); ++rows) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto ts = grams[b].spectrum(rows);
      RankRecord r;
      r.step = traj.steps[rows - 1];
      r.tensor = blocks[b];
      r.r90 = effective_rank(ts.spectrum, tau);
      const std::size_t top = std::min<std::size_t>(8, ts.spectrum.size());
      r.top.assign(ts.spectrum.eigenvalues.begin(), ts.spectrum.eigenvalues.begin() + static_cast<std::ptrdiff_t>(top));
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline void write_rank_csv(std::ostream& os, const std::vector<RankRecord>& records) {
  os << "step,tensor,r90";
  for (int i = 1; i <= 8; ++i) os << ",lambda_" << i;
  os << '\n';
  const auto old = os.precision(12);
  for (const auto& r : records) {
    os << r.step << ',' << r.tensor << ',' << r.r90;
    for (std::size_t i = 0; i < 8; ++i) os << ',' << (i < r.top.size() ? r.top[i] : 0.0);
    os << '\n';
  }
  os.precision(old);
}

}  // namespace emlab
