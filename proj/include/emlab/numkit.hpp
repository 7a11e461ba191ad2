#pragma once

// Dense linear algebra and counter-based random numbers shared by every
// other emlab module. All in-memory numerics are 64-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "emlab/errors.hpp"

namespace emlab {

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ContractViolation("Matrix: data length " + std::to_string(data_.size()) +
                              " != rows*cols " + std::to_string(rows_ * cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ContractViolation("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix from_eigen(const EigenRowMat& e) {
    Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    m.map() = e;
    return m;
  }
  /// Column vector from a flat list.
  static Matrix column(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::vector<double> col(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  MatMap map() noexcept {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }
  ConstMatMap map() const noexcept {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double frobenius_norm(const Matrix& m) { return m.map().norm(); }

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ContractViolation("matmul: a.cols " + std::to_string(a.cols()) + " != b.rows " +
                            std::to_string(b.rows()));
  }
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  out.map().noalias() = a.map() * b.map();
  return out;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ContractViolation("matmul_tn: row mismatch");
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  out.map().noalias() = a.map().transpose() * b.map();
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers

namespace detail {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t splitmix_finalize(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}
}  // namespace detail

/// Stream label derived from a purpose tag and up to three integers, e.g.
/// stream_label("train", step). Distinct tuples give unrelated labels.
constexpr std::uint64_t stream_label(std::string_view purpose, std::uint64_t a = 0,
                                     std::uint64_t b = 0, std::uint64_t c = 0) noexcept {
  std::uint64_t h = detail::splitmix_finalize(detail::fnv1a(purpose));
  h = detail::splitmix_finalize(h ^ (a + detail::kGolden));
  h = detail::splitmix_finalize(h ^ (b + 2 * detail::kGolden));
  h = detail::splitmix_finalize(h ^ (c + 3 * detail::kGolden));
  return h;
}

/// Counter-based generator: output i of stream (seed, stream_id) is a pure
/// function of (seed, stream_id, i). Integer arithmetic only, so streams are
/// bit-identical on every platform.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream_id) noexcept
      : key_(detail::splitmix_finalize(detail::splitmix_finalize(seed) ^
                                       detail::splitmix_finalize(stream_id + detail::kGolden))),
        seed_(seed),
        stream_id_(stream_id) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t z = key_ + (++counter_) * detail::kGolden;
    return detail::splitmix_finalize(detail::splitmix_finalize(z) ^ key_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), unbiased (rejection on the top range).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractViolation("Rng::below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Independent child stream; the parent is untouched.
  Rng child(std::uint64_t label) const noexcept {
    return Rng(seed_, detail::splitmix_finalize(stream_id_ ^ (label + detail::kGolden)));
  }

 private:
  std::uint64_t key_;
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  if (!(stddev > 0.0)) throw ContractViolation("gaussian: stddev must be positive");
  Matrix m(rows, cols);
  for (double& x : m.data()) x = stddev * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Factorizations

struct QrResult {
  Matrix q;
  Matrix r;
};

namespace detail {

/// Column-major copy; Gram-Schmidt works column by column.
inline std::vector<std::vector<double>> columns_of(const Matrix& a) {
  std::vector<std::vector<double>> cols(a.cols(), std::vector<double>(a.rows()));
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) cols[c][r] = row[c];
  }
  return cols;
}

inline Matrix from_columns(const std::vector<std::vector<double>>& cols, std::size_t rows) {
  Matrix m(rows, cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c)
    for (std::size_t r = 0; r < rows; ++r) m(r, c) = cols[c][r];
  return m;
}

/// Two passes of modified Gram-Schmidt of `v` against `basis`, accumulating
/// the coefficients into `coeff`.
inline void orthogonalize_against(std::vector<double>& v,
                                  const std::vector<std::vector<double>>& basis,
                                  std::vector<double>* coeff) {
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < basis.size(); ++j) {
      const double c = dot(basis[j], v);
      const auto& q = basis[j];
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * q[i];
      if (coeff != nullptr) (*coeff)[j] += c;
    }
  }
}

}  // namespace detail

/// Thin QR by re-orthogonalized modified Gram-Schmidt. Throws
/// RankDeficiencyError when a column vanishes after orthogonalization
/// (norm below 1e-12 relative to its original norm).
inline QrResult qr_thin(const Matrix& a) {
  if (a.rows() < a.cols()) {
    throw ContractViolation("qr_thin: needs rows >= cols, got " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()));
  }
  const std::size_t n = a.cols();
  auto cols = detail::columns_of(a);
  std::vector<std::vector<double>> qcols;
  qcols.reserve(n);
  Matrix r(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    auto v = std::move(cols[j]);
    const double original = norm2(v);
    std::vector<double> coeff(qcols.size(), 0.0);
    detail::orthogonalize_against(v, qcols, &coeff);
    const double nv = norm2(v);
    if (original == 0.0 || nv < 1e-12 * std::max(original, 1.0)) {
      throw RankDeficiencyError(j);
    }
    for (std::size_t i = 0; i < coeff.size(); ++i) r(i, j) = coeff[i];
    r(j, j) = nv;
    for (double& x : v) x /= nv;
    qcols.push_back(std::move(v));
  }
  return {detail::from_columns(qcols, a.rows()), std::move(r)};
}

struct OrthonormalizeResult {
  Matrix q;                        ///< rows × kept orthonormal columns
  std::vector<std::size_t> kept;   ///< input column indices that survived
  std::vector<std::size_t> dropped;
};

/// Gram-Schmidt that drops columns which become numerically dependent
/// instead of failing.
inline OrthonormalizeResult orthonormalize_columns(const Matrix& a, double rel_tol = 1e-8) {
  auto cols = detail::columns_of(a);
  std::vector<std::vector<double>> qcols;
  OrthonormalizeResult out;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    auto v = std::move(cols[j]);
    const double original = norm2(v);
    detail::orthogonalize_against(v, qcols, nullptr);
    const double nv = norm2(v);
    if (original == 0.0 || nv < rel_tol * original) {
      out.dropped.push_back(j);
      continue;
    }
    for (double& x : v) x /= nv;
    qcols.push_back(std::move(v));
    out.kept.push_back(j);
  }
  out.q = detail::from_columns(qcols, a.rows());
  return out;
}

/// Eigenvalues sorted nonincreasing, clamped at zero.
struct Spectrum {
  std::vector<double> eigenvalues;

  std::size_t size() const noexcept { return eigenvalues.size(); }
  double total() const noexcept {
    double s = 0.0;
    for (double x : eigenvalues) s += x;
    return s;
  }
};

struct EigResult {
  Spectrum spectrum;
  Matrix vectors;           ///< columns are eigenvectors, matching spectrum order
  std::vector<double> raw;  ///< unclamped eigenvalues, same order
};

namespace detail {
inline void check_symmetric(const Matrix& s, const char* who) {
  if (s.rows() != s.cols()) throw ContractViolation(std::string(who) + ": matrix not square");
  double scale = 0.0;
  for (double x : s.data()) scale = std::max(scale, std::abs(x));
  const double tol = 1e-10 * std::max(scale, 1e-300);
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j)
      if (std::abs(s(i, j) - s(j, i)) > tol)
        throw ContractViolation(std::string(who) + ": matrix not symmetric at (" +
                                std::to_string(i) + "," + std::to_string(j) + ")");
}
}  // namespace detail

/// Cyclic Jacobi eigensolver for symmetric matrices.
inline EigResult sym_eig(const Matrix& s_in) {
  detail::check_symmetric(s_in, "sym_eig");
  const std::size_t n = s_in.rows();
  Matrix a = s_in;
  // Symmetrize exactly so rotations stay consistent.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
  Matrix v = Matrix::identity(n);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    double diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off <= 1e-32 * diag || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  EigResult out;
  out.vectors = Matrix(n, n);
  out.raw.resize(n);
  out.spectrum.eigenvalues.resize(n);
  const double top = n > 0 ? std::max(a(order[0], order[0]), 0.0) : 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double lam = a(order[k], order[k]);
    out.raw[k] = lam;
    // |λ| ≤ 1e-10·λ_max is noise; negatives are clamped.
    out.spectrum.eigenvalues[k] = lam > 1e-10 * top ? lam : 0.0;
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto in = a.row(r);
    auto o = out.row(r);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& x : o) x /= sum;
  }
  return out;
}

/// Singular values of a (descending), via the eigenvalues of aᵀa.
inline std::vector<double> singular_values(const Matrix& a) {
  const Matrix g = matmul_tn(a, a);
  const auto eig = sym_eig(g);
  std::vector<double> s;
  s.reserve(eig.raw.size());
  for (double lam : eig.raw) s.push_back(std::sqrt(std::max(lam, 0.0)));
  return s;
}

}  // namespace emlab
