#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace emlab {

/// A precondition of a public operation was violated by the caller.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RankDeficiencyError : public std::runtime_error {
 public:
  explicit RankDeficiencyError(std::size_t column)
      : std::runtime_error("rank deficiency: column " + std::to_string(column) +
                           " vanished after orthogonalization"),
        column_(column) {}
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t column_;
};

/// Input for which the requested quantity is undefined (zero norm etc).
class UndefinedInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Loss or gradient became NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An archive is missing pieces its manifest promises.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace emlab
