#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace bakd {

/// Dense row-major matrix. Rows are examples (or stacked batch vectors),
/// so `row(i).data()` is a contiguous feature vector.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_of(const Matrix& m);

inline std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.row(r).data(), static_cast<std::size_t>(m.cols())};
}

inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

/// Standard matrix product. Throws DimensionError naming both shapes when
/// `a.cols() != b.rows()`.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Numerically stable softmax (max is subtracted before exponentiation).
Vector softmax(std::span<const double> logits);
Vector log_softmax(std::span<const double> logits);

/// Shannon entropy in nats with 0 ln 0 = 0. Negative entries are rejected.
double entropy(std::span<const double> p);

/// Entropy of a probability vector that is already known to be valid.
/// Hot-path variant used by acquisition scoring; no validation.
double entropy_unchecked(std::span<const double> p) noexcept;

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

struct EigenPairs {
  Vector values;   // non-increasing
  Matrix vectors;  // one eigenvector per column
};

/// The `m` leading eigenpairs of a symmetric positive semidefinite matrix.
/// Columns are orthonormal; each column is sign-normalised so that its
/// largest-magnitude entry is positive. Inputs whose asymmetry exceeds 1e-8
/// are rejected.
EigenPairs top_eigenvectors(const Matrix& gram, std::size_t m);

inline constexpr double kSymmetryTolerance = 1e-8;

}  // namespace bakd
