#include "bakd/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace bakd {

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_of(a) + " by " + shape_of(b));
  }
  Matrix out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

Vector softmax(std::span<const double> logits) {
  Vector out(static_cast<Eigen::Index>(logits.size()));
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = std::exp(logits[i] - mx);
    total += out[static_cast<Eigen::Index>(i)];
  }
  out /= total;
  return out;
}

Vector log_softmax(std::span<const double> logits) {
  Vector out(static_cast<Eigen::Index>(logits.size()));
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - mx);
  const double lse = mx + std::log(total);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = logits[i] - lse;
  }
  return out;
}

double entropy(std::span<const double> p) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0)) {
      throw std::invalid_argument("entropy: entry " + std::to_string(i) +
                                  " is negative or NaN (" + std::to_string(p[i]) + ")");
    }
  }
  return entropy_unchecked(p);
}

double entropy_unchecked(std::span<const double> p) noexcept {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

EigenPairs top_eigenvectors(const Matrix& gram, std::size_t m) {
  if (gram.rows() != gram.cols()) {
    throw DimensionError("top_eigenvectors: matrix is not square (" + shape_of(gram) + ")");
  }
  const auto n = static_cast<std::size_t>(gram.rows());
  if (m > n) {
    throw std::invalid_argument("top_eigenvectors: requested " + std::to_string(m) +
                                " eigenpairs of a " + std::to_string(n) + "-dimensional matrix");
  }
  const double asym = (gram - gram.transpose()).cwiseAbs().maxCoeff();
  if (asym > kSymmetryTolerance) {
    throw std::invalid_argument("top_eigenvectors: matrix is not symmetric (max |G - G^T| = " +
                                std::to_string(asym) + ")");
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(Eigen::MatrixXd(gram),
                                                        Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("top_eigenvectors: eigensolver did not converge");
  }

  // The solver returns ascending eigenvalues.
  EigenPairs out;
  out.values.resize(static_cast<Eigen::Index>(m));
  out.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (std::size_t k = 0; k < m; ++k) {
    const auto src = static_cast<Eigen::Index>(n - 1 - k);
    const auto dst = static_cast<Eigen::Index>(k);
    out.values[dst] = solver.eigenvalues()[src];
    Vector v = solver.eigenvectors().col(src);
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v[pivot] < 0.0) v = -v;
    out.vectors.col(dst) = v;
  }
  return out;
}

}  // namespace bakd
