#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace residual_lens {

// Dense row-major matrix of doubles. No invariants beyond shape consistency.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// A layer's token-representation matrix X: T rows (tokens) by d columns
// (features). Construction enforces T, d >= 1 and finite entries.
class RepMatrix {
 public:
  RepMatrix(std::size_t tokens, std::size_t dim, std::vector<double> data);
  explicit RepMatrix(Matrix m);
  static RepMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t tokens() const noexcept { return m_.rows(); }
  std::size_t dim() const noexcept { return m_.cols(); }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }
  std::span<const double> row(std::size_t i) const { return m_.row(i); }
  const Matrix& matrix() const noexcept { return m_; }

 private:
  Matrix m_;
};

struct SpectrumSummary {
  std::vector<double> sigma;  // non-increasing, length r = min(T, d)
  std::vector<double> p;      // sigma_j^2 / frob_sq; empty when frob_sq == 0
  double frob_sq = 0.0;

  std::size_t rank_bound() const noexcept { return sigma.size(); }
  bool is_zero() const noexcept { return frob_sq == 0.0; }
};

inline constexpr int kJacobiMaxSweeps = 64;
inline constexpr double kJacobiRelTol = 1e-12;

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);

std::vector<double> row_norms(const RepMatrix& x);

// X^T X when d <= T, otherwise X X^T. Always the r x r Gram, r = min(T, d).
Matrix smaller_gram(const RepMatrix& x);

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
// non-increasing. Throws NoConvergence after kJacobiMaxSweeps sweeps and
// InvalidArgument if the input is not symmetric to 1e-12 relative.
std::vector<double> gram_eigenvalues(const Matrix& s);

// Singular values via the eigenvalues of the smaller Gram matrix.
// Precision caveat: squaring loses relative accuracy for sigma_j much smaller
// than sigma_1 (absolute error ~ eps * sigma_1^2 in sigma_j^2). The entropy and
// anisotropy metrics weight by sigma^2, so that error is harmless there.
// An all-zero X yields frob_sq == 0, zero sigmas and an empty p.
SpectrumSummary singular_values(const RepMatrix& x);

}  // namespace residual_lens
