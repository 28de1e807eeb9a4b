#include "residual_lens/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "residual_lens/error.hpp"

namespace residual_lens {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorKind::DimMismatch,
                "matrix data has " + std::to_string(data_.size()) + " entries, expected " +
                    std::to_string(rows_ * cols_));
  }
}

RepMatrix::RepMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() == 0 || m_.cols() == 0) {
    throw Error(ErrorKind::InvalidArgument, "representation matrix needs T >= 1 and d >= 1");
  }
  for (double v : m_.data()) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::InvariantViolation, "representation matrix has a non-finite entry");
    }
  }
}

RepMatrix::RepMatrix(std::size_t tokens, std::size_t dim, std::vector<double> data)
    : RepMatrix(Matrix(tokens, dim, std::move(data))) {}

RepMatrix RepMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t t = rows.size();
  const std::size_t d = t == 0 ? 0 : rows.front().size();
  std::vector<double> flat;
  flat.reserve(t * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw Error(ErrorKind::DimMismatch, "ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return RepMatrix(t, d, std::move(flat));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

std::vector<double> row_norms(const RepMatrix& x) {
  std::vector<double> out(x.tokens());
  for (std::size_t i = 0; i < x.tokens(); ++i) out[i] = std::sqrt(squared_norm(x.row(i)));
  return out;
}

Matrix smaller_gram(const RepMatrix& x) {
  const std::size_t t = x.tokens();
  const std::size_t d = x.dim();
  if (d <= t) {
    // X^T X, accumulated row by row in token order.
    Matrix g(d, d);
    for (std::size_t i = 0; i < t; ++i) {
      const auto r = x.row(i);
      for (std::size_t a = 0; a < d; ++a) {
        const double ra = r[a];
        if (ra == 0.0) continue;
        for (std::size_t b = a; b < d; ++b) g(a, b) += ra * r[b];
      }
    }
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < a; ++b) g(a, b) = g(b, a);
    return g;
  }
  Matrix g(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i; j < t; ++j) {
      const double v = dot(x.row(i), x.row(j));
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

namespace {

double frobenius(const Matrix& s) { return std::sqrt(squared_norm(s.data())); }

double max_off_diagonal(const Matrix& a) {
  double m = 0.0;
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs(a(i, j)));
  return m;
}

void rotate(Matrix& a, std::size_t p, std::size_t q) {
  const double apq = a(p, q);
  const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
  const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
  const double c = 1.0 / std::sqrt(t * t + 1.0);
  const double s = t * c;
  const std::size_t n = a.rows();
  a(p, p) -= t * apq;
  a(q, q) += t * apq;
  a(p, q) = 0.0;
  a(q, p) = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (r == p || r == q) continue;
    const double arp = a(r, p);
    const double arq = a(r, q);
    const double np = c * arp - s * arq;
    const double nq = s * arp + c * arq;
    a(r, p) = np;
    a(p, r) = np;
    a(r, q) = nq;
    a(q, r) = nq;
  }
}

}  // namespace

std::vector<double> gram_eigenvalues(const Matrix& s) {
  const std::size_t n = s.rows();
  if (s.cols() != n) throw Error(ErrorKind::InvalidArgument, "eigensolver needs a square matrix");
  const double fro = frobenius(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(s(i, j) - s(j, i)) > kJacobiRelTol * fro) {
        throw Error(ErrorKind::InvalidArgument, "eigensolver input is not symmetric");
      }
    }
  }

  Matrix a = s;
  const double tol = kJacobiRelTol * fro;
  bool converged = max_off_diagonal(a) <= tol;
  for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) > 0.0) rotate(a, p, q);
      }
    }
    converged = max_off_diagonal(a) <= tol;
  }
  if (!converged) {
    throw Error(ErrorKind::NoConvergence,
                "Jacobi did not converge in " + std::to_string(kJacobiMaxSweeps) + " sweeps");
  }

  std::vector<double> evals(n);
  for (std::size_t i = 0; i < n; ++i) evals[i] = a(i, i);
  std::sort(evals.begin(), evals.end(), std::greater<>());
  return evals;
}

SpectrumSummary singular_values(const RepMatrix& x) {
  SpectrumSummary out;
  out.frob_sq = squared_norm(x.matrix().data());
  const Matrix g = smaller_gram(x);
  const std::size_t r = g.rows();
  if (out.frob_sq == 0.0) {
    out.sigma.assign(r, 0.0);
    return out;
  }

  std::vector<double> evals = gram_eigenvalues(g);
  const double clamp_floor = -kJacobiRelTol * frobenius(g);
  out.sigma.resize(r);
  out.p.resize(r);
  for (std::size_t j = 0; j < r; ++j) {
    double lambda = evals[j];
    if (lambda < 0.0) {
      if (lambda < clamp_floor) {
        throw Error(ErrorKind::NoConvergence, "Gram eigenvalue is significantly negative");
      }
      lambda = 0.0;
    }
    out.sigma[j] = std::sqrt(lambda);
    out.p[j] = lambda / out.frob_sq;
  }
  return out;
}

}  // namespace residual_lens
