#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "residual_lens/error.hpp"
#include "residual_lens/linalg.hpp"
#include "support/oracles.hpp"

using namespace residual_lens;

namespace {

void expect_kind(ErrorKind kind, const auto& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

}  // namespace

TEST(RowNorms, Examples) {
  auto n = row_norms(RepMatrix::from_rows({{3, 4}, {0, 0}}));
  EXPECT_DOUBLE_EQ(n[0], 5.0);
  EXPECT_DOUBLE_EQ(n[1], 0.0);
  n = row_norms(RepMatrix::from_rows({{1, 0}, {0, 1}}));
  EXPECT_DOUBLE_EQ(n[0], 1.0);
  EXPECT_DOUBLE_EQ(n[1], 1.0);
  n = row_norms(RepMatrix::from_rows({{2, 0}, {1, 1}}));
  EXPECT_DOUBLE_EQ(n[0], 2.0);
  EXPECT_NEAR(n[1], 1.41421356, 1e-8);
}

TEST(RepMatrix, RejectsBadInput) {
  expect_kind(ErrorKind::InvalidArgument, [] { RepMatrix(0, 2, {}); });
  expect_kind(ErrorKind::DimMismatch, [] { RepMatrix(1, 2, {1.0}); });
  expect_kind(ErrorKind::InvariantViolation, [] { RepMatrix(1, 1, {std::nan("")}); });
  expect_kind(ErrorKind::DimMismatch, [] { RepMatrix::from_rows({{1, 2}, {3}}); });
}

TEST(SingularValues, Examples) {
  auto s = singular_values(RepMatrix::from_rows({{1, 0}, {0, 1}}));
  ASSERT_EQ(s.sigma.size(), 2u);
  EXPECT_NEAR(s.sigma[0], 1.0, 1e-12);
  EXPECT_NEAR(s.sigma[1], 1.0, 1e-12);
  EXPECT_NEAR(s.p[0], 0.5, 1e-12);

  s = singular_values(RepMatrix::from_rows({{1, 0}, {0, 0}}));
  EXPECT_NEAR(s.sigma[0], 1.0, 1e-12);
  EXPECT_NEAR(s.sigma[1], 0.0, 1e-12);
  EXPECT_NEAR(s.p[0], 1.0, 1e-12);
  EXPECT_NEAR(s.p[1], 0.0, 1e-12);

  s = singular_values(RepMatrix::from_rows({{2, 0}, {1, 1}}));
  EXPECT_NEAR(s.sigma[0] * s.sigma[0], 3 + std::sqrt(5.0), 1e-12);
  EXPECT_NEAR(s.sigma[1] * s.sigma[1], 3 - std::sqrt(5.0), 1e-12);
  EXPECT_NEAR(s.p[0], 0.87268, 1e-5);
  EXPECT_NEAR(s.p[1], 0.12732, 1e-5);
}

TEST(SingularValues, ZeroMatrixIsFlagged) {
  const auto s = singular_values(RepMatrix(2, 3, std::vector<double>(6, 0.0)));
  EXPECT_TRUE(s.is_zero());
  EXPECT_EQ(s.sigma.size(), 2u);
  EXPECT_TRUE(s.p.empty());
}

TEST(GramEigenvalues, Examples) {
  auto ev = gram_eigenvalues(Matrix(2, 2, {5, 0, 0, 1}));
  EXPECT_DOUBLE_EQ(ev[0], 5.0);
  EXPECT_DOUBLE_EQ(ev[1], 1.0);
  ev = gram_eigenvalues(Matrix(2, 2, {5, 1, 1, 1}));
  EXPECT_NEAR(ev[0], 3 + std::sqrt(5.0), 1e-12);
  EXPECT_NEAR(ev[1], 3 - std::sqrt(5.0), 1e-12);
  ev = gram_eigenvalues(Matrix(2, 2, 0.0));
  EXPECT_EQ(ev[0], 0.0);
  EXPECT_EQ(ev[1], 0.0);
}

TEST(GramEigenvalues, RejectsAsymmetric) {
  expect_kind(ErrorKind::InvalidArgument, [] { gram_eigenvalues(Matrix(2, 2, {1, 2, 0, 1})); });
}

TEST(SingularValues, MatchesCharacteristicPolynomial) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = 2 + trial % 2;
    const std::size_t other = 1 + rng() % 12;
    const bool tall = trial % 4 < 2;
    const std::size_t T = tall ? std::max(other, r) : r;
    const std::size_t d = tall ? r : std::max(other, r);
    const auto x = oracle::gaussian(rng, T, d);
    const auto want = oracle::charpoly_singular_values(x, T, d);
    const auto got = singular_values(RepMatrix(T, d, x));
    ASSERT_EQ(got.sigma.size(), want.size());
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got.sigma[j], want[j], 1e-9) << trial;
  }
}

TEST(SingularValues, SquaresSumToFrobenius) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng() % 40, d = 1 + rng() % 40;
    const auto x = oracle::gaussian(rng, T, d);
    const auto s = singular_values(RepMatrix(T, d, x));
    double sum = 0.0, frob = 0.0;
    for (double v : s.sigma) sum += v * v;
    for (double v : x) frob += v * v;
    EXPECT_NEAR(sum, frob, 1e-10 * frob);
    EXPECT_NEAR(s.frob_sq, frob, 1e-10 * frob);
    for (std::size_t j = 1; j < s.sigma.size(); ++j) EXPECT_GE(s.sigma[j - 1], s.sigma[j]);
  }
}

TEST(SingularValues, InvariantUnderRowPermutationAndTransposeAndScale) {
  std::mt19937_64 rng(9);
  const std::size_t T = 7, d = 5;
  const auto x = oracle::gaussian(rng, T, d);
  const auto base = singular_values(RepMatrix(T, d, x));

  std::vector<double> perm(x.size()), trans(x.size()), scaled(x.size());
  const std::size_t order[T] = {3, 0, 6, 1, 5, 2, 4};
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      perm[i * d + j] = x[order[i] * d + j];
      trans[j * T + i] = x[i * d + j];
      scaled[i * d + j] = -3.0 * x[i * d + j];
    }
  }
  const auto p = singular_values(RepMatrix(T, d, perm));
  const auto t = singular_values(RepMatrix(d, T, trans));
  const auto s = singular_values(RepMatrix(T, d, scaled));
  for (std::size_t j = 0; j < base.sigma.size(); ++j) {
    EXPECT_NEAR(p.sigma[j], base.sigma[j], 1e-12);
    EXPECT_NEAR(t.sigma[j], base.sigma[j], 1e-12);
    EXPECT_NEAR(s.sigma[j], 3.0 * base.sigma[j], 1e-11);
    EXPECT_NEAR(s.p[j], base.p[j], 1e-12);
  }
}

TEST(SmallerGram, PicksSmallerSide) {
  const auto x = RepMatrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Matrix g = smaller_gram(x);
  ASSERT_EQ(g.rows(), 2u);
  EXPECT_DOUBLE_EQ(g(0, 0), 14.0);
  EXPECT_DOUBLE_EQ(g(0, 1), 32.0);
  EXPECT_DOUBLE_EQ(g(1, 1), 77.0);
}
