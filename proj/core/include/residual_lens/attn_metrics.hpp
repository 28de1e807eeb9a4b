#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace residual_lens {

inline constexpr double kRowSumTolerance = 1e-5;
inline constexpr double kCausalTolerance = 1e-7;
inline constexpr double kRenormLogThreshold = 1e-6;
inline constexpr double kDefaultSinkTau = 0.3;
inline constexpr double kDefaultColsumTau = 0.3;

// One head's T x T attention weights, row-major. Non-owning.
struct AttnHead {
  std::span<const double> weights;
  std::size_t tokens = 0;

  double operator()(std::size_t i, std::size_t j) const { return weights[i * tokens + j]; }
  std::span<const double> row(std::size_t i) const { return weights.subspan(i * tokens, tokens); }
};

// H heads of lower-triangular row-stochastic T x T matrices.
class AttnTensor {
 public:
  // Validates causality (|a_ij| <= 1e-7 above the diagonal) and row sums
  // (within 1e-5 of 1). Tolerated deviations are repaired: above-diagonal
  // entries are zeroed and rows renormalized. Rows that needed a nonzero
  // causal repair or were off by more than kRenormLogThreshold are counted in
  // adjusted_rows(). Throws InvariantViolation beyond tolerance.
  AttnTensor(std::size_t heads, std::size_t tokens, std::vector<double> weights);

  std::size_t heads() const noexcept { return heads_; }
  std::size_t tokens() const noexcept { return tokens_; }
  std::size_t adjusted_rows() const noexcept { return adjusted_rows_; }
  AttnHead head(std::size_t h) const {
    return {std::span<const double>(weights_).subspan(h * tokens_ * tokens_, tokens_ * tokens_), tokens_};
  }
  std::span<const double> weights() const noexcept { return weights_; }

 private:
  std::size_t heads_;
  std::size_t tokens_;
  std::vector<double> weights_;
  std::size_t adjusted_rows_ = 0;
};

// Mean of column k over all rows. Throws BadColumn.
double sink_score(const AttnHead& a, std::size_t k = 0);

// Fraction of heads with score >= tau (inclusive).
double sink_rate(std::span<const double> scores, double tau = kDefaultSinkTau);

struct MixingScore {
  double raw_nats = 0.0;             // mean row entropy over all rows
  std::optional<double> normalized;  // mean of H(row i) / ln(i + 1) over i >= 1; absent for T = 1
};

MixingScore mixing_score(const AttnHead& a);

// 1 - H(column-sum distribution) / ln T. Throws TooShort for T = 1.
double colsum_concentration(const AttnHead& a);

// Concentration of a column distribution with mass c0 on one column and the
// rest spread uniformly over the other T - 1 columns.
double cmin_curve(double c0, std::size_t tokens);

struct SinkIdentity {
  double B = 0.0;  // mean first-column mass over rows i >= 1
  double D = 0.0;  // mean diagonal mass over rows i >= 1
  std::optional<double> svi;
};

// Throws TooShort for T = 1.
SinkIdentity svi(const AttnHead& a);

struct HeadPatternStats {
  double sink_score_bos = 0.0;
  std::optional<double> mixing_norm;
  std::optional<double> colsum_C;
  std::optional<double> B;
  std::optional<double> D;
  std::optional<double> svi;
};

struct LayerAttnStats {
  std::vector<HeadPatternStats> heads;
  double sink_rate = 0.0;
  double colsum_rate = 0.0;  // heads without a concentration count as below tau
  std::optional<double> mixing_mean;
};

LayerAttnStats head_stats(const AttnTensor& a, double tau_sink = kDefaultSinkTau,
                          double tau_colsum = kDefaultColsumTau);

}  // namespace residual_lens
