#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "residual_lens/linalg.hpp"

namespace residual_lens {

struct Entropy {
  double nats = 0.0;
  double bits = 0.0;
  double normalized = 0.0;  // nats / ln r, 0 when r == 1
};

// Shannon entropy of the normalized squared-singular-value spectrum.
// Throws ZeroMatrix for an all-zero X.
Entropy matrix_entropy(const SpectrumSummary& spec);

// p_1 = sigma_1^2 / ||X||_F^2. Throws ZeroMatrix.
double anisotropy(const SpectrumSummary& spec);

struct AlignmentStats {
  double M = 0.0;      // ||x_ref||^2
  double R = 0.0;      // sum of squared norms of the other rows
  double alpha = 0.0;  // squared-cosine alignment, weighted by ||x_i||^2
  double c = 0.0;      // M / R; +inf when no_other_mass
  std::size_t ref_index = 0;
  bool no_other_mass = false;  // R == 0: alpha reported as 0, c undefined
};

// Throws DegenerateReference when the reference row is zero and
// InvalidArgument when T < 2 or ref_index is out of range.
AlignmentStats alignment_stats(const RepMatrix& x, std::size_t ref_index = 0);

// -p ln p - (1-p) ln(1-p) + (1-p) ln(r-1), with 0 ln 0 := 0.
double entropy_upper_bound_nats(double p, std::size_t r);

struct BoundReport {
  AlignmentStats stats;
  std::size_t r = 0;
  double p = 0.0;  // (c + alpha) / (c + 1)
  double sigma1_sq_lower = 0.0;
  double dominance_lower = 0.0;  // +inf when dominance_infinite
  bool dominance_infinite = false;
  double anisotropy_lower = 0.0;
  double entropy_upper_nats = 0.0;

  struct Empirical {
    double sigma1_sq = 0.0;
    double dominance = 0.0;  // sigma_1^2 / sum_{j>=2} sigma_j^2, +inf if the tail is 0
    double p1 = 0.0;
    double entropy_nats = 0.0;
  } empirical;

  // Oriented so that a non-negative slack means the bound holds:
  // lower bounds use empirical - bound, the entropy upper bound uses
  // bound - empirical. Dominance slack is +inf when the dominance bound is
  // infinite (alpha = 1) or the empirical tail vanishes.
  struct Slack {
    double sigma1_sq = 0.0;
    double dominance = 0.0;
    double anisotropy = 0.0;
    double entropy = 0.0;
  } slack;
};

BoundReport bound_report(const RepMatrix& x, std::size_t ref_index = 0);

struct SlackCheck {
  bool ok = true;
  std::string worst_field;
  double worst_normalized = 0.0;  // slack / max(1, |bound|); most negative seen
};

// Accepts each slack s >= -rel_tol * max(1, |bound|).
SlackCheck check_slacks(const BoundReport& report, double rel_tol = 1e-9);

struct LayerDiagnostics {
  std::size_t layer = 0;
  std::optional<double> entropy_nats;  // absent for an all-zero layer
  std::optional<double> entropy_bits;
  std::optional<double> entropy_normalized;
  std::optional<double> p1;
  double bos_norm = 0.0;
  double mean_other_norm = 0.0;
  std::optional<double> c;  // absent when the other rows carry no mass
  std::optional<double> sink_rate;
  std::optional<double> mixing_mean;
  std::optional<double> colsum_rate;
};

// Spectral part of a layer's diagnostics; attention fields are left empty.
LayerDiagnostics diagnose_layer(const RepMatrix& x, std::size_t layer);

struct CorrelationReport {
  std::optional<double> r_norm_entropy;
  std::optional<double> r_norm_sink;  // absent without a sink series
  bool norm_entropy_constant = false;
  bool norm_sink_constant = false;
  std::size_t n_layers_used = 0;
  std::optional<double> fisher_mean;
  std::optional<double> fisher_std;
};

double pearson(std::span<const double> a, std::span<const double> b);

// Z-scores each series, differences consecutive layers, then correlates
// norm-vs-entropy deltas at the same layer and norm-vs-sink deltas with the
// sink series lagged by one layer. Throws InvalidArgument when the series
// lengths differ or are shorter than 3. A constant series (or constant deltas)
// leaves the affected r absent and sets its *_constant flag.
CorrelationReport delta_correlations(std::span<const double> bos_norms,
                                     std::span<const double> entropies,
                                     std::optional<std::span<const double>> sink_rates = std::nullopt);

struct FisherSummary {
  double mean = 0.0;  // tanh of the mean Fisher z
  double std = 0.0;   // population std of the per-trace r values
  std::size_t n = 0;
};

FisherSummary fisher_aggregate(std::span<const double> rs);

struct PhaseThresholds {
  double c_enter = 100.0;
  double c_exit = 10.0;
  double sink_exit = 0.5;
};

struct PhaseSegmentation {
  std::size_t mix_end = 0;
  std::size_t refine_start = 0;
  std::string mix_trigger;
  std::string refine_trigger;
};

// Heuristic Mix/Compress/Refine segmentation over layer diagnostics.
// Compress starts at the first layer with c >= c_enter. Refine starts at the
// first later layer with c <= c_exit, or (when attention was recorded) where
// the sink rate falls below sink_exit after having reached it inside the
// compress phase. Without a compress phase both boundaries equal the layer
// count.
PhaseSegmentation segment_phases(std::span<const LayerDiagnostics> diags,
                                 const PhaseThresholds& thresholds = {});

struct SynthParams {
  std::size_t tokens = 16;
  std::size_t dim = 8;
  double c = 100.0;
  double alpha = 0.0;
  double M = 1.0;
  std::uint64_t seed = 0;
};

// Matrix with row 0 = sqrt(M) u and every other row of squared norm
// R / (T - 1), R = M / c, at squared cosine alpha to u. Deterministic in seed.
// Throws InfeasibleShape (d < 2 with alpha < 1) or InvalidArgument.
RepMatrix synth_matrix(const SynthParams& params);

}  // namespace residual_lens
