#include "residual_lens/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "residual_lens/error.hpp"
#include "residual_lens/random.hpp"

namespace residual_lens {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kAlphaOneTol = 1e-12;

double xlogx(double v) { return v > 0.0 ? v * std::log(v) : 0.0; }

void require_nonzero(const SpectrumSummary& spec) {
  if (spec.is_zero()) throw Error(ErrorKind::ZeroMatrix, "spectrum of an all-zero matrix");
}

}  // namespace

Entropy matrix_entropy(const SpectrumSummary& spec) {
  require_nonzero(spec);
  double h = 0.0;
  for (double pj : spec.p) h -= xlogx(pj);
  h = std::max(h, 0.0);
  Entropy e;
  e.nats = h;
  e.bits = h / std::numbers::ln2;
  const std::size_t r = spec.rank_bound();
  e.normalized = r > 1 ? h / std::log(static_cast<double>(r)) : 0.0;
  return e;
}

double anisotropy(const SpectrumSummary& spec) {
  require_nonzero(spec);
  return spec.p.front();
}

AlignmentStats alignment_stats(const RepMatrix& x, std::size_t ref_index) {
  const std::size_t t = x.tokens();
  if (t < 2) throw Error(ErrorKind::InvalidArgument, "alignment needs at least two tokens");
  if (ref_index >= t) throw Error(ErrorKind::InvalidArgument, "reference index out of range");

  const auto ref = x.row(ref_index);
  AlignmentStats s;
  s.ref_index = ref_index;
  s.M = squared_norm(ref);
  if (s.M == 0.0) throw Error(ErrorKind::DegenerateReference, "reference row has zero norm");

  // ||x_i||^2 cos^2 = <x_i, x_ref>^2 / M, so zero rows drop out of both sums.
  double aligned = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (i == ref_index) continue;
    const auto xi = x.row(i);
    s.R += squared_norm(xi);
    const double d = dot(xi, ref);
    aligned += d * d / s.M;
  }
  if (s.R == 0.0) {
    s.no_other_mass = true;
    s.alpha = 0.0;
    s.c = kInf;
    return s;
  }
  s.alpha = std::clamp(aligned / s.R, 0.0, 1.0);
  s.c = s.M / s.R;
  return s;
}

double entropy_upper_bound_nats(double p, std::size_t r) {
  const double q = 1.0 - p;
  double h = -xlogx(p) - xlogx(q);
  if (r > 1 && q > 0.0) h += q * std::log(static_cast<double>(r - 1));
  return h;
}

BoundReport bound_report(const RepMatrix& x, std::size_t ref_index) {
  BoundReport b;
  b.stats = alignment_stats(x, ref_index);
  const SpectrumSummary spec = singular_values(x);
  require_nonzero(spec);
  b.r = spec.rank_bound();

  const auto& st = b.stats;
  if (st.no_other_mass) {
    b.p = 1.0;
    b.sigma1_sq_lower = st.M;
    b.dominance_infinite = true;
  } else {
    b.p = (st.c + st.alpha) / (st.c + 1.0);
    b.sigma1_sq_lower = st.M + st.alpha * st.R;
    b.dominance_infinite = st.alpha >= 1.0 - kAlphaOneTol;
  }
  b.dominance_lower = b.dominance_infinite ? kInf : (st.c + st.alpha) / (1.0 - st.alpha);
  b.anisotropy_lower = b.p;
  b.entropy_upper_nats = entropy_upper_bound_nats(b.p, b.r);

  const double s1 = spec.sigma.front();
  b.empirical.sigma1_sq = s1 * s1;
  double tail = 0.0;
  for (std::size_t j = 1; j < spec.sigma.size(); ++j) tail += spec.sigma[j] * spec.sigma[j];
  b.empirical.dominance = tail > 0.0 ? b.empirical.sigma1_sq / tail : kInf;
  b.empirical.p1 = anisotropy(spec);
  b.empirical.entropy_nats = matrix_entropy(spec).nats;

  b.slack.sigma1_sq = b.empirical.sigma1_sq - b.sigma1_sq_lower;
  b.slack.dominance = (b.dominance_infinite || std::isinf(b.empirical.dominance))
                          ? kInf
                          : b.empirical.dominance - b.dominance_lower;
  b.slack.anisotropy = b.empirical.p1 - b.anisotropy_lower;
  b.slack.entropy = b.entropy_upper_nats - b.empirical.entropy_nats;
  return b;
}

SlackCheck check_slacks(const BoundReport& report, double rel_tol) {
  SlackCheck out;
  out.worst_normalized = kInf;
  const auto consider = [&](const char* name, double slack, double bound) {
    if (std::isinf(slack) && slack > 0.0) return;
    const double scale = std::max(1.0, std::abs(bound));
    const double normalized = std::isnan(slack) ? -kInf : slack / scale;
    if (normalized < out.worst_normalized) {
      out.worst_normalized = normalized;
      out.worst_field = name;
    }
    if (!(slack >= -rel_tol * scale)) out.ok = false;
  };
  consider("sigma1_sq", report.slack.sigma1_sq, report.sigma1_sq_lower);
  consider("dominance", report.slack.dominance, report.dominance_lower);
  consider("anisotropy", report.slack.anisotropy, report.anisotropy_lower);
  consider("entropy", report.slack.entropy, report.entropy_upper_nats);
  return out;
}

LayerDiagnostics diagnose_layer(const RepMatrix& x, std::size_t layer) {
  LayerDiagnostics d;
  d.layer = layer;
  const SpectrumSummary spec = singular_values(x);
  if (!spec.is_zero()) {
    const Entropy e = matrix_entropy(spec);
    d.entropy_nats = e.nats;
    d.entropy_bits = e.bits;
    d.entropy_normalized = e.normalized;
    d.p1 = anisotropy(spec);
  }
  const std::vector<double> norms = row_norms(x);
  d.bos_norm = norms.front();
  double other_sum = 0.0;
  double other_sq = 0.0;
  for (std::size_t i = 1; i < norms.size(); ++i) {
    other_sum += norms[i];
    other_sq += norms[i] * norms[i];
  }
  if (norms.size() > 1) d.mean_other_norm = other_sum / static_cast<double>(norms.size() - 1);
  if (other_sq > 0.0) d.c = d.bos_norm * d.bos_norm / other_sq;
  return d;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw Error(ErrorKind::InvalidArgument, "pearson needs two equal-length series of length >= 2");
  }
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw Error(ErrorKind::ConstantSeries, "pearson correlation of a constant series");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace {

// Returns nullopt for a zero-variance series.
std::optional<std::vector<double>> zscore_deltas(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  if (!(var > 0.0)) return std::nullopt;
  const double sd = std::sqrt(var);
  std::vector<double> deltas(v.size() - 1);
  for (std::size_t l = 1; l < v.size(); ++l) deltas[l - 1] = (v[l] - mean) / sd - (v[l - 1] - mean) / sd;
  return deltas;
}

std::optional<double> guarded_pearson(std::span<const double> a, std::span<const double> b) {
  try {
    return pearson(a, b);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConstantSeries || e.kind() == ErrorKind::InvalidArgument) return std::nullopt;
    throw;
  }
}

}  // namespace

CorrelationReport delta_correlations(std::span<const double> bos_norms, std::span<const double> entropies,
                                     std::optional<std::span<const double>> sink_rates) {
  const std::size_t L = bos_norms.size();
  if (L < 3) throw Error(ErrorKind::InvalidArgument, "correlation needs at least 3 layers");
  if (entropies.size() != L || (sink_rates && sink_rates->size() != L)) {
    throw Error(ErrorKind::InvalidArgument, "per-layer series have different lengths");
  }
  for (auto series : {bos_norms, entropies}) {
    for (double v : series)
      if (!std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, "non-finite series value");
  }

  CorrelationReport rep;
  rep.n_layers_used = L;
  const auto db = zscore_deltas(bos_norms);
  const auto de = zscore_deltas(entropies);
  if (db && de) rep.r_norm_entropy = guarded_pearson(*db, *de);
  rep.norm_entropy_constant = !rep.r_norm_entropy.has_value();

  if (sink_rates) {
    const auto ds = zscore_deltas(*sink_rates);
    if (db && ds) {
      // delta_b at layers 1..L-2 against delta_s at layers 2..L-1.
      const std::span<const double> b_part(db->data(), db->size() - 1);
      const std::span<const double> s_part(ds->data() + 1, ds->size() - 1);
      rep.r_norm_sink = guarded_pearson(b_part, s_part);
    }
    rep.norm_sink_constant = !rep.r_norm_sink.has_value();
  }
  return rep;
}

FisherSummary fisher_aggregate(std::span<const double> rs) {
  FisherSummary out;
  out.n = rs.size();
  if (rs.empty()) return out;
  // atanh(+-1) is infinite; clip so perfectly correlated traces stay finite.
  constexpr double kClip = 1.0 - 1e-12;
  double zsum = 0.0;
  double rsum = 0.0;
  for (double r : rs) {
    zsum += std::atanh(std::clamp(r, -kClip, kClip));
    rsum += r;
  }
  const double n = static_cast<double>(rs.size());
  out.mean = std::tanh(zsum / n);
  const double rmean = rsum / n;
  double var = 0.0;
  for (double r : rs) var += (r - rmean) * (r - rmean);
  out.std = std::sqrt(var / n);
  return out;
}

PhaseSegmentation segment_phases(std::span<const LayerDiagnostics> diags, const PhaseThresholds& th) {
  const std::size_t n = diags.size();
  const auto ratio = [&](std::size_t l) { return diags[l].c.value_or(kInf); };

  PhaseSegmentation seg;
  seg.mix_end = n;
  seg.refine_start = n;
  seg.mix_trigger = "none";
  seg.refine_trigger = "none";
  for (std::size_t l = 0; l < n; ++l) {
    if (ratio(l) >= th.c_enter) {
      seg.mix_end = l;
      seg.mix_trigger = "c>=c_enter";
      break;
    }
  }
  if (seg.mix_end == n) return seg;

  seg.refine_trigger = "end_of_stack";
  const auto& first = diags[seg.mix_end].sink_rate;
  bool sink_reached = first && *first >= th.sink_exit;
  for (std::size_t l = seg.mix_end + 1; l < n; ++l) {
    if (ratio(l) <= th.c_exit) {
      seg.refine_start = l;
      seg.refine_trigger = "c<=c_exit";
      return seg;
    }
    const auto& sink = diags[l].sink_rate;
    if (sink) {
      if (sink_reached && *sink < th.sink_exit) {
        seg.refine_start = l;
        seg.refine_trigger = "sink_rate<sink_exit";
        return seg;
      }
      sink_reached = sink_reached || *sink >= th.sink_exit;
    }
  }
  return seg;
}

RepMatrix synth_matrix(const SynthParams& sp) {
  if (sp.tokens < 2 || sp.dim < 1) throw Error(ErrorKind::InvalidArgument, "synth needs T >= 2 and d >= 1");
  if (!(sp.c > 0.0) || !(sp.M > 0.0) || !(sp.alpha >= 0.0 && sp.alpha <= 1.0) || !std::isfinite(sp.c) ||
      !std::isfinite(sp.M)) {
    throw Error(ErrorKind::InvalidArgument, "synth needs c > 0, M > 0 and alpha in [0, 1]");
  }
  if (sp.dim < 2 && sp.alpha < 1.0) {
    throw Error(ErrorKind::InfeasibleShape, "alpha < 1 needs d >= 2 for an orthogonal complement");
  }

  const std::size_t t = sp.tokens;
  const std::size_t d = sp.dim;
  Rng rng(sp.seed);
  std::vector<double> u(d);
  rng.unit_vector(u);

  Matrix m(t, d);
  const double ref_scale = std::sqrt(sp.M);
  for (std::size_t k = 0; k < d; ++k) m(0, k) = ref_scale * u[k];

  const double R = sp.M / sp.c;
  const double row_scale = std::sqrt(R / static_cast<double>(t - 1));
  const double along = std::sqrt(sp.alpha);
  const double across = std::sqrt(1.0 - sp.alpha);
  std::vector<double> v(d);
  for (std::size_t i = 1; i < t; ++i) {
    if (across > 0.0) {
      double vn = 0.0;
      while (vn < 1e-6) {
        rng.unit_vector(v);
        const double proj = dot(v, u);
        for (std::size_t k = 0; k < d; ++k) v[k] -= proj * u[k];
        // Second pass keeps v orthogonal to u to working precision.
        const double proj2 = dot(v, u);
        for (std::size_t k = 0; k < d; ++k) v[k] -= proj2 * u[k];
        vn = std::sqrt(squared_norm(v));
      }
      for (double& vk : v) vk /= vn;
    } else {
      std::fill(v.begin(), v.end(), 0.0);
    }
    for (std::size_t k = 0; k < d; ++k) m(i, k) = row_scale * (along * u[k] + across * v[k]);
  }

  RepMatrix x(std::move(m));
  const AlignmentStats got = alignment_stats(x, 0);
  if (std::abs(got.c - sp.c) > 1e-6 * sp.c || std::abs(got.alpha - sp.alpha) > 1e-6) {
    throw Error(ErrorKind::InvariantViolation, "synthesized matrix misses its (c, alpha) target");
  }
  return x;
}

}  // namespace residual_lens
