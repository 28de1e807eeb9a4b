#include "residual_lens/attn_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "residual_lens/error.hpp"

namespace residual_lens {

namespace {

double xlogx(double v) { return v > 0.0 ? v * std::log(v) : 0.0; }

double row_entropy(std::span<const double> row, std::size_t len) {
  double h = 0.0;
  for (std::size_t j = 0; j < len; ++j) h -= xlogx(row[j]);
  return h > 0.0 ? h : 0.0;
}

void require_two_tokens(const AttnHead& a, const char* what) {
  if (a.tokens < 2) throw Error(ErrorKind::TooShort, std::string(what) + " needs T >= 2");
}

}  // namespace

AttnTensor::AttnTensor(std::size_t heads, std::size_t tokens, std::vector<double> weights)
    : heads_(heads), tokens_(tokens), weights_(std::move(weights)) {
  if (heads_ == 0 || tokens_ == 0) throw Error(ErrorKind::InvalidArgument, "attention needs H >= 1 and T >= 1");
  if (weights_.size() != heads_ * tokens_ * tokens_) {
    throw Error(ErrorKind::DimMismatch, "attention weights do not match H x T x T");
  }
  for (std::size_t h = 0; h < heads_; ++h) {
    for (std::size_t i = 0; i < tokens_; ++i) {
      double* row = weights_.data() + (h * tokens_ + i) * tokens_;
      bool adjusted = false;
      for (std::size_t j = i + 1; j < tokens_; ++j) {
        if (!std::isfinite(row[j]) || std::abs(row[j]) > kCausalTolerance) {
          throw Error(ErrorKind::InvariantViolation, "attention is not causal at head " + std::to_string(h) +
                                                         " row " + std::to_string(i));
        }
        if (row[j] != 0.0) {
          row[j] = 0.0;
          adjusted = true;
        }
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        if (!std::isfinite(row[j]) || row[j] < -kCausalTolerance) {
          throw Error(ErrorKind::InvariantViolation, "attention weight out of range");
        }
        sum += row[j];
      }
      if (std::abs(sum - 1.0) > kRowSumTolerance) {
        throw Error(ErrorKind::InvariantViolation, "attention row " + std::to_string(i) + " of head " +
                                                       std::to_string(h) + " sums to " + std::to_string(sum));
      }
      if (sum != 1.0) {
        for (std::size_t j = 0; j <= i; ++j) row[j] = row[j] > 0.0 ? row[j] / sum : 0.0;
        // binary32 exports routinely miss 1 by a few ulps; only larger repairs are counted.
        if (std::abs(sum - 1.0) > kRenormLogThreshold) adjusted = true;
      }
      if (adjusted) ++adjusted_rows_;
    }
  }
}

double sink_score(const AttnHead& a, std::size_t k) {
  if (k >= a.tokens) throw Error(ErrorKind::BadColumn, "column " + std::to_string(k) + " out of range");
  double s = 0.0;
  for (std::size_t t = 0; t < a.tokens; ++t) s += a(t, k);
  return s / static_cast<double>(a.tokens);
}

double sink_rate(std::span<const double> scores, double tau) {
  if (scores.empty()) throw Error(ErrorKind::InvalidArgument, "sink rate over zero heads");
  std::size_t hits = 0;
  for (double s : scores)
    if (s >= tau) ++hits;
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

MixingScore mixing_score(const AttnHead& a) {
  MixingScore out;
  const std::size_t t = a.tokens;
  double raw = 0.0;
  double norm_sum = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    const double h = row_entropy(a.row(i), i + 1);
    raw += h;
    if (i >= 1) norm_sum += std::min(1.0, h / std::log(static_cast<double>(i + 1)));
  }
  out.raw_nats = raw / static_cast<double>(t);
  if (t > 1) out.normalized = norm_sum / static_cast<double>(t - 1);
  return out;
}

double colsum_concentration(const AttnHead& a) {
  require_two_tokens(a, "ColSum concentration");
  const std::size_t t = a.tokens;
  const double inv_t = 1.0 / static_cast<double>(t);
  double h = 0.0;
  for (std::size_t j = 0; j < t; ++j) {
    double col = 0.0;
    for (std::size_t i = j; i < t; ++i) col += a(i, j);
    h -= xlogx(col * inv_t);
  }
  const double c = 1.0 - h / std::log(static_cast<double>(t));
  return std::clamp(c, 0.0, 1.0);
}

double cmin_curve(double c0, std::size_t tokens) {
  if (tokens < 2) throw Error(ErrorKind::TooShort, "C_min needs T >= 2");
  if (!(c0 >= 0.0 && c0 <= 1.0)) throw Error(ErrorKind::InvalidArgument, "c0 must lie in [0, 1]");
  const double rest = 1.0 - c0;
  const double h = -(xlogx(c0) + (rest > 0.0 ? rest * std::log(rest / static_cast<double>(tokens - 1)) : 0.0));
  return 1.0 - h / std::log(static_cast<double>(tokens));
}

SinkIdentity svi(const AttnHead& a) {
  require_two_tokens(a, "sink-versus-identity index");
  SinkIdentity out;
  for (std::size_t i = 1; i < a.tokens; ++i) {
    out.B += a(i, 0);
    out.D += a(i, i);
  }
  const double n = static_cast<double>(a.tokens - 1);
  out.B /= n;
  out.D /= n;
  if (out.B + out.D > 0.0) out.svi = out.B / (out.B + out.D);
  return out;
}

LayerAttnStats head_stats(const AttnTensor& a, double tau_sink, double tau_colsum) {
  LayerAttnStats out;
  out.heads.reserve(a.heads());
  std::vector<double> scores;
  scores.reserve(a.heads());
  std::size_t colsum_hits = 0;
  double mix_sum = 0.0;
  std::size_t mix_n = 0;
  for (std::size_t h = 0; h < a.heads(); ++h) {
    const AttnHead head = a.head(h);
    HeadPatternStats s;
    s.sink_score_bos = sink_score(head, 0);
    s.mixing_norm = mixing_score(head).normalized;
    if (head.tokens >= 2) {
      s.colsum_C = colsum_concentration(head);
      const SinkIdentity si = svi(head);
      s.B = si.B;
      s.D = si.D;
      s.svi = si.svi;
    }
    scores.push_back(s.sink_score_bos);
    if (s.colsum_C && *s.colsum_C >= tau_colsum) ++colsum_hits;
    if (s.mixing_norm) {
      mix_sum += *s.mixing_norm;
      ++mix_n;
    }
    out.heads.push_back(s);
  }
  out.sink_rate = sink_rate(scores, tau_sink);
  out.colsum_rate = static_cast<double>(colsum_hits) / static_cast<double>(a.heads());
  if (mix_n > 0) out.mixing_mean = mix_sum / static_cast<double>(mix_n);
  return out;
}

}  // namespace residual_lens
