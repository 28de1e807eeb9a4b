// Acceptance harness: one PASS/FAIL line per primary criterion. Exit status is
// the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "residual_lens/error.hpp"
#include "residual_lens/spectral.hpp"
#include "residual_lens/toy_model.hpp"
#include "residual_lens/trace_io.hpp"
#include "support/oracles.hpp"
#include "support/traces.hpp"

using namespace residual_lens;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kBoundRelSlack = 1e-9;
constexpr double kSoundnessBudgetSeconds = 60.0;
constexpr double kTightP1 = 1e-4;
constexpr double kTightGapBits = 0.01;
constexpr double kLooseGapBits = 0.2;
constexpr double kSvdAbsTol = 1e-9;
constexpr double kMetricTol = 1e-9;
constexpr double kInjectEntropyMax = 0.2;
constexpr double kInjectCMin = 1e3;
constexpr double kBaselineEntropyMin = 0.6;
constexpr double kCorrHandTol = 1e-9;
constexpr double kCorrAffineTol = 1e-12;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome bound_soundness() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  std::size_t checked = 0, violations = 0;
  double worst = std::numeric_limits<double>::infinity();
  const auto check = [&](const RepMatrix& x) {
    const SlackCheck chk = check_slacks(bound_report(x, 0), kBoundRelSlack);
    ++checked;
    worst = std::min(worst, chk.worst_normalized);
    if (!chk.ok) ++violations;
  };
  for (int k = 0; k < 10000; ++k) {
    const std::size_t T = 2 + rng() % 63, d = 1 + rng() % 64;
    check(RepMatrix(T, d, oracle::gaussian(rng, T, d)));
  }
  const double cs[] = {0.1, 1.0, 10.0, 1e3, 1e6};
  const double alphas[] = {0.0, 0.25, 0.5, 0.9, 1.0};
  for (int rep = 0; rep < 40; ++rep) {
    for (double c : cs) {
      for (double a : alphas) {
        SynthParams sp;
        sp.tokens = 2 + rng() % 63;
        sp.dim = 2 + rng() % 63;
        sp.c = c;
        sp.alpha = a;
        sp.M = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(rng));
        sp.seed = rng();
        check(synth_matrix(sp));
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {violations == 0 && checked == 11000 && secs < kSoundnessBudgetSeconds,
          fmt("%zu matrices, %zu violations, worst normalized slack %.3g, %.1f s", checked, violations, worst, secs)};
}

Outcome bound_tightness() {
  const auto through_trace = [](double c) {
    // Square shape: the tail spectrum of (T-1) rows in d-1 dimensions is then
    // far from flat, which is the regime where the entropy bound is loose.
    SynthParams sp;
    sp.tokens = 32;
    sp.dim = 32;
    sp.c = c;
    sp.alpha = 0.0;
    sp.seed = 11;
    const RepMatrix x = synth_matrix(sp);
    Trace t;
    t.meta.model_name = "synth";
    t.meta.tokens = static_cast<std::uint32_t>(x.tokens());
    t.meta.dim = static_cast<std::uint32_t>(x.dim());
    t.hidden.emplace_back(x.matrix().data().begin(), x.matrix().data().end());
    const ReadResult rr = read_trace(std::make_unique<MemorySource>(encode_trace(t)));
    return bound_report(rr.trace.hidden_matrix(0), 0);
  };
  const BoundReport tight = through_trace(1e6);
  const BoundReport loose = through_trace(1.0);
  const double p = 1e6 / (1e6 + 1.0);
  const double p1_err = std::abs(tight.empirical.p1 - p);
  const double gap_tight = (tight.entropy_upper_nats - tight.empirical.entropy_nats) / std::numbers::ln2;
  const double gap_loose = (loose.entropy_upper_nats - loose.empirical.entropy_nats) / std::numbers::ln2;
  return {p1_err <= kTightP1 && gap_tight >= -kBoundRelSlack && gap_tight <= kTightGapBits &&
              gap_loose >= kLooseGapBits,
          fmt("c=1e6: |p1-p|=%.3g, gap %.3g bits; c=1: gap %.3g bits", p1_err, gap_tight, gap_loose)};
}

Outcome svd_oracle() {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t r = 2 + k % 2;
    const std::size_t other = r + rng() % 14;
    const bool tall = (k / 2) % 2 == 0;
    const std::size_t T = tall ? other : r, d = tall ? r : other;
    const auto x = oracle::gaussian(rng, T, d);
    const auto want = oracle::charpoly_singular_values(x, T, d);
    const auto got = singular_values(RepMatrix(T, d, x));
    if (got.sigma.size() != want.size()) return {false, fmt("case %d: rank mismatch", k)};
    for (std::size_t j = 0; j < want.size(); ++j) worst = std::max(worst, std::abs(got.sigma[j] - want[j]));
  }
  return {worst <= kSvdAbsTol, fmt("1000 cases, max |sigma - oracle| = %.3g", worst)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  std::size_t cmin_fail = 0, heads = 0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t T = 2 + rng() % 15, H = 1 + rng() % 4;
    std::vector<double> w;
    std::vector<oracle::HeadOracle> want;
    for (std::size_t h = 0; h < H; ++h) {
      const auto a = oracle::causal_stochastic(rng, T, (k + h) % 3 == 0);
      want.push_back(oracle::head_oracle(a.data(), T));
      w.insert(w.end(), a.begin(), a.end());
    }
    const AttnTensor tensor(H, T, w);
    std::size_t sinks = 0;
    for (std::size_t h = 0; h < H; ++h, ++heads) {
      const AttnHead head = tensor.head(h);
      const auto& o = want[h];
      const auto m = mixing_score(head);
      const auto s = svi(head);
      const double C = colsum_concentration(head);
      const double errs[] = {sink_score(head) - o.sink_score, m.raw_nats - o.mixing_raw,
                             m.normalized.value_or(NAN) - o.mixing_norm, C - o.colsum_C, s.B - o.B, s.D - o.D,
                             s.svi.value_or(NAN) - o.B / (o.B + o.D)};
      for (double e : errs) worst = std::max(worst, std::isnan(e) ? INFINITY : std::abs(e));
      if (C < cmin_curve(o.max_col_mass, T) - kMetricTol) ++cmin_fail;
      if (o.sink_score >= kDefaultSinkTau) ++sinks;
    }
    const double rate = head_stats(tensor).sink_rate;
    worst = std::max(worst, std::abs(rate - static_cast<double>(sinks) / static_cast<double>(H)));
  }
  return {worst <= kMetricTol && cmin_fail == 0,
          fmt("1000 tensors / %zu heads, max error %.3g, C < C_min on %zu", heads, worst, cmin_fail)};
}

Outcome intervention() {
  ToyModelConfig cfg;
  cfg.layers = 6;
  cfg.hidden_dim = 32;
  cfg.heads = 4;
  cfg.ff_dim = 64;
  cfg.vocab = 64;
  cfg.seed = 1;
  const ToyModel model(cfg);
  std::mt19937_64 rng(31337);
  std::vector<std::size_t> prompt(32);
  for (auto& t : prompt) t = rng() % cfg.vocab;

  const std::vector<Intervention> inject{Intervention::inject_massive(1, 1e3)};
  const Trace with = model.forward(prompt, inject);
  const Trace without = model.forward(prompt);
  double max_h_inj = 0.0, min_c_inj = INFINITY, min_h_base = INFINITY;
  for (std::size_t l = 2; l <= cfg.layers; ++l) {
    const RepMatrix xi = with.hidden_matrix(l), xb = without.hidden_matrix(l);
    max_h_inj = std::max(max_h_inj, matrix_entropy(singular_values(xi)).normalized);
    min_c_inj = std::min(min_c_inj, alignment_stats(xi).c);
    min_h_base = std::min(min_h_base, matrix_entropy(singular_values(xb)).normalized);
  }
  return {max_h_inj <= kInjectEntropyMax && min_c_inj >= kInjectCMin && min_h_base >= kBaselineEntropyMin,
          fmt("layers 2..6: injected max H_norm %.4f, min c %.4g; baseline min H_norm %.4f", max_h_inj, min_c_inj,
              min_h_base)};
}

Outcome correlation() {
  double worst_hand = 0.0;
  {
    const std::vector<double> b{0, 0, 10, 10, 10}, e{1, 1, 0.1, 0.1, 0.1}, s{0, 0, 0, 0.9, 0.9};
    const auto r = delta_correlations(b, e, std::span<const double>(s));
    worst_hand = std::max({worst_hand, std::abs(r.r_norm_entropy.value_or(NAN) + 1.0),
                           std::abs(r.r_norm_sink.value_or(NAN) - 1.0)});
  }
  {
    // Deltas b: 1,2,3,4; e: -1,0,-2,-1 -> r = -1/sqrt(10).
    // Lagged pairs (1,0), (2,2), (3,-1) -> r = -3/sqrt(84).
    const std::vector<double> b{1, 2, 4, 7, 11}, e{5, 4, 4, 2, 1}, s{0, 1, 1, 3, 2};
    const auto r = delta_correlations(b, e, std::span<const double>(s));
    worst_hand = std::max({worst_hand, std::abs(r.r_norm_entropy.value_or(NAN) + 1.0 / std::sqrt(10.0)),
                           std::abs(r.r_norm_sink.value_or(NAN) + 3.0 / std::sqrt(84.0))});
  }
  if (std::isnan(worst_hand)) worst_hand = INFINITY;

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst_affine = 0.0;
  for (int k = 0; k < 200; ++k) {
    const std::size_t L = 3 + rng() % 30;
    std::vector<double> b(L), e(L), s(L), b2(L), e2(L), s2(L);
    const double sb = std::exp(n(rng)), se = std::exp(n(rng)), ss = std::exp(n(rng));
    const double ob = 10 * n(rng), oe = 10 * n(rng), os = 10 * n(rng);
    for (std::size_t i = 0; i < L; ++i) {
      b[i] = n(rng);
      e[i] = n(rng) + 0.3 * b[i];
      s[i] = n(rng);
      b2[i] = sb * b[i] + ob;
      e2[i] = se * e[i] + oe;
      s2[i] = ss * s[i] + os;
    }
    const auto r1 = delta_correlations(b, e, std::span<const double>(s));
    const auto r2 = delta_correlations(b2, e2, std::span<const double>(s2));
    worst_affine = std::max(worst_affine, std::abs(*r1.r_norm_entropy - *r2.r_norm_entropy));
    if (r1.r_norm_sink && r2.r_norm_sink) {
      worst_affine = std::max(worst_affine, std::abs(*r1.r_norm_sink - *r2.r_norm_sink));
    }
  }
  return {worst_hand <= kCorrHandTol && worst_affine <= kCorrAffineTol,
          fmt("hand max error %.3g, affine max change %.3g", worst_hand, worst_affine)};
}

template <typename F>
bool raises(ErrorKind kind, F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind() == kind;
  }
  return false;
}

Outcome trace_round_trip(const fs::path& dir) {
  std::mt19937_64 rng(4242);
  std::size_t identical = 0;
  for (int k = 0; k < 100; ++k) {
    const Trace t = support::random_trace(rng, k % 3 != 0);
    const fs::path p = dir / ("rt" + std::to_string(k) + ".rstf");
    write_trace(t, p);
    const ReadResult rr = read_trace(p);
    bool same = rr.trace.hidden.size() == t.hidden.size() && rr.trace.attention.size() == t.attention.size();
    for (std::size_t l = 0; same && l < t.hidden.size(); ++l) {
      same = rr.trace.hidden[l].size() == t.hidden[l].size() &&
             std::memcmp(rr.trace.hidden[l].data(), t.hidden[l].data(), 4 * t.hidden[l].size()) == 0;
    }
    for (std::size_t l = 0; same && l < t.attention.size(); ++l) {
      same = rr.trace.attention[l].size() == t.attention[l].size() &&
             std::memcmp(rr.trace.attention[l].data(), t.attention[l].data(), 4 * t.attention[l].size()) == 0;
    }
    if (same) ++identical;
  }
  std::mt19937_64 rng2(1);
  Trace t = support::random_trace(rng2, true);
  const auto bytes = encode_trace(t);
  const auto read = [](std::vector<std::uint8_t> b) { read_trace(std::make_unique<MemorySource>(std::move(b))); };
  auto magic = bytes;
  magic[1] = 'Z';
  auto version = bytes;
  version[4] = 9;
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  const bool e1 = raises(ErrorKind::BadMagic, [&] { read(magic); });
  const bool e2 = raises(ErrorKind::UnsupportedVersion, [&] { read(version); });
  const bool e3 = raises(ErrorKind::Truncated, [&] { read(cut); });
  return {identical == 100 && e1 && e2 && e3,
          fmt("%zu/100 byte-identical; BadMagic %s, UnsupportedVersion %s, Truncated %s", identical,
              e1 ? "ok" : "missing", e2 ? "ok" : "missing", e3 ? "ok" : "missing")};
}

Outcome cli_determinism(const fs::path& dir) {
  std::ostringstream sink;
  const auto run = [&](std::vector<std::string> args) { return cli::run(args, sink, sink); };
  const auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  ToyModelConfig cfg;
  cfg.layers = 6;
  std::ofstream(dir / "cfg.json") << config_json(cfg);
  const std::string trace = (dir / "toy.rstf").string();
  if (run({"toy", "--config", (dir / "cfg.json").string(), "--tokens", "3,14,15,9,26,5,35,8,9,7,9,32", "--inject",
           "layer=1,mag=1000", "--out", trace}) != 0) {
    return {false, "toy command failed: " + sink.str()};
  }
  const std::string a = (dir / "a.json").string(), b = (dir / "b.json").string();
  const int ra = run({"analyze", trace, "--out", a}), rb = run({"analyze", trace, "--out", b});
  const bool same = ra == 0 && rb == 0 && slurp(a) == slurp(b);

  const int ok_code = run({"verify-bounds", a});
  auto j = nlohmann::ordered_json::parse(slurp(a));
  j["bounds"][3]["empirical"]["entropy_nats"] = j["bounds"][3]["entropy_upper_nats"].get<double>() + 0.5;
  const std::string bad = (dir / "bad.json").string();
  std::ofstream(bad) << j.dump(2);
  const int bad_code = run({"verify-bounds", bad});
  return {same && ok_code == cli::kExitOk && bad_code == cli::kExitBoundViolation,
          fmt("analyze x2 %s; verify-bounds valid -> %d, corrupted -> %d", same ? "byte-identical" : "DIFFERS",
              ok_code, bad_code)};
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / ("residual_lens_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"bound soundness sweep", bound_soundness},
      {"bound tightness", bound_tightness},
      {"svd oracle", svd_oracle},
      {"attention metric oracles", metric_oracles},
      {"intervention reproduction", intervention},
      {"correlation protocol", correlation},
      {"trace round trip", [&] { return trace_round_trip(dir); }},
      {"cli determinism", [&] { return cli_determinism(dir); }},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s [%zu] %s: %s\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  fs::remove_all(dir);
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed;
}
