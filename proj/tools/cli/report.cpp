#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <thread>

#include "residual_lens/attn_metrics.hpp"
#include "residual_lens/error.hpp"
#include "svg.hpp"

namespace residual_lens::cli {

namespace {

using json = nlohmann::ordered_json;

json num(double v) {
  if (!std::isfinite(v)) return nullptr;
  return round9(v);
}

json opt(const std::optional<double>& v) { return v ? num(*v) : json(nullptr); }

std::string csv_cell(const std::optional<double>& v) { return v && std::isfinite(*v) ? format9(*v) : ""; }

std::optional<double> get_opt(const json& obj, const char* key) {
  if (!obj.contains(key) || obj[key].is_null()) return std::nullopt;
  if (!obj[key].is_number()) throw Error(ErrorKind::InvariantViolation, std::string("report field ") + key + " is not a number");
  return obj[key].get<double>();
}

double get_req(const json& obj, const char* key) {
  auto v = get_opt(obj, key);
  if (!v) throw Error(ErrorKind::InvariantViolation, std::string("report field ") + key + " is missing");
  return *v;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvariantViolation, std::string("malformed report JSON: ") + e.what());
  }
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::IoFailure, "write to " + path.string() + " failed");
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += threads) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

double round9(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

std::string format9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::optional<CorrelationReport> correlate_layers(const std::vector<LayerDiagnostics>& per_layer) {
  const std::size_t n = per_layer.size();
  if (n < 3) return std::nullopt;
  std::vector<double> b, e;
  for (const auto& d : per_layer) {
    if (!d.entropy_normalized) return std::nullopt;
    b.push_back(d.bos_norm);
    e.push_back(*d.entropy_normalized);
  }
  CorrelationReport rep = delta_correlations(b, e);

  // The sink series only exists for layers with attention (1..L).
  std::vector<double> bs, es, ss;
  for (const auto& d : per_layer) {
    if (!d.sink_rate) continue;
    bs.push_back(d.bos_norm);
    es.push_back(*d.entropy_normalized);
    ss.push_back(*d.sink_rate);
  }
  if (ss.size() >= 3) {
    const CorrelationReport lagged = delta_correlations(bs, es, std::span<const double>(ss));
    rep.r_norm_sink = lagged.r_norm_sink;
    rep.norm_sink_constant = lagged.norm_sink_constant;
  }
  return rep;
}

AnalysisReport analyze_trace(const Trace& trace, const AnalyzeOptions& options,
                             std::vector<std::size_t> attention_adjusted_rows) {
  AnalysisReport rep;
  rep.meta = trace.meta;
  rep.options = options;
  rep.attention_adjusted_rows = std::move(attention_adjusted_rows);
  const std::size_t layers = trace.hidden.size();
  const bool has_attn = trace.meta.has_attention;

  rep.per_layer.resize(layers);
  std::vector<std::optional<BoundReport>> bounds(layers);
  std::vector<std::vector<HeadScatterPoint>> scatter(layers);

  parallel_for(layers, options.threads, [&](std::size_t l) {
    const RepMatrix x = trace.hidden_matrix(l);
    LayerDiagnostics d = diagnose_layer(x, l);
    if (x.tokens() >= 2 && squared_norm(x.row(0)) > 0.0) bounds[l] = bound_report(x, 0);
    if (has_attn && l >= 1) {
      const AttnTensor a = trace.attention_tensor(l);
      const LayerAttnStats st = head_stats(a, options.tau_sink, options.tau_colsum);
      d.sink_rate = st.sink_rate;
      d.colsum_rate = st.colsum_rate;
      d.mixing_mean = st.mixing_mean;
      for (std::size_t h = 0; h < st.heads.size(); ++h) {
        const auto& hs = st.heads[h];
        HeadScatterPoint p;
        p.layer = l;
        p.head = h;
        p.sink_score = hs.sink_score_bos;
        p.colsum_C = hs.colsum_C;
        if (hs.B && hs.D) p.b_plus_d = *hs.B + *hs.D;
        p.svi = hs.svi;
        scatter[l].push_back(p);
      }
    }
    rep.per_layer[l] = d;
  });

  for (std::size_t l = 0; l < layers; ++l) {
    if (bounds[l]) rep.bounds.push_back({l, *bounds[l]});
    rep.head_scatter.insert(rep.head_scatter.end(), scatter[l].begin(), scatter[l].end());
  }
  rep.phases = segment_phases(rep.per_layer, options.thresholds);
  rep.correlations = correlate_layers(rep.per_layer);
  return rep;
}

std::string report_json(const AnalysisReport& r) {
  json j;
  j["schema"] = "residual-lens/report/v1";
  j["trace"] = {{"model_name", r.meta.model_name},
                {"layers", r.meta.layers},
                {"tokens", r.meta.tokens},
                {"dim", r.meta.dim},
                {"heads", r.meta.heads},
                {"has_attention", r.meta.has_attention}};
  j["settings"] = {{"tau_sink", num(r.options.tau_sink)},
                   {"tau_colsum", num(r.options.tau_colsum)},
                   {"c_enter", num(r.options.thresholds.c_enter)},
                   {"c_exit", num(r.options.thresholds.c_exit)},
                   {"sink_exit", num(r.options.thresholds.sink_exit)}};

  json layers = json::array();
  for (const auto& d : r.per_layer) {
    layers.push_back({{"layer", d.layer},
                      {"entropy_nats", opt(d.entropy_nats)},
                      {"entropy_bits", opt(d.entropy_bits)},
                      {"entropy_normalized", opt(d.entropy_normalized)},
                      {"p1", opt(d.p1)},
                      {"bos_norm", num(d.bos_norm)},
                      {"mean_other_norm", num(d.mean_other_norm)},
                      {"c", opt(d.c)},
                      {"sink_rate", opt(d.sink_rate)},
                      {"mixing_mean", opt(d.mixing_mean)},
                      {"colsum_rate", opt(d.colsum_rate)}});
  }
  j["per_layer"] = std::move(layers);

  json bounds = json::array();
  for (const auto& [layer, b] : r.bounds) {
    bounds.push_back({{"layer", layer},
                      {"M", num(b.stats.M)},
                      {"R", num(b.stats.R)},
                      {"alpha", num(b.stats.alpha)},
                      {"c", num(b.stats.c)},
                      {"no_other_mass", b.stats.no_other_mass},
                      {"r", b.r},
                      {"p", num(b.p)},
                      {"sigma1_sq_lower", num(b.sigma1_sq_lower)},
                      {"dominance_lower", num(b.dominance_lower)},
                      {"dominance_infinite", b.dominance_infinite},
                      {"anisotropy_lower", num(b.anisotropy_lower)},
                      {"entropy_upper_nats", num(b.entropy_upper_nats)},
                      {"entropy_upper_bits", num(b.entropy_upper_nats / std::log(2.0))},
                      {"empirical",
                       {{"sigma1_sq", num(b.empirical.sigma1_sq)},
                        {"dominance", num(b.empirical.dominance)},
                        {"p1", num(b.empirical.p1)},
                        {"entropy_nats", num(b.empirical.entropy_nats)}}},
                      {"slack",
                       {{"sigma1_sq", num(b.slack.sigma1_sq)},
                        {"dominance", num(b.slack.dominance)},
                        {"anisotropy", num(b.slack.anisotropy)},
                        {"entropy", num(b.slack.entropy)}}}});
  }
  j["bounds"] = std::move(bounds);

  j["phases"] = {{"mix_end", r.phases.mix_end},
                 {"refine_start", r.phases.refine_start},
                 {"mix_trigger", r.phases.mix_trigger},
                 {"refine_trigger", r.phases.refine_trigger}};

  if (r.correlations) {
    const auto& c = *r.correlations;
    j["correlations"] = {{"r_norm_entropy", opt(c.r_norm_entropy)},
                         {"r_norm_sink", opt(c.r_norm_sink)},
                         {"norm_entropy_constant", c.norm_entropy_constant},
                         {"norm_sink_constant", c.norm_sink_constant},
                         {"n_layers_used", c.n_layers_used}};
  } else {
    j["correlations"] = nullptr;
  }

  json scatter = json::array();
  for (const auto& p : r.head_scatter) {
    scatter.push_back({{"layer", p.layer},
                       {"head", p.head},
                       {"sink_score", num(p.sink_score)},
                       {"colsum_C", opt(p.colsum_C)},
                       {"b_plus_d", opt(p.b_plus_d)},
                       {"svi", opt(p.svi)}});
  }
  j["head_scatter"] = std::move(scatter);
  j["attention_adjusted_rows"] = r.attention_adjusted_rows;
  return j.dump(2) + "\n";
}

void write_csv(const AnalysisReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string layers =
      "layer,entropy_nats,entropy_bits,entropy_normalized,p1,bos_norm,mean_other_norm,c,sink_rate,mixing_mean,"
      "colsum_rate\n";
  for (const auto& d : r.per_layer) {
    layers += std::to_string(d.layer) + ',' + csv_cell(d.entropy_nats) + ',' + csv_cell(d.entropy_bits) + ',' +
              csv_cell(d.entropy_normalized) + ',' + csv_cell(d.p1) + ',' + format9(d.bos_norm) + ',' +
              format9(d.mean_other_norm) + ',' + csv_cell(d.c) + ',' + csv_cell(d.sink_rate) + ',' +
              csv_cell(d.mixing_mean) + ',' + csv_cell(d.colsum_rate) + '\n';
  }
  write_file(dir / "per_layer.csv", layers);

  std::string bounds =
      "layer,M,R,alpha,c,p,sigma1_sq_lower,sigma1_sq,dominance_lower,dominance,anisotropy_lower,p1,"
      "entropy_upper_nats,entropy_nats\n";
  for (const auto& [layer, b] : r.bounds) {
    bounds += std::to_string(layer) + ',' + format9(b.stats.M) + ',' + format9(b.stats.R) + ',' +
              format9(b.stats.alpha) + ',' + csv_cell(b.stats.c) + ',' + format9(b.p) + ',' +
              format9(b.sigma1_sq_lower) + ',' + format9(b.empirical.sigma1_sq) + ',' + csv_cell(b.dominance_lower) +
              ',' + csv_cell(b.empirical.dominance) + ',' + format9(b.anisotropy_lower) + ',' +
              format9(b.empirical.p1) + ',' + format9(b.entropy_upper_nats) + ',' + format9(b.empirical.entropy_nats) +
              '\n';
  }
  write_file(dir / "bounds.csv", bounds);

  std::string scatter = "layer,head,sink_score,colsum_C,b_plus_d,svi\n";
  for (const auto& p : r.head_scatter) {
    scatter += std::to_string(p.layer) + ',' + std::to_string(p.head) + ',' + format9(p.sink_score) + ',' +
               csv_cell(p.colsum_C) + ',' + csv_cell(p.b_plus_d) + ',' + csv_cell(p.svi) + '\n';
  }
  write_file(dir / "head_scatter.csv", scatter);
}

void write_svg_panels(const AnalysisReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  LineChart entropy, sink, norm;
  entropy.title = "Normalized entropy";
  entropy.y_label = "H / ln r";
  sink.title = "BOS sink rate";
  sink.y_label = "sink rate";
  norm.title = "BOS token norm";
  norm.y_label = "||x_0|| (log10)";
  norm.log_y = true;
  for (LineChart* c : {&entropy, &sink, &norm}) c->x_label = "layer";
  for (const auto& d : r.per_layer) {
    const double x = static_cast<double>(d.layer);
    if (d.entropy_normalized) entropy.points.emplace_back(x, *d.entropy_normalized);
    if (d.sink_rate) sink.points.emplace_back(x, *d.sink_rate);
    norm.points.emplace_back(x, d.bos_norm);
  }
  write_file(dir / "entropy.svg", render_svg(entropy));
  write_file(dir / "sink_rate.svg", render_svg(sink));
  write_file(dir / "bos_norm.svg", render_svg(norm));
}

ReportSeries parse_report_series(const std::string& text) {
  const json j = parse_json(text);
  if (!j.is_object() || !j.contains("per_layer") || !j["per_layer"].is_array()) {
    throw Error(ErrorKind::InvariantViolation, "report has no per_layer array");
  }
  ReportSeries s;
  for (const auto& e : j["per_layer"]) {
    LayerDiagnostics d;
    d.layer = static_cast<std::size_t>(get_req(e, "layer"));
    d.entropy_nats = get_opt(e, "entropy_nats");
    d.entropy_bits = get_opt(e, "entropy_bits");
    d.entropy_normalized = get_opt(e, "entropy_normalized");
    d.p1 = get_opt(e, "p1");
    d.bos_norm = get_req(e, "bos_norm");
    d.mean_other_norm = get_req(e, "mean_other_norm");
    d.c = get_opt(e, "c");
    d.sink_rate = get_opt(e, "sink_rate");
    d.mixing_mean = get_opt(e, "mixing_mean");
    d.colsum_rate = get_opt(e, "colsum_rate");
    s.per_layer.push_back(d);
  }
  return s;
}

std::vector<LayerBound> parse_report_bounds(const std::string& text) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const json j = parse_json(text);
  if (!j.is_object() || !j.contains("bounds") || !j["bounds"].is_array()) {
    throw Error(ErrorKind::InvariantViolation, "report has no bounds array");
  }
  std::vector<LayerBound> out;
  for (const auto& e : j["bounds"]) {
    LayerBound lb;
    lb.layer = static_cast<std::size_t>(get_req(e, "layer"));
    BoundReport& b = lb.report;
    b.stats.M = get_req(e, "M");
    b.stats.R = get_req(e, "R");
    b.stats.alpha = get_req(e, "alpha");
    b.stats.c = get_opt(e, "c").value_or(kInf);
    b.p = get_req(e, "p");
    b.sigma1_sq_lower = get_req(e, "sigma1_sq_lower");
    b.dominance_infinite = e.value("dominance_infinite", false);
    b.dominance_lower = b.dominance_infinite ? kInf : get_req(e, "dominance_lower");
    b.anisotropy_lower = get_req(e, "anisotropy_lower");
    b.entropy_upper_nats = get_req(e, "entropy_upper_nats");
    if (!e.contains("empirical") || !e["empirical"].is_object()) {
      throw Error(ErrorKind::InvariantViolation, "bound record has no empirical block");
    }
    const json& emp = e["empirical"];
    b.empirical.sigma1_sq = get_req(emp, "sigma1_sq");
    b.empirical.dominance = get_opt(emp, "dominance").value_or(kInf);
    b.empirical.p1 = get_req(emp, "p1");
    b.empirical.entropy_nats = get_req(emp, "entropy_nats");

    b.slack.sigma1_sq = b.empirical.sigma1_sq - b.sigma1_sq_lower;
    b.slack.dominance = (b.dominance_infinite || std::isinf(b.empirical.dominance))
                            ? kInf
                            : b.empirical.dominance - b.dominance_lower;
    b.slack.anisotropy = b.empirical.p1 - b.anisotropy_lower;
    b.slack.entropy = b.entropy_upper_nats - b.empirical.entropy_nats;
    out.push_back(lb);
  }
  return out;
}

}  // namespace residual_lens::cli
