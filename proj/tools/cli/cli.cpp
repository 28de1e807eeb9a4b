#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "report.hpp"
#include "residual_lens/error.hpp"
#include "residual_lens/spectral.hpp"
#include "residual_lens/toy_model.hpp"
#include "residual_lens/trace_io.hpp"

namespace residual_lens::cli {

namespace {

using json = nlohmann::ordered_json;

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::IoFailure, "write to " + path.string() + " failed");
}

std::vector<std::size_t> parse_index_list(const std::string& csv, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.front() == '-') {
      throw CLI::ValidationError(std::string(what), "'" + item + "' is not a non-negative integer");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

Intervention parse_inject(const std::string& spec) {
  Intervention iv;
  iv.kind = Intervention::Kind::InjectMassive;
  bool have_layer = false, have_mag = false;
  std::stringstream ss(spec);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--inject", "expected key=value, got '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string val = field.substr(eq + 1);
    try {
      if (key == "layer") {
        iv.layers = {static_cast<std::size_t>(std::stoull(val))};
        have_layer = true;
      } else if (key == "mag") {
        iv.magnitude = std::stod(val);
        have_mag = true;
      } else if (key == "seed") {
        iv.dir_seed = std::stoull(val);
      } else if (key == "token") {
        iv.token = static_cast<std::size_t>(std::stoull(val));
      } else {
        throw CLI::ValidationError("--inject", "unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw CLI::ValidationError("--inject", "bad value for '" + key + "'");
    }
  }
  if (!have_layer || !have_mag) throw CLI::ValidationError("--inject", "needs layer=K and mag=V");
  return iv;
}

bool looks_like_rstf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::string_view(magic, 4) == "RSTF";
}

int cmd_analyze(const std::string& trace_path, const std::string& out_path, const std::string& csv_dir,
                const std::string& svg_dir, double tau_sink, double tau_colsum, std::ostream& out) {
  ReadResult rr = read_trace(std::filesystem::path(trace_path));
  AnalyzeOptions opts;
  opts.tau_sink = tau_sink;
  opts.tau_colsum = tau_colsum;
  opts.threads = thread_budget();
  const AnalysisReport rep = analyze_trace(rr.trace, opts, std::move(rr.attention_adjusted_rows));
  write_text(out_path, report_json(rep));
  if (!csv_dir.empty()) write_csv(rep, csv_dir);
  if (!svg_dir.empty()) write_svg_panels(rep, svg_dir);

  out << "analyzed " << rep.per_layer.size() << " layers of " << trace_path << " -> " << out_path << "\n";
  out << "phases: mix_end=" << rep.phases.mix_end << " (" << rep.phases.mix_trigger
      << ") refine_start=" << rep.phases.refine_start << " (" << rep.phases.refine_trigger << ")\n";
  std::size_t adjusted = 0;
  for (std::size_t a : rep.attention_adjusted_rows) adjusted += a;
  if (adjusted > 0) out << "renormalized " << adjusted << " attention rows within tolerance\n";
  return kExitOk;
}

int cmd_verify(const std::string& path, double tol, std::ostream& out) {
  std::vector<LayerBound> bounds;
  if (looks_like_rstf(path)) {
    const ReadResult rr = read_trace(std::filesystem::path(path));
    for (std::size_t l = 0; l < rr.trace.hidden.size(); ++l) {
      const RepMatrix x = rr.trace.hidden_matrix(l);
      if (x.tokens() < 2 || squared_norm(x.row(0)) == 0.0) {
        out << "layer " << l << ": skipped (bound preconditions not met)\n";
        continue;
      }
      bounds.push_back({l, bound_report(x, 0)});
    }
  } else {
    bounds = parse_report_bounds(read_text(path));
  }

  struct Offender {
    std::size_t layer;
    SlackCheck check;
  };
  std::vector<Offender> offenders;
  for (const auto& [layer, b] : bounds) {
    const SlackCheck chk = check_slacks(b, tol);
    out << "layer " << layer << ": c=" << format9(b.stats.c) << " alpha=" << format9(b.stats.alpha)
        << " p1=" << format9(b.empirical.p1) << " >= " << format9(b.anisotropy_lower)
        << "  H=" << format9(b.empirical.entropy_nats) << " <= " << format9(b.entropy_upper_nats) << " nats"
        << (chk.ok ? "" : "  VIOLATION") << "\n";
    if (!chk.ok) offenders.push_back({layer, chk});
  }
  if (offenders.empty()) {
    out << "all bounds hold on " << bounds.size() << " layers (tol " << format9(tol) << ")\n";
    return kExitOk;
  }
  std::sort(offenders.begin(), offenders.end(), [](const Offender& a, const Offender& b) {
    return a.check.worst_normalized < b.check.worst_normalized;
  });
  out << offenders.size() << " layer(s) violate a bound; worst offenders:\n";
  for (std::size_t k = 0; k < std::min<std::size_t>(5, offenders.size()); ++k) {
    out << "  layer " << offenders[k].layer << ": " << offenders[k].check.worst_field
        << " normalized slack " << format9(offenders[k].check.worst_normalized) << "\n";
  }
  return kExitBoundViolation;
}

int cmd_synth(const SynthParams& params, const std::string& out_path, std::ostream& out) {
  const RepMatrix x = synth_matrix(params);
  Trace t;
  t.meta.model_name = "synth";
  t.meta.layers = 0;
  t.meta.tokens = static_cast<std::uint32_t>(x.tokens());
  t.meta.dim = static_cast<std::uint32_t>(x.dim());
  t.meta.heads = 0;
  t.meta.has_attention = false;
  const auto data = x.matrix().data();
  t.hidden.emplace_back(data.begin(), data.end());
  const std::size_t bytes = write_trace(t, out_path);
  out << "wrote " << bytes << " bytes to " << out_path << "\n";
  return kExitOk;
}

int cmd_toy(const std::string& config_path, const std::string& tokens_csv, const std::vector<std::string>& injects,
            const std::string& ablate_csv, const std::string& out_path, std::ostream& out) {
  const ToyModelConfig cfg = load_config(config_path);
  const std::vector<std::size_t> tokens = parse_index_list(tokens_csv, "--tokens");
  if (tokens.empty()) throw CLI::ValidationError("--tokens", "needs at least one token id");
  std::vector<Intervention> ivs;
  for (const auto& s : injects) ivs.push_back(parse_inject(s));
  if (!ablate_csv.empty()) {
    const auto layers = parse_index_list(ablate_csv, "--ablate-mlp");
    ivs.push_back(Intervention::mlp_ablate(std::set<std::size_t>(layers.begin(), layers.end())));
  }
  const ToyModel model(cfg);
  const Trace t = model.forward(tokens, ivs);
  const std::size_t bytes = write_trace(t, out_path);
  out << "wrote " << bytes << " bytes (" << t.hidden.size() << " hidden layers) to " << out_path << "\n";
  return kExitOk;
}

int cmd_correlate(const std::vector<std::string>& reports, const std::string& out_path, std::ostream& out) {
  json per = json::array();
  std::vector<double> r_entropy, r_sink;
  const auto num = [](const std::optional<double>& v) { return v ? json(round9(*v)) : json(nullptr); };
  for (const auto& path : reports) {
    const ReportSeries s = parse_report_series(read_text(path));
    const auto corr = correlate_layers(s.per_layer);
    json row = {{"file", path}};
    if (corr) {
      row["r_norm_entropy"] = num(corr->r_norm_entropy);
      row["r_norm_sink"] = num(corr->r_norm_sink);
      row["n_layers_used"] = corr->n_layers_used;
      if (corr->r_norm_entropy) r_entropy.push_back(*corr->r_norm_entropy);
      if (corr->r_norm_sink) r_sink.push_back(*corr->r_norm_sink);
    } else {
      row["r_norm_entropy"] = nullptr;
      row["r_norm_sink"] = nullptr;
      row["n_layers_used"] = 0;
    }
    per.push_back(std::move(row));
  }
  const auto agg = [](const std::vector<double>& rs) -> json {
    if (rs.empty()) return nullptr;
    const FisherSummary f = fisher_aggregate(rs);
    return {{"fisher_mean", round9(f.mean)}, {"std", round9(f.std)}, {"n", f.n}};
  };
  json j;
  j["schema"] = "residual-lens/correlation/v1";
  j["per_report"] = std::move(per);
  j["aggregate"] = {{"r_norm_entropy", agg(r_entropy)}, {"r_norm_sink", agg(r_sink)}};
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty()) {
    out << text;
  } else {
    write_text(out_path, text);
    out << "wrote correlations for " << reports.size() << " report(s) to " << out_path << "\n";
  }
  return kExitOk;
}

}  // namespace

std::size_t thread_budget() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RESIDUAL_LENS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return std::min<std::size_t>(static_cast<std::size_t>(v), hw);
  }
  return hw;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spectral diagnostics for transformer residual streams", "residual-lens"};
  app.require_subcommand(1);

  std::string trace_path, out_path = "report.json", csv_dir, svg_dir;
  double tau_sink = kDefaultSinkTau, tau_colsum = kDefaultColsumTau;
  auto* analyze = app.add_subcommand("analyze", "Per-layer metrics, bounds, phases and correlations of a trace");
  analyze->add_option("trace", trace_path, "RSTF trace")->required();
  analyze->add_option("--out", out_path, "Report JSON path");
  analyze->add_option("--csv", csv_dir, "Directory for CSV views");
  analyze->add_option("--svg", svg_dir, "Directory for SVG panels");
  analyze->add_option("--tau-sink", tau_sink, "Sink-score threshold")->check(CLI::Range(0.0, 1.0));
  analyze->add_option("--tau-colsum", tau_colsum, "ColSum concentration threshold")->check(CLI::Range(0.0, 1.0));

  std::string verify_path;
  double tol = 1e-9;
  auto* verify = app.add_subcommand("verify-bounds", "Check the spectral bounds on a trace or a report");
  verify->add_option("input", verify_path, "RSTF trace or report JSON")->required();
  verify->add_option("--tol", tol, "Relative slack tolerance")->check(CLI::NonNegativeNumber);

  SynthParams sp;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic single-layer trace with a target (c, alpha)");
  synth->add_option("--T", sp.tokens, "Token count")->required()->check(CLI::Range(2, 1 << 20));
  synth->add_option("--d", sp.dim, "Hidden dimension")->required()->check(CLI::Range(1, 1 << 20));
  synth->add_option("--c", sp.c, "Norm ratio M/R")->required()->check(CLI::PositiveNumber);
  synth->add_option("--alpha", sp.alpha, "Alignment term")->required()->check(CLI::Range(0.0, 1.0));
  synth->add_option("--M", sp.M, "Reference row squared norm")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sp.seed, "Seed");
  synth->add_option("--out", synth_out, "Output trace")->required();

  std::string config_path, tokens_csv, ablate_csv, toy_out;
  std::vector<std::string> injects;
  auto* toy = app.add_subcommand("toy", "Run the toy transformer and write its trace");
  toy->add_option("--config", config_path, "Model config JSON")->required();
  toy->add_option("--tokens", tokens_csv, "Comma-separated token ids")->required();
  toy->add_option("--inject", injects, "layer=K,mag=V[,seed=S][,token=I]")->take_all();
  toy->add_option("--ablate-mlp", ablate_csv, "Comma-separated block indices");
  toy->add_option("--out", toy_out, "Output trace")->required();

  std::vector<std::string> reports;
  std::string corr_out;
  auto* correlate = app.add_subcommand("correlate", "Delta-Pearson correlations across report files");
  correlate->add_option("reports", reports, "Report JSON files")->required();
  correlate->add_option("--out", corr_out, "Output JSON (stdout when omitted)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*analyze) return cmd_analyze(trace_path, out_path, csv_dir, svg_dir, tau_sink, tau_colsum, out);
    if (*verify) return cmd_verify(verify_path, tol, out);
    if (*synth) return cmd_synth(sp, synth_out, out);
    if (*toy) return cmd_toy(config_path, tokens_csv, injects, ablate_csv, toy_out, out);
    if (*correlate) return cmd_correlate(reports, corr_out, out);
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace residual_lens::cli
