#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "residual_lens/spectral.hpp"
#include "residual_lens/trace_io.hpp"

namespace residual_lens::cli {

struct AnalyzeOptions {
  double tau_sink = kDefaultSinkTau;
  double tau_colsum = kDefaultColsumTau;
  PhaseThresholds thresholds;
  std::size_t threads = 1;
};

struct HeadScatterPoint {
  std::size_t layer = 0;
  std::size_t head = 0;
  double sink_score = 0.0;
  std::optional<double> colsum_C;
  std::optional<double> b_plus_d;
  std::optional<double> svi;
};

struct LayerBound {
  std::size_t layer = 0;
  BoundReport report;
};

struct AnalysisReport {
  TraceMeta meta;
  AnalyzeOptions options;
  std::vector<LayerDiagnostics> per_layer;  // L + 1 entries
  std::vector<LayerBound> bounds;           // layers meeting the bound preconditions
  PhaseSegmentation phases;
  std::optional<CorrelationReport> correlations;
  std::vector<HeadScatterPoint> head_scatter;
  std::vector<std::size_t> attention_adjusted_rows;
};

// Layers are analyzed on up to options.threads workers; results are written
// into per-layer slots so the report does not depend on scheduling.
AnalysisReport analyze_trace(const Trace& trace, const AnalyzeOptions& options,
                             std::vector<std::size_t> attention_adjusted_rows = {});

// Correlations over a report's per-layer series: bos-norm vs entropy across
// all layers, bos-norm vs sink rate across the layers that carry attention.
std::optional<CorrelationReport> correlate_layers(const std::vector<LayerDiagnostics>& per_layer);

// Rounds to 9 significant digits; the JSON writer then emits the shortest
// representation that round-trips.
double round9(double v);
std::string format9(double v);

std::string report_json(const AnalysisReport& report);
void write_csv(const AnalysisReport& report, const std::filesystem::path& dir);
void write_svg_panels(const AnalysisReport& report, const std::filesystem::path& dir);

// Per-layer series recovered from a report JSON document.
struct ReportSeries {
  std::vector<LayerDiagnostics> per_layer;
};
ReportSeries parse_report_series(const std::string& json_text);

// Bound records recovered from a report JSON document, with slacks recomputed
// from the stored bound and empirical values (stored slacks are ignored).
std::vector<LayerBound> parse_report_bounds(const std::string& json_text);

}  // namespace residual_lens::cli
