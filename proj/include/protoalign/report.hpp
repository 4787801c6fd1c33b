#pragma once

// Rendering of adaptation sweeps: accuracy-vs-steps line charts with a
// +/- one standard deviation band per series (SVG), plus a summary table.

#include <string>
#include <vector>

#include "protoalign/train.hpp"

namespace protoalign {

struct StepSeries {
  Variant variant = Variant::JT_ENT;
  int prototypes = 0;
  std::vector<double> mean;  // index = step
  std::vector<double> std;
  int seeds = 0;
  std::string config_hash;
};

/// Parses one steps.csv written by write_steps_csv.
StepSeries read_steps_csv(const std::string& path);

/// Collects <results_dir>/adapt/*/steps.csv in a deterministic order.
std::vector<StepSeries> load_step_series(const std::string& results_dir);

struct ChartSeries {
  std::string label;
  std::vector<double> mean;
  std::vector<double> std;
};

std::string render_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<ChartSeries>& series, const std::string& provenance);

struct ReportOutput {
  std::vector<std::string> files;
  std::vector<std::string> warnings;
};

/// Writes report/accuracy_vs_steps.svg (every variant at `focus_prototypes`),
/// report/prototypes.svg (jt-ent at every K) and report/summary.csv.
ReportOutput write_report(const std::string& results_dir, int focus_prototypes);

}  // namespace protoalign
