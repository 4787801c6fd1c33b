#pragma once

// Orchestration shared by the CLI and the acceptance suite: dataset
// generation, training runs, corruption sweeps with test-time adaptation,
// and the CSV / JSON-lines outputs they produce.
//
// Output layout under ExperimentConfig::out_dir:
//   dataset.bin, dataset.json
//   train/<variant>_K<k>_seed<s>/{checkpoint.bin, metrics.csv}
//   adapt/<variant>_K<k>/{results.csv, steps.csv, per_seed.csv, records_seed<s>.jsonl}
//   report/{accuracy_vs_steps.svg, prototypes.svg, summary.csv}

#include <string>
#include <vector>

#include "protoalign/config.hpp"

namespace protoalign {

struct RunId {
  Variant variant = Variant::JT_ENT;
  int prototypes = 30;
  uint64_t seed = 0;

  std::string name() const;        // e.g. "jt-ent_K30_seed0"
  std::string group_name() const;  // e.g. "jt-ent_K30"
};

Dataset generate_dataset(const ExperimentConfig& config);
void write_dataset_files(const ExperimentConfig& config, const Dataset& dataset, bool force);

// Test split, truncated to the sweep's test_limit when set. Samples are
// class-interleaved so a prefix stays class balanced.
Dataset test_split(const ExperimentConfig& config, const Dataset& dataset);

struct TrainOutcome {
  TrainReport report;
  Trainee trainee;
};

/// Trains one run. With a non-empty `run_dir`, writes checkpoint.bin and
/// metrics.csv there (refusing to overwrite unless `force`).
TrainOutcome run_training(const ExperimentConfig& config, const Dataset& dataset, const RunId& run,
                          const std::string& run_dir, bool force = false);

void write_metrics_csv(const std::string& path, const TrainReport& report, const std::string& config_hash);

struct CorruptionResult {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 5;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::vector<double> accuracy_per_step;  // p = 0..P
  std::vector<double> loss_per_step;      // p = 1..P
  int failed = 0;
};

/// Corrupts the test split with every (kind, severity) of the sweep and
/// adapts each sample. Appends per-sample JSON lines to `records_path` when
/// non-empty.
std::vector<CorruptionResult> run_adaptation(const ExperimentConfig& config, const Dataset& test,
                                             const ModelParams& model, const PrototypeBank& prototypes,
                                             const AdaptConfig& adapt, int threads, uint64_t seed,
                                             const std::string& records_path = {});

// Mean over corruptions of the per-step accuracy curve.
std::vector<double> mean_curve(const std::vector<CorruptionResult>& results);

struct SeedSweep {
  uint64_t seed = 0;
  std::vector<CorruptionResult> results;
};

/// Aggregate table: one row per (kind, severity) plus an "average" row, with
/// mean and sample standard deviation over seeds.
void write_results_csv(const std::string& path, const RunId& group, const std::vector<SeedSweep>& sweeps,
                       const std::string& config_hash);
void write_per_seed_csv(const std::string& path, const RunId& group, const std::vector<SeedSweep>& sweeps,
                        const std::string& config_hash);
/// Accuracy-vs-steps table averaged over corruptions, mean/std over seeds.
void write_steps_csv(const std::string& path, const RunId& group, const std::vector<SeedSweep>& sweeps,
                     const std::string& config_hash);

// results.csv, steps.csv and per_seed.csv for one group under `dir`.
void write_group_tables(const std::string& dir, const RunId& group, const std::vector<SeedSweep>& sweeps,
                        const std::string& config_hash);

double mean(const std::vector<double>& xs);
double sample_std(const std::vector<double>& xs);

int resolve_threads(int requested);

}  // namespace protoalign
