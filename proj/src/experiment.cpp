#include "protoalign/experiment.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "protoalign/errors.hpp"

namespace protoalign {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::trunc) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::out | mode);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

}  // namespace

std::string RunId::name() const { return group_name() + "_seed" + std::to_string(seed); }
std::string RunId::group_name() const { return to_string(variant) + "_K" + std::to_string(prototypes); }

double mean(const std::vector<double>& xs) {
  if (xs.empty()) return std::nan("");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

Dataset generate_dataset(const ExperimentConfig& config) {
  return generate_synthetic(config.data.num_classes, config.data.samples_per_class, config.data.shape,
                            config.data.difficulty, config.data.seed);
}

void write_dataset_files(const ExperimentConfig& config, const Dataset& dataset, bool force) {
  const std::string path = config.dataset_path();
  if (fs::exists(path) && !force) {
    throw IoError("'" + path + "' exists; pass --force to overwrite");
  }
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_dataset(dataset, path);
  nlohmann::ordered_json meta;
  meta["config_hash"] = config.hash();
  meta["format_version"] = 1;
  meta["num_classes"] = dataset.meta.num_classes;
  meta["samples_per_class"] = dataset.meta.samples_per_class;
  meta["shape"] = {dataset.meta.shape.channels, dataset.meta.shape.height, dataset.meta.shape.width};
  meta["difficulty"] = dataset.meta.difficulty;
  meta["seed"] = dataset.meta.seed;
  meta["generator"] = dataset.meta.description;
  meta["train"] = dataset.indices(Split::Train).size();
  meta["val"] = dataset.indices(Split::Val).size();
  meta["test"] = dataset.indices(Split::Test).size();
  auto out = open_out(fs::path(path).replace_extension(".json").string());
  out << meta.dump(2) << '\n';
}

Dataset test_split(const ExperimentConfig& config, const Dataset& dataset) {
  Dataset test = dataset.subset(Split::Test);
  const int limit = config.sweep.test_limit;
  if (limit > 0 && limit < test.size()) {
    test.inputs = test.inputs.leftCols(limit).eval();
    test.labels.resize(static_cast<size_t>(limit));
    test.splits.resize(static_cast<size_t>(limit));
  }
  return test;
}

void write_metrics_csv(const std::string& path, const TrainReport& report, const std::string& config_hash) {
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << '\n';
  out << "epoch,lr,l_swav,l_ce,l_ent,val_acc\n";
  for (const auto& m : report.epochs) {
    out << m.epoch << ',' << fixed(m.lr, 9) << ',' << fixed(m.l_swav) << ',' << fixed(m.l_ce) << ','
        << fixed(m.l_ent) << ',' << fixed(m.val_accuracy, 4) << '\n';
  }
}

TrainOutcome run_training(const ExperimentConfig& config, const Dataset& dataset, const RunId& run,
                          const std::string& run_dir, bool force) {
  const TrainConfig tc = config.train_config(run.variant, run.prototypes, run.seed);
  FitOptions options;
  options.config_hash = config.hash();
  if (!run_dir.empty()) {
    options.checkpoint_path = run_dir + "/checkpoint.bin";
    if (fs::exists(options.checkpoint_path) && !force) {
      throw IoError("'" + options.checkpoint_path + "' exists; runs are not resumed, pass --force to retrain");
    }
    fs::create_directories(run_dir);
  }
  Trainee trainee = init_trainee(config.model_config(), tc);
  TrainReport report = fit(tc, config.model_config(), config.augment, dataset, options, &trainee);
  if (!run_dir.empty()) write_metrics_csv(run_dir + "/metrics.csv", report, options.config_hash);
  return TrainOutcome{std::move(report), std::move(trainee)};
}

std::vector<CorruptionResult> run_adaptation(const ExperimentConfig& config, const Dataset& test,
                                             const ModelParams& model, const PrototypeBank& prototypes,
                                             const AdaptConfig& adapt, int threads, uint64_t seed,
                                             const std::string& records_path) {
  AdaptConfig ac = adapt;
  ac.seed = adapt.seed + 1000003ull * seed;
  ac.probe = true;
  std::ofstream records;
  if (!records_path.empty()) records = open_out(records_path);
  const std::string hash = config.hash();

  std::vector<CorruptionResult> results;
  for (CorruptionKind kind : config.sweep.corruptions) {
    for (int severity : config.sweep.severities) {
      const CorruptionSpec spec{kind, severity, config.sweep.corruption_seed};
      const Dataset corrupted = corrupt(test, spec);
      std::vector<uint64_t> keys(static_cast<size_t>(corrupted.size()));
      for (size_t i = 0; i < keys.size(); ++i) {
        keys[i] = (static_cast<uint64_t>(kind) * 8 + static_cast<uint64_t>(severity)) << 32 | i;
      }
      const AdaptDatasetResult r = adapt_dataset(model, prototypes, corrupted.inputs, corrupted.labels,
                                                 corrupted.meta.shape, ac, config.augment, threads, keys);
      CorruptionResult cr{kind, severity, r.accuracy_before, r.accuracy_after, r.accuracy_per_step,
                          r.mean_loss_per_step, r.failed};
      results.push_back(std::move(cr));
      if (records) {
        for (size_t i = 0; i < r.samples.size(); ++i) {
          const auto& s = r.samples[i];
          nlohmann::ordered_json j;
          j["config_hash"] = hash;
          j["seed"] = seed;
          j["corruption"] = to_string(kind);
          j["severity"] = severity;
          j["sample_id"] = i;
          j["label"] = corrupted.labels[i];
          j["prediction_p0"] = s.base_prediction;
          j["prediction"] = s.prediction;
          j["step_predictions"] = s.trace.step_predictions;
          j["losses"] = s.trace.losses;
          j["failed"] = s.failed;
          if (s.failed) j["incident"] = s.incident;
          records << j.dump() << '\n';
        }
      }
    }
  }
  return results;
}

std::vector<double> mean_curve(const std::vector<CorruptionResult>& results) {
  std::vector<double> curve;
  if (results.empty()) return curve;
  curve.assign(results.front().accuracy_per_step.size(), 0.0);
  for (const auto& r : results) {
    for (size_t p = 0; p < curve.size(); ++p) curve[p] += r.accuracy_per_step[p];
  }
  for (double& v : curve) v /= static_cast<double>(results.size());
  return curve;
}

void write_results_csv(const std::string& path, const RunId& group, const std::vector<SeedSweep>& sweeps,
                       const std::string& config_hash) {
  if (sweeps.empty()) throw ContractError("no sweeps to aggregate");
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << '\n';
  out << "variant,prototypes,corruption,severity,accuracy_before,accuracy_before_std,accuracy_after,"
         "accuracy_after_std,seeds\n";
  const size_t rows = sweeps.front().results.size();
  std::vector<double> avg_before(sweeps.size(), 0.0);
  std::vector<double> avg_after(sweeps.size(), 0.0);
  for (size_t i = 0; i < rows; ++i) {
    std::vector<double> before;
    std::vector<double> after;
    for (size_t s = 0; s < sweeps.size(); ++s) {
      const auto& r = sweeps[s].results.at(i);
      before.push_back(r.accuracy_before);
      after.push_back(r.accuracy_after);
      avg_before[s] += r.accuracy_before / static_cast<double>(rows);
      avg_after[s] += r.accuracy_after / static_cast<double>(rows);
    }
    const auto& r0 = sweeps.front().results[i];
    out << to_string(group.variant) << ',' << group.prototypes << ',' << to_string(r0.kind) << ',' << r0.severity
        << ',' << fixed(mean(before), 4) << ',' << fixed(sample_std(before), 4) << ',' << fixed(mean(after), 4) << ','
        << fixed(sample_std(after), 4) << ',' << sweeps.size() << '\n';
  }
  out << to_string(group.variant) << ',' << group.prototypes << ",average,"
      << sweeps.front().results.front().severity << ',' << fixed(mean(avg_before), 4) << ','
      << fixed(sample_std(avg_before), 4) << ',' << fixed(mean(avg_after), 4) << ','
      << fixed(sample_std(avg_after), 4) << ',' << sweeps.size() << '\n';
}

void write_per_seed_csv(const std::string& path, const RunId& group, const std::vector<SeedSweep>& sweeps,
                        const std::string& config_hash) {
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << '\n';
  out << "variant,prototypes,seed,corruption,severity,accuracy_before,accuracy_after,failed\n";
  for (const auto& sw : sweeps) {
    for (const auto& r : sw.results) {
      out << to_string(group.variant) << ',' << group.prototypes << ',' << sw.seed << ',' << to_string(r.kind) << ','
          << r.severity << ',' << fixed(r.accuracy_before, 4) << ',' << fixed(r.accuracy_after, 4) << ',' << r.failed
          << '\n';
    }
  }
}

void write_steps_csv(const std::string& path, const RunId& group, const std::vector<SeedSweep>& sweeps,
                     const std::string& config_hash) {
  if (sweeps.empty()) throw ContractError("no sweeps to aggregate");
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << '\n';
  out << "variant,prototypes,step,accuracy_mean,accuracy_std,loss_mean,seeds\n";
  std::vector<std::vector<double>> curves;
  for (const auto& sw : sweeps) curves.push_back(mean_curve(sw.results));
  const size_t steps = curves.front().size();
  for (size_t p = 0; p < steps; ++p) {
    std::vector<double> acc;
    std::vector<double> loss;
    for (size_t s = 0; s < sweeps.size(); ++s) {
      acc.push_back(curves[s][p]);
      if (p > 0) {
        for (const auto& r : sweeps[s].results) loss.push_back(r.loss_per_step.at(p - 1));
      }
    }
    out << to_string(group.variant) << ',' << group.prototypes << ',' << p << ',' << fixed(mean(acc), 4) << ','
        << fixed(sample_std(acc), 4) << ',' << (loss.empty() ? std::string("") : fixed(mean(loss))) << ','
        << sweeps.size() << '\n';
  }
}

void write_group_tables(const std::string& dir, const RunId& group, const std::vector<SeedSweep>& sweeps,
                        const std::string& config_hash) {
  write_results_csv(dir + "/results.csv", group, sweeps, config_hash);
  write_steps_csv(dir + "/steps.csv", group, sweeps, config_hash);
  write_per_seed_csv(dir + "/per_seed.csv", group, sweeps, config_hash);
}

}  // namespace protoalign
