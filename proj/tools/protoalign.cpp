// protoalign: generate / train / adapt / report driver.
//
// Exit codes: 0 success, 1 configuration error, 2 numerical failure,
// 3 I/O or file-format error.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "protoalign/errors.hpp"
#include "protoalign/experiment.hpp"
#include "protoalign/report.hpp"

namespace fs = std::filesystem;
using namespace protoalign;

namespace {

struct Options {
  std::string config_path;
  std::vector<uint64_t> seeds;
  std::vector<std::string> variants;
  std::vector<int> prototypes;
  std::optional<int> steps;
  std::string scope;
  std::string out;
  std::optional<int> threads;
  bool force = false;
};

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig c = opt.config_path.empty() ? ExperimentConfig{} : load_config(opt.config_path);
  if (!opt.seeds.empty()) c.seeds = opt.seeds;
  if (!opt.prototypes.empty()) c.sweep.prototype_counts = opt.prototypes;
  if (opt.steps) c.adapt.steps = *opt.steps;
  if (!opt.scope.empty()) c.adapt.scope = parse_scope(opt.scope);
  if (!opt.out.empty()) c.out_dir = opt.out;
  if (opt.threads) c.threads = *opt.threads;
  c.validate();
  return c;
}

std::vector<Variant> variants_or(const Options& opt, std::vector<Variant> fallback) {
  if (opt.variants.empty()) return fallback;
  std::vector<Variant> out;
  for (const auto& v : opt.variants) out.push_back(parse_variant(v));
  return out;
}

Dataset load_required_dataset(const ExperimentConfig& c) {
  const std::string path = c.dataset_path();
  if (!fs::exists(path)) throw IoError("dataset '" + path + "' not found; run `protoalign generate` first");
  Dataset ds = load_dataset(path);
  if (ds.meta.num_classes != c.data.num_classes || ds.meta.shape.size() != c.data.shape.size()) {
    throw ConfigError("dataset '" + path + "' does not match the [data] section");
  }
  return ds;
}

std::string run_dir(const ExperimentConfig& c, const RunId& id) { return c.out_dir + "/train/" + id.name(); }

// Baseline does not depend on K, so it is trained once at the first count.
std::vector<int> prototype_axis(const ExperimentConfig& c, Variant v) {
  if (v == Variant::Baseline) return {c.sweep.prototype_counts.front()};
  return c.sweep.prototype_counts;
}

void cmd_generate(const Options& opt) {
  const ExperimentConfig c = resolve(opt);
  const Dataset ds = generate_dataset(c);
  write_dataset_files(c, ds, opt.force);
  spdlog::info("wrote {} ({} samples, config {})", c.dataset_path(), ds.size(), c.hash());
}

void cmd_train(const Options& opt) {
  const ExperimentConfig c = resolve(opt);
  const Dataset ds = load_required_dataset(c);
  for (Variant v : variants_or(opt, {Variant::Baseline, Variant::JT, Variant::JT_ENT})) {
    for (int k : prototype_axis(c, v)) {
      for (uint64_t seed : c.seeds) {
        const RunId id{v, k, seed};
        spdlog::info("training {}", id.name());
        const auto outcome = run_training(c, ds, id, run_dir(c, id), opt.force);
        const auto& last = outcome.report.epochs.back();
        spdlog::info("{}: final loss {:.4f}, val acc {:.2f}%", id.name(), last.loss, last.val_accuracy);
      }
    }
  }
}

void cmd_adapt(const Options& opt) {
  const ExperimentConfig c = resolve(opt);
  if (c.sweep.corruptions.empty() || c.sweep.severities.empty()) {
    throw ConfigError("empty corruption sweep: set [experiment] corruptions and severities");
  }
  const auto variants = variants_or(opt, {Variant::JT, Variant::JT_ENT});
  for (Variant v : variants) {
    if (v == Variant::Baseline && c.adapt.steps > 0) {
      throw ConfigError("baseline has no trained prototypes to adapt against; use --steps 0 to evaluate it");
    }
  }
  const Dataset ds = load_required_dataset(c);
  const Dataset test = test_split(c, ds);
  const int threads = resolve_threads(c.threads);
  const std::string hash = c.hash();
  for (Variant v : variants) {
    for (int k : prototype_axis(c, v)) {
      const RunId group{v, k, 0};
      const std::string dir = c.out_dir + "/adapt/" + group.group_name();
      if (fs::exists(dir + "/results.csv") && !opt.force) {
        throw IoError("'" + dir + "/results.csv' exists; pass --force to overwrite");
      }
      std::vector<SeedSweep> sweeps;
      for (uint64_t seed : c.seeds) {
        const RunId id{v, k, seed};
        const std::string path = run_dir(c, id) + "/checkpoint.bin";
        if (!fs::exists(path)) throw IoError("checkpoint '" + path + "' not found; run `protoalign train` first");
        const Checkpoint ckpt = load_checkpoint(path);
        if (ckpt.variant != to_string(v)) throw FormatError("'" + path + "' holds variant " + ckpt.variant);
        if (ckpt.prototypes.values.cols() != k) throw FormatError("'" + path + "' has a different prototype count");
        spdlog::info("adapting {} ({} samples x {} corruptions, P={}, scope={})", id.name(), test.size(),
                     c.sweep.corruptions.size() * c.sweep.severities.size(), c.adapt.steps, to_string(c.adapt.scope));
        auto results = run_adaptation(c, test, ckpt.model, ckpt.prototypes, c.adapt, threads, seed,
                                      dir + "/records_seed" + std::to_string(seed) + ".jsonl");
        for (const auto& r : results) {
          if (r.failed > 0) spdlog::warn("{} {}: {} samples fell back to P=0", id.name(), to_string(r.kind), r.failed);
        }
        sweeps.push_back({seed, std::move(results)});
      }
      write_group_tables(dir, group, sweeps, hash);
      spdlog::info("wrote {}/results.csv", dir);
    }
  }
}

void cmd_report(const Options& opt) {
  const ExperimentConfig c = resolve(opt);
  const auto& ks = c.sweep.prototype_counts;
  const int focus = std::find(ks.begin(), ks.end(), 30) != ks.end() ? 30 : ks.front();
  const ReportOutput out = write_report(c.out_dir, focus);
  for (const auto& w : out.warnings) spdlog::warn("{}", w);
  for (const auto& f : out.files) spdlog::info("wrote {}", f);
}

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  if (const char* env = std::getenv("PROTOALIGN_LOG")) {
    spdlog::set_level(spdlog::level::from_str(env));
  }
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Prototype-aligned joint training and single-sample test-time adaptation"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "INI experiment configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seeds, "run seed (repeatable; overrides [experiment] seeds)");
    sub->add_option("--out", opt.out, "output directory (overrides [experiment] out_dir)");
    sub->add_option("--threads", opt.threads, "worker cap (0 = all cores)")->check(CLI::NonNegativeNumber);
    sub->add_flag("--force", opt.force, "overwrite existing outputs");
  };
  auto add_variant = [&](CLI::App* sub) {
    sub->add_option("--variant", opt.variants, "baseline, jt or jt-ent (repeatable)")
        ->check(CLI::IsMember({"baseline", "jt", "jt-ent"}));
    sub->add_option("--prototypes", opt.prototypes, "prototype count K (repeatable)");
  };

  auto* gen = app.add_subcommand("generate", "generate the synthetic dataset");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train checkpoints for each variant, K and seed");
  add_common(train);
  add_variant(train);
  auto* adapt = app.add_subcommand("adapt", "corruption sweep with test-time adaptation");
  add_common(adapt);
  add_variant(adapt);
  adapt->add_option("--steps", opt.steps, "adaptation steps P")->check(CLI::NonNegativeNumber);
  adapt->add_option("--scope", opt.scope, "parameters adapted at test time")
      ->check(CLI::IsMember({"all", "last-block"}));
  auto* report = app.add_subcommand("report", "render SVG charts and summary.csv");
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) cmd_generate(opt);
    if (*train) cmd_train(opt);
    if (*adapt) cmd_adapt(opt);
    if (*report) cmd_report(opt);
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return 2;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const FormatError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
