#pragma once

// Experiment configuration: an INI file with [data], [model], [train],
// [augment], [adapt] and [experiment] sections. Every key has a default;
// unknown keys are rejected.

#include <string>
#include <vector>

#include "protoalign/adapt.hpp"
#include "protoalign/data.hpp"
#include "protoalign/train.hpp"

namespace protoalign {

struct DataSpec {
  int num_classes = 6;
  int samples_per_class = 250;
  InputShape shape;
  double difficulty = 0.5;
  uint64_t seed = 1;
  std::string path;  // empty: <out_dir>/dataset.bin
};

struct SweepSpec {
  std::vector<CorruptionKind> corruptions{std::begin(kAllCorruptions), std::end(kAllCorruptions)};
  std::vector<int> severities{5};
  std::vector<int> prototype_counts{30};
  uint64_t corruption_seed = 7;
  int test_limit = 0;  // 0: use the whole test split
};

inline TrainConfig toy_train() {
  TrainConfig t;
  t.epochs = 20;
  t.warmup_epochs = 2;
  t.base_lr = 0.05;
  t.grad_clip = 0.3;
  t.gamma1 = 1.0;
  return t;
}

struct ExperimentConfig {
  DataSpec data;
  ModelConfig model;  // input_dim / num_classes are derived from `data`
  // Defaults are scaled for the synthetic task: shorter schedule, one
  // clipped learning rate shared by every variant, a heavier CE weight and
  // milder cropping than TrainConfig / TransformSpec carry on their own.
  TrainConfig train = toy_train();
  double baseline_lr = 0.05;
  TransformSpec augment{0.5, 1.0, 1.0, 0.1, 1.0, 0};
  AdaptConfig adapt;
  SweepSpec sweep;
  std::vector<uint64_t> seeds{0, 1, 2};
  std::string out_dir = "runs";
  int threads = 0;  // 0: hardware concurrency

  void validate() const;
  std::string to_ini() const;
  // FNV-1a of the canonical INI text (output paths blanked), 16 hex digits.
  std::string hash() const;

  std::string dataset_path() const;
  // Model/train configs for one run of the sweep.
  ModelConfig model_config() const;
  TrainConfig train_config(Variant variant, int num_prototypes, uint64_t seed) const;
};

ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::string& path);

}  // namespace protoalign
