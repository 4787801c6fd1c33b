#pragma once

#include <functional>
#include <string>
#include <vector>

#include "protoalign/data.hpp"
#include "protoalign/losses.hpp"

namespace protoalign {

enum class Variant { Baseline, JT, JT_ENT };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double base_lr = 0.1;
  double final_lr = 0.0;
  int warmup_epochs = 10;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  TemperaturePair temps{0.1, 0.05};
  double gamma1 = 0.3;
  double gamma2 = 0.1;
  int sinkhorn_iterations = 3;
  int num_prototypes = 30;
  bool prototype_momentum = true;
  // Per-block l2 norm cap on gradients (each weight, bias, affine block and
  // the prototype bank separately); 0 disables clipping.
  double grad_clip = 0.0;
  Variant variant = Variant::JT_ENT;
  uint64_t seed = 0;

  void validate() const;
  // Loss weights implied by the variant: Baseline trains cross-entropy alone.
  TrainingObjective objective() const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;  // rate used at the first step of the epoch
  double loss = 0.0;
  double l_swav = 0.0;
  double l_ce = 0.0;
  double l_ent = 0.0;
  double val_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  std::vector<double> lr_trace;  // every optimizer step
  std::string checkpoint_path;
};

/// Linear warmup from 0 (at step 0) to base_lr at step `warmup_steps`, then
/// cosine decay reaching `final_lr` exactly at step total_steps - 1.
double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr, double final_lr = 0.0);

// Momentum state for SGD; never part of a parameter snapshot.
struct OptimizerState {
  std::map<std::string, Matrix> velocity;
};

struct Trainee {
  ModelParams model;
  PrototypeBank prototypes;
  OptimizerState optimizer;
};

Trainee init_trainee(const ModelConfig& model_config, const TrainConfig& config);

/// SGD step: v = mu v + (g + wd w); w -= lr v. Prototypes get no weight
/// decay and are projected back onto the unit sphere afterwards.
void sgd_step(Trainee& t, const Gradients& grads, double lr, const TrainConfig& config);

double accuracy(const ModelParams& model, const Matrix& inputs, const std::vector<int>& labels);

struct StepClock {
  long step = 0;
  long total_steps = 0;
  long warmup_steps = 0;
};

/// One shuffled pass of minibatch SGD over `train` (incomplete final batches
/// are dropped). Shuffling and augmentation streams are keyed by
/// (seed, epoch) and (seed, epoch, sample index).
EpochMetrics train_epoch(Trainee& trainee, const Dataset& train, const TransformSpec& augment,
                         const TrainConfig& config, int epoch, StepClock& clock,
                         std::vector<double>* lr_trace = nullptr);

long steps_per_epoch(const Dataset& train, const TrainConfig& config);

struct FitOptions {
  std::string checkpoint_path;  // empty: do not write
  std::string config_hash;
  // Called after every epoch; used by the CLI for progress logging.
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Trains on the Train split, evaluating on Val after every epoch.
TrainReport fit(const TrainConfig& config, const ModelConfig& model_config, const TransformSpec& augment,
                const Dataset& dataset, const FitOptions& options, Trainee* result = nullptr);

}  // namespace protoalign
