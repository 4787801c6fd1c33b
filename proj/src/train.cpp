#include "protoalign/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "protoalign/errors.hpp"

namespace protoalign {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline:
      return "baseline";
    case Variant::JT:
      return "jt";
    case Variant::JT_ENT:
      return "jt-ent";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  if (name == "baseline") return Variant::Baseline;
  if (name == "jt") return Variant::JT;
  if (name == "jt-ent" || name == "jt_ent") return Variant::JT_ENT;
  throw ConfigError("unknown variant '" + name + "' (expected baseline, jt or jt-ent)");
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 2) throw ConfigError("epochs must be >= 1 and batch_size >= 2");
  if (!(base_lr > 0.0) || final_lr < 0.0 || final_lr > base_lr) {
    throw ConfigError("learning rates must satisfy 0 <= final_lr <= base_lr, base_lr > 0");
  }
  if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("warmup_epochs must lie in [0, epochs)");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be nonnegative");
  if (gamma1 < 0.0 || gamma2 < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (sinkhorn_iterations < 1) throw ConfigError("sinkhorn_iterations must be >= 1");
  if (num_prototypes < 1) throw ConfigError("num_prototypes must be >= 1");
  try {
    temps.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

TrainingObjective TrainConfig::objective() const {
  TrainingObjective o;
  o.temps = temps;
  o.sinkhorn_iterations = sinkhorn_iterations;
  switch (variant) {
    case Variant::Baseline:
      o.swav_weight = 0.0;
      o.gamma1 = 1.0;
      o.gamma2 = 0.0;
      break;
    case Variant::JT:
      o.gamma1 = gamma1;
      o.gamma2 = 0.0;
      break;
    case Variant::JT_ENT:
      o.gamma1 = gamma1;
      o.gamma2 = gamma2;
      break;
  }
  return o;
}

double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr, double final_lr) {
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const long decay_span = total_steps - 1 - warmup_steps;
  if (decay_span <= 0) return base_lr;
  const double progress = static_cast<double>(std::min(step - warmup_steps, decay_span)) / decay_span;
  return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

Trainee init_trainee(const ModelConfig& model_config, const TrainConfig& config) {
  Trainee t{ModelParams(model_config, config.seed),
            PrototypeBank::random(model_config.projection_dim, config.num_prototypes,
                                  rng_stream(config.seed, {0x70726f74ull})()),
            {}};
  return t;
}

void sgd_step(Trainee& t, const Gradients& grads, double lr, const TrainConfig& config) {
  auto update = [&](const std::string& id, Matrix& w, const Matrix& g, bool decays, bool use_momentum) {
    Matrix step = g;
    if (config.grad_clip > 0.0) {
      const double norm = step.norm();
      if (norm > config.grad_clip) step *= config.grad_clip / norm;
    }
    if (decays && config.weight_decay > 0.0) step += config.weight_decay * w;
    if (use_momentum && config.momentum > 0.0) {
      auto it = t.optimizer.velocity.find(id);
      if (it == t.optimizer.velocity.end()) {
        it = t.optimizer.velocity.emplace(id, step).first;
      } else {
        it->second = config.momentum * it->second + step;
      }
      step = it->second;
    }
    w -= lr * step;
  };
  auto& blocks = t.model.mutable_blocks();
  for (auto& b : blocks) {
    auto it = grads.find(b.id);
    if (it == grads.end()) continue;
    update(b.id, b.values, it->second, b.decays, true);
  }
  auto pit = grads.find(kPrototypeBlockId);
  if (pit != grads.end()) {
    update(kPrototypeBlockId, t.prototypes.values, pit->second, false, config.prototype_momentum);
    t.prototypes.renormalize();
  }
}

double accuracy(const ModelParams& model, const Matrix& inputs, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  constexpr Eigen::Index kChunk = 512;
  long correct = 0;
  for (Eigen::Index start = 0; start < inputs.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, inputs.cols() - start);
    const auto pred = predict(model, inputs.middleCols(start, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

long steps_per_epoch(const Dataset& train, const TrainConfig& config) {
  return static_cast<long>(train.size()) / config.batch_size;
}

EpochMetrics train_epoch(Trainee& trainee, const Dataset& train, const TransformSpec& augment,
                         const TrainConfig& config, int epoch, StepClock& clock, std::vector<double>* lr_trace) {
  const Eigen::Index n = train.size();
  const long steps = steps_per_epoch(train, config);
  if (steps < 1) throw ConfigError("training split smaller than one batch");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = rng_stream(config.seed, {1, static_cast<uint64_t>(epoch)});
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const TrainingObjective objective = config.objective();
  const InputShape& shape = train.meta.shape;
  const int b = config.batch_size;
  EpochMetrics m;
  m.epoch = epoch;
  for (long s = 0; s < steps; ++s) {
    ViewBatch batch;
    batch.view_s.resize(shape.size(), b);
    batch.view_t.resize(shape.size(), b);
    batch.labels.resize(static_cast<size_t>(b));
    for (int j = 0; j < b; ++j) {
      const int idx = order[static_cast<size_t>(s * b + j)];
      Rng rng = rng_stream(config.seed ^ augment.seed, {2, static_cast<uint64_t>(epoch), static_cast<uint64_t>(idx)});
      auto [vs, vt] = sample_views(train.inputs.col(idx), shape, augment, rng);
      batch.view_s.col(j) = vs;
      batch.view_t.col(j) = vt;
      batch.labels[static_cast<size_t>(j)] = train.labels[static_cast<size_t>(idx)];
    }
    TrainingLoss loss;
    try {
      loss = ttaps_training_loss(batch, trainee.model, trainee.prototypes, objective);
    } catch (const NumericalError& e) {
      std::ostringstream os;
      os << "non-finite training loss at epoch " << epoch << " step " << s << " (" << e.what() << "); batch samples:";
      for (int j = 0; j < b; ++j) os << ' ' << order[static_cast<size_t>(s * b + j)];
      throw NumericalError(os.str());
    }
    const double lr = lr_schedule(clock.step, clock.total_steps, clock.warmup_steps, config.base_lr, config.final_lr);
    if (s == 0) m.lr = lr;
    if (lr_trace != nullptr) lr_trace->push_back(lr);
    sgd_step(trainee, loss.total.gradients, lr, config);
    ++clock.step;
    m.loss += loss.total.value;
    m.l_swav += loss.l_swav;
    m.l_ce += loss.l_ce;
    m.l_ent += loss.l_ent;
  }
  m.loss /= steps;
  m.l_swav /= steps;
  m.l_ce /= steps;
  m.l_ent /= steps;
  return m;
}

TrainReport fit(const TrainConfig& config, const ModelConfig& model_config, const TransformSpec& augment,
                const Dataset& dataset, const FitOptions& options, Trainee* result) {
  config.validate();
  augment.validate();
  if (model_config.input_dim != dataset.meta.shape.size() || model_config.num_classes != dataset.meta.num_classes) {
    throw ConfigError("model configuration does not match dataset shape/classes");
  }
  const Dataset train = dataset.subset(Split::Train);
  const Dataset val = dataset.subset(Split::Val);
  Trainee trainee = init_trainee(model_config, config);

  StepClock clock;
  const long per_epoch = steps_per_epoch(train, config);
  clock.total_steps = per_epoch * config.epochs;
  clock.warmup_steps = per_epoch * config.warmup_epochs;

  TrainReport report;
  for (int e = 0; e < config.epochs; ++e) {
    EpochMetrics m = train_epoch(trainee, train, augment, config, e, clock, &report.lr_trace);
    m.val_accuracy = accuracy(trainee.model, val.inputs, val.labels);
    if (!std::isfinite(m.loss)) throw NumericalError("epoch " + std::to_string(e) + " produced a non-finite loss");
    report.epochs.push_back(m);
    if (options.on_epoch) options.on_epoch(m);
  }
  if (!options.checkpoint_path.empty()) {
    Checkpoint ckpt{trainee.model, trainee.prototypes, to_string(config.variant), options.config_hash, config.seed,
                    static_cast<uint64_t>(clock.step)};
    save_checkpoint(options.checkpoint_path, ckpt);
    report.checkpoint_path = options.checkpoint_path;
  }
  if (result != nullptr) *result = std::move(trainee);
  return report;
}

}  // namespace protoalign
