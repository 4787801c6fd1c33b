#include "protoalign/adapt.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include "protoalign/errors.hpp"

namespace protoalign {

std::string to_string(AdaptScope s) { return s == AdaptScope::LastBlock ? "last-block" : "all"; }

AdaptScope parse_scope(const std::string& name) {
  if (name == "last-block" || name == "last_block") return AdaptScope::LastBlock;
  if (name == "all" || name == "all_backbone") return AdaptScope::AllBackbone;
  throw ConfigError("unknown adaptation scope '" + name + "' (expected all or last-block)");
}

RoleSet scope_roles(AdaptScope s) {
  if (s == AdaptScope::LastBlock) return {BlockRole::BackboneLast};
  return {BlockRole::BackboneEarly, BlockRole::BackboneLast};
}

void AdaptConfig::validate() const {
  if (batch_repeats < 2) throw ConfigError("batch_repeats (B_T) must be >= 2");
  if (steps < 0) throw ConfigError("steps (P) must be >= 0");
  if (!(alpha > 0.0)) throw ConfigError("test learning rate must be positive");
  try {
    temps.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

namespace {

int argmax_prediction(const ModelParams& model, const Vector& x) { return predict(model, x)[0]; }

}  // namespace

AdaptResult adapt_single(ModelParams& model, const PrototypeBank& prototypes, const Vector& x_test,
                         const InputShape& shape, const AdaptConfig& config, const TransformSpec& augment,
                         uint64_t sample_key, const StepObserver& observer) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const ParamSnapshot initial = snapshot(model);
  const GradientScope scope{scope_roles(config.scope), false};

  AdaptResult result;
  result.base_prediction = argmax_prediction(model, x_test);
  const int bt = config.batch_repeats;
  for (int p = 1; p <= config.steps; ++p) {
    Rng rng = rng_stream(config.seed ^ augment.seed, {3, sample_key, static_cast<uint64_t>(p)});
    ViewBatch views;
    views.view_s.resize(x_test.size(), bt);
    views.view_t.resize(x_test.size(), bt);
    for (int i = 0; i < bt; ++i) {
      auto [vs, vt] = sample_views(x_test, shape, augment, rng);
      views.view_s.col(i) = vs;
      views.view_t.col(i) = vt;
    }
    LossValue loss;
    try {
      loss = swav_test_loss(views, model, prototypes, config.temps, scope);
    } catch (const NumericalError& e) {
      result.failed = true;
      result.incident = "step " + std::to_string(p) + ": " + e.what();
      break;
    }
    result.trace.losses.push_back(loss.value);
    auto& blocks = model.mutable_blocks();
    for (auto& b : blocks) {
      auto it = loss.gradients.find(b.id);
      if (it != loss.gradients.end()) b.values -= config.alpha * it->second;
    }
    if (observer) observer(p, model);
    if (config.probe) {
      try {
        result.trace.step_predictions.push_back(argmax_prediction(model, x_test));
      } catch (const NumericalError& e) {
        result.failed = true;
        result.incident = "step " + std::to_string(p) + " probe: " + e.what();
        break;
      }
    }
  }
  if (result.failed) {
    result.prediction = result.base_prediction;
    if (config.probe) result.trace.step_predictions.assign(static_cast<size_t>(config.steps), result.base_prediction);
  } else {
    result.prediction = config.steps == 0 ? result.base_prediction : argmax_prediction(model, x_test);
  }
  restore(model, initial);
  result.trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

AdaptDatasetResult adapt_dataset(const ModelParams& model, const PrototypeBank& prototypes, const Matrix& inputs,
                                 const std::vector<int>& labels, const InputShape& shape, const AdaptConfig& config,
                                 const TransformSpec& augment, int threads, const std::vector<uint64_t>& keys) {
  config.validate();
  const Eigen::Index n = inputs.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("labels do not match inputs");
  if (!keys.empty() && static_cast<Eigen::Index>(keys.size()) != n) throw ShapeError("keys do not match inputs");

  AdaptDatasetResult out;
  out.samples.resize(static_cast<size_t>(n));
  std::atomic<Eigen::Index> next{0};
  auto worker = [&] {
    ModelParams local = model;
    for (Eigen::Index i = next++; i < n; i = next++) {
      const uint64_t key = keys.empty() ? static_cast<uint64_t>(i) : keys[static_cast<size_t>(i)];
      out.samples[static_cast<size_t>(i)] =
          adapt_single(local, prototypes, inputs.col(i), shape, config, augment, key);
    }
  };
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  const size_t steps = static_cast<size_t>(config.steps);
  std::vector<long> correct_per_step(steps + 1, 0);
  std::vector<double> loss_sum(steps, 0.0);
  std::vector<long> loss_count(steps, 0);
  long before = 0;
  long after = 0;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    const auto& r = out.samples[i];
    const int y = labels[i];
    if (r.failed) ++out.failed;
    if (r.base_prediction == y) ++before;
    if (r.prediction == y) ++after;
    if (config.probe) {
      if (r.base_prediction == y) ++correct_per_step[0];
      for (size_t p = 0; p < r.trace.step_predictions.size(); ++p) {
        if (r.trace.step_predictions[p] == y) ++correct_per_step[p + 1];
      }
    }
    for (size_t p = 0; p < r.trace.losses.size(); ++p) {
      loss_sum[p] += r.trace.losses[p];
      ++loss_count[p];
    }
  }
  const double denom = n > 0 ? static_cast<double>(n) : 1.0;
  out.accuracy_before = 100.0 * before / denom;
  out.accuracy_after = 100.0 * after / denom;
  if (config.probe) {
    for (long c : correct_per_step) out.accuracy_per_step.push_back(100.0 * c / denom);
  }
  for (size_t p = 0; p < steps; ++p) {
    out.mean_loss_per_step.push_back(loss_count[p] > 0 ? loss_sum[p] / loss_count[p] : std::nan(""));
  }
  return out;
}

}  // namespace protoalign
