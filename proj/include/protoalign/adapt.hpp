#pragma once

// Offline single-sample test-time adaptation: each test input is repeated
// B_T times, both views of every copy are freshly augmented at every step,
// the selected backbone blocks take P plain gradient steps on the test SwAV
// loss, the raw input is classified and the parameters are reset.

#include <functional>
#include <string>
#include <vector>

#include "protoalign/augment.hpp"
#include "protoalign/losses.hpp"

namespace protoalign {

enum class AdaptScope { AllBackbone, LastBlock };

std::string to_string(AdaptScope s);
AdaptScope parse_scope(const std::string& name);
RoleSet scope_roles(AdaptScope s);

struct AdaptConfig {
  int batch_repeats = 32;  // B_T
  int steps = 10;          // P
  double alpha = 0.1;
  TemperaturePair temps{0.75, 1.0};
  AdaptScope scope = AdaptScope::LastBlock;
  uint64_t seed = 0;
  bool probe = true;  // record the prediction after every step

  void validate() const;
};

struct AdaptTrace {
  std::vector<double> losses;         // loss at step p (before its update), length P
  std::vector<int> step_predictions;  // prediction after step p, length P when probing
  double wall_seconds = 0.0;
};

struct AdaptResult {
  int base_prediction = -1;  // P = 0
  int prediction = -1;       // after P steps
  AdaptTrace trace;
  bool failed = false;  // non-finite loss; prediction falls back to P = 0
  std::string incident;
};

// Sees the adapted parameters after every update (step p = 1..P).
using StepObserver = std::function<void(int step, const ModelParams& model)>;

/// Adapts `model` to one sample and restores it before returning, so the
/// parameters are bitwise identical on exit. `sample_key` selects the
/// augmentation stream.
AdaptResult adapt_single(ModelParams& model, const PrototypeBank& prototypes, const Vector& x_test,
                         const InputShape& shape, const AdaptConfig& config, const TransformSpec& augment,
                         uint64_t sample_key, const StepObserver& observer = {});

struct AdaptDatasetResult {
  std::vector<AdaptResult> samples;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::vector<double> accuracy_per_step;  // index p = 0..P (probing only)
  std::vector<double> mean_loss_per_step;
  int failed = 0;
};

/// Runs adapt_single on every column of `inputs` using private parameter
/// copies on up to `threads` workers. Sample i uses key `keys[i]` (defaults
/// to i) so results do not depend on processing order or thread count.
AdaptDatasetResult adapt_dataset(const ModelParams& model, const PrototypeBank& prototypes, const Matrix& inputs,
                                 const std::vector<int>& labels, const InputShape& shape, const AdaptConfig& config,
                                 const TransformSpec& augment, int threads = 1,
                                 const std::vector<uint64_t>& keys = {});

}  // namespace protoalign
