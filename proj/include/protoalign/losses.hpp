#pragma once

#include <optional>
#include <string>
#include <vector>

#include "protoalign/model.hpp"
#include "protoalign/ot_codes.hpp"

namespace protoalign {

struct LossValue {
  double value = 0.0;
  Gradients gradients;
};

struct TemperaturePair {
  double tau = 0.1;       // prediction softmax temperature
  double epsilon = 0.05;  // code smoothness

  void validate() const;
};

// Which gradients a caller wants back.
struct GradientScope {
  RoleSet roles = RoleSet::all();
  bool prototypes = true;
};

/// Symmetric swapped-prediction loss averaged over the batch:
///   (1/B) sum_b [ l(z_t[b], q_s[b]) + l(z_s[b], q_t[b]) ],
///   l(z, q) = -sum_k q_k log softmax_k(C^T z / tau).
/// Codes are constants. Gradients are keyed "z_s", "z_t" and "prototypes".
LossValue swapped_prediction_loss(const Matrix& z_s, const Matrix& z_t, const Matrix& q_s, const Matrix& q_t,
                                  const Matrix& prototypes, double tau);

/// Mean negative log-likelihood of the labels; gradient keyed "logits".
LossValue cross_entropy_loss(const Matrix& logits, const std::vector<int>& labels);

/// (1/K) sum_k H(h(c_k)) - H((1/K) sum_k h(c_k)) with natural logs.
/// Gradients for "prototypes", "cls.weight" and "cls.bias".
LossValue prototype_entropy_loss(const Matrix& prototypes, const ModelParams& model);

// Shannon entropy with 0 log 0 = 0 and probabilities clamped at 1e-12.
double entropy(const Vector& p);

struct ViewBatch {
  Matrix view_s;  // input_dim x B
  Matrix view_t;
  std::vector<int> labels;  // may be empty for test batches
};

// Codes held fixed while evaluating a loss, in the form the loss consumes
// (columns summing to one).
struct FrozenCodes {
  Matrix q_s;
  Matrix q_t;
};

struct TrainingObjective {
  TemperaturePair temps;
  double swav_weight = 1.0;  // 0 disables the self-supervised term
  double gamma1 = 0.3;       // cross-entropy weight
  double gamma2 = 0.1;       // prototype entropy weight
  int sinkhorn_iterations = 3;
};

struct TrainingLoss {
  LossValue total;
  double l_swav = 0.0;
  double l_ce = 0.0;
  double l_ent = 0.0;
  FrozenCodes codes;  // codes actually used (empty when the SwAV term is off)
};

/// Training codes for a view: Sinkhorn over the batch, rescaled by B so that
/// every column is a distribution.
Matrix training_codes(const Matrix& scores, const TemperaturePair& temps, int iterations);

/// L = w L_swav + gamma1 L_ce + gamma2 L_ent. The SwAV term reaches the
/// backbone, projection head and prototypes; cross-entropy reaches the
/// backbone, projection head and classifier; the entropy term reaches the
/// prototypes and classifier. Cross-entropy averages over both views.
TrainingLoss ttaps_training_loss(const ViewBatch& batch, const ModelParams& model, const PrototypeBank& prototypes,
                                 const TrainingObjective& objective, const FrozenCodes* frozen = nullptr);

/// Self-supervised test loss on augmented copies of one sample with closed
/// form codes. Only backbone / projection gradients may be requested;
/// asking for classifier or prototype gradients is a contract error.
LossValue swav_test_loss(const ViewBatch& views, const ModelParams& model, const PrototypeBank& prototypes,
                         const TemperaturePair& temps, const GradientScope& scope,
                         const FrozenCodes* frozen = nullptr);

/// Closed-form test codes for the two views, as used by swav_test_loss.
FrozenCodes test_view_codes(const ViewBatch& views, const ModelParams& model, const PrototypeBank& prototypes,
                            double epsilon);

void add_into(Gradients& acc, const Gradients& g, double weight = 1.0);

}  // namespace protoalign
