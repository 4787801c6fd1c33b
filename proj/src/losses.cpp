#include "protoalign/losses.hpp"

#include <cmath>

#include "protoalign/errors.hpp"

namespace protoalign {

namespace {

constexpr double kProbFloor = 1e-12;

// Column-wise log-softmax.
Matrix log_softmax(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index b = 0; b < out.cols(); ++b) {
    out.col(b).array() -= detail::log_sum_exp(logits.col(b));
  }
  return out;
}

Matrix softmax(const Matrix& logits) { return log_softmax(logits).array().exp().matrix(); }

}  // namespace

void TemperaturePair::validate() const {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive, got " + std::to_string(tau));
  if (!(epsilon > 0.0)) throw ParameterError("epsilon must be positive, got " + std::to_string(epsilon));
}

void add_into(Gradients& acc, const Gradients& g, double weight) {
  for (const auto& [id, grad] : g) {
    auto it = acc.find(id);
    if (it == acc.end()) {
      acc.emplace(id, weight * grad);
    } else {
      it->second += weight * grad;
    }
  }
}

double entropy(const Vector& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0.0) h -= p(i) * std::log(std::max(p(i), kProbFloor));
  }
  return h;
}

LossValue swapped_prediction_loss(const Matrix& z_s, const Matrix& z_t, const Matrix& q_s, const Matrix& q_t,
                                  const Matrix& prototypes, double tau) {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive, got " + std::to_string(tau));
  const Eigen::Index k = prototypes.cols();
  const Eigen::Index b = z_s.cols();
  if (z_s.rows() != prototypes.rows() || z_t.rows() != prototypes.rows() || z_t.cols() != b || q_s.rows() != k ||
      q_t.rows() != k || q_s.cols() != b || q_t.cols() != b) {
    throw ShapeError("swapped_prediction_loss: inconsistent shapes");
  }
  const Matrix logp_s = log_softmax(prototypes.transpose() * z_s / tau);
  const Matrix logp_t = log_softmax(prototypes.transpose() * z_t / tau);
  const double n = static_cast<double>(b);

  LossValue out;
  out.value = -((q_s.array() * logp_t.array()).sum() + (q_t.array() * logp_s.array()).sum()) / n;

  // d l(z, q) / d(C^T z / tau) = p * sum(q) - q, per column.
  const Matrix p_t = logp_t.array().exp().matrix();
  const Matrix p_s = logp_s.array().exp().matrix();
  const Matrix g_t = (p_t * q_s.colwise().sum().asDiagonal() - q_s) / (tau * n);
  const Matrix g_s = (p_s * q_t.colwise().sum().asDiagonal() - q_t) / (tau * n);
  out.gradients["z_t"] = prototypes * g_t;
  out.gradients["z_s"] = prototypes * g_s;
  out.gradients[kPrototypeBlockId] = z_t * g_t.transpose() + z_s * g_s.transpose();
  return out;
}

LossValue cross_entropy_loss(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.cols()) {
    throw ShapeError("cross_entropy_loss: label count does not match batch");
  }
  const Matrix logp = log_softmax(logits);
  const double n = static_cast<double>(labels.size());
  LossValue out;
  Matrix grad = logp.array().exp().matrix();
  for (size_t b = 0; b < labels.size(); ++b) {
    const int y = labels[b];
    if (y < 0 || y >= logits.rows()) {
      throw InputError("label " + std::to_string(y) + " out of range for " + std::to_string(logits.rows()) +
                       " classes");
    }
    out.value -= logp(y, static_cast<Eigen::Index>(b));
    grad(y, static_cast<Eigen::Index>(b)) -= 1.0;
  }
  out.value /= n;
  out.gradients["logits"] = grad / n;
  return out;
}

LossValue prototype_entropy_loss(const Matrix& prototypes, const ModelParams& model) {
  const Matrix logits = classify(model, prototypes);
  const Matrix p = softmax(logits);
  const Eigen::Index k = p.cols();
  const double kk = static_cast<double>(k);
  const Vector mean = p.rowwise().mean();

  LossValue out;
  double per_proto = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) per_proto += entropy(p.col(i));
  out.value = per_proto / kk - entropy(mean);

  // d/dp_kj of H(x) = -sum x log(max(x, floor)) is -(log(max(x, floor)) + [x >= floor]).
  auto dh = [](double x) { return -(std::log(std::max(x, kProbFloor)) + (x >= kProbFloor ? 1.0 : 0.0)); };
  Matrix dp(p.rows(), k);
  for (Eigen::Index j = 0; j < p.rows(); ++j) {
    const double dmean = dh(mean(j)) / kk;
    for (Eigen::Index i = 0; i < k; ++i) dp(j, i) = dh(p(j, i)) / kk - dmean;
  }
  // Softmax backward per column.
  const Eigen::RowVectorXd inner = (dp.array() * p.array()).colwise().sum();
  const Matrix dlogits = p.array() * (dp.rowwise() - inner).array();

  out.gradients["cls.weight"] = dlogits * prototypes.transpose();
  out.gradients["cls.bias"] = dlogits.rowwise().sum();
  out.gradients[kPrototypeBlockId] = model.values("cls.weight").transpose() * dlogits;
  return out;
}

Matrix training_codes(const Matrix& scores, const TemperaturePair& temps, int iterations) {
  const auto settings = SinkhornSettings::with_defaults(temps.epsilon, iterations);
  return sinkhorn_codes(scores, settings).values * static_cast<double>(scores.cols());
}

TrainingLoss ttaps_training_loss(const ViewBatch& batch, const ModelParams& model, const PrototypeBank& prototypes,
                                 const TrainingObjective& objective, const FrozenCodes* frozen) {
  objective.temps.validate();
  if (objective.gamma1 < 0.0 || objective.gamma2 < 0.0 || objective.swav_weight < 0.0) {
    throw ParameterError("loss weights must be nonnegative");
  }
  const Eigen::Index b = batch.view_s.cols();
  if (batch.view_t.cols() != b || static_cast<Eigen::Index>(batch.labels.size()) != b) {
    throw ShapeError("training batch views and labels disagree in size");
  }
  Matrix inputs(batch.view_s.rows(), 2 * b);
  inputs << batch.view_s, batch.view_t;
  const ForwardResult fwd = forward(model, inputs);

  TrainingLoss out;
  Upstream up;
  Gradients proto_grads;

  if (objective.swav_weight > 0.0) {
    const Matrix z_s = fwd.projections.leftCols(b);
    const Matrix z_t = fwd.projections.rightCols(b);
    if (frozen != nullptr) {
      out.codes = *frozen;
    } else {
      out.codes.q_s = training_codes(score_matrix(prototypes.values, z_s), objective.temps,
                                     objective.sinkhorn_iterations);
      out.codes.q_t = training_codes(score_matrix(prototypes.values, z_t), objective.temps,
                                     objective.sinkhorn_iterations);
    }
    const LossValue swav =
        swapped_prediction_loss(z_s, z_t, out.codes.q_s, out.codes.q_t, prototypes.values, objective.temps.tau);
    out.l_swav = swav.value;
    Matrix dz(fwd.projections.rows(), 2 * b);
    dz << swav.gradients.at("z_s"), swav.gradients.at("z_t");
    up.projections = objective.swav_weight * dz;
    add_into(proto_grads, {{kPrototypeBlockId, swav.gradients.at(kPrototypeBlockId)}}, objective.swav_weight);
  }

  if (objective.gamma1 > 0.0) {
    std::vector<int> labels(batch.labels);
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
    const LossValue ce = cross_entropy_loss(fwd.logits, labels);
    out.l_ce = ce.value;
    up.logits = objective.gamma1 * ce.gradients.at("logits");
  }

  out.total.gradients = backward(model, fwd.tape, up, RoleSet::all());

  if (objective.gamma2 > 0.0) {
    const LossValue ent = prototype_entropy_loss(prototypes.values, model);
    out.l_ent = ent.value;
    add_into(out.total.gradients, {{"cls.weight", ent.gradients.at("cls.weight")},
                                   {"cls.bias", ent.gradients.at("cls.bias")}},
             objective.gamma2);
    add_into(proto_grads, {{kPrototypeBlockId, ent.gradients.at(kPrototypeBlockId)}}, objective.gamma2);
  }
  add_into(out.total.gradients, proto_grads);

  out.total.value = objective.swav_weight * out.l_swav + objective.gamma1 * out.l_ce + objective.gamma2 * out.l_ent;
  if (!std::isfinite(out.total.value)) throw NumericalError("training loss is not finite");
  return out;
}

FrozenCodes test_view_codes(const ViewBatch& views, const ModelParams& model, const PrototypeBank& prototypes,
                            double epsilon) {
  const Eigen::Index b = views.view_s.cols();
  Matrix inputs(views.view_s.rows(), 2 * b);
  inputs << views.view_s, views.view_t;
  const Matrix z = forward(model, inputs).projections;
  FrozenCodes codes;
  codes.q_s = test_codes(score_matrix(prototypes.values, z.leftCols(b)), epsilon).values;
  codes.q_t = test_codes(score_matrix(prototypes.values, z.rightCols(b)), epsilon).values;
  return codes;
}

LossValue swav_test_loss(const ViewBatch& views, const ModelParams& model, const PrototypeBank& prototypes,
                         const TemperaturePair& temps, const GradientScope& scope, const FrozenCodes* frozen) {
  temps.validate();
  if (scope.prototypes || scope.roles.contains(BlockRole::Classifier)) {
    throw ContractError("test-time loss never produces classifier or prototype gradients");
  }
  const Eigen::Index b = views.view_s.cols();
  if (views.view_t.cols() != b) throw ShapeError("test views disagree in size");
  Matrix inputs(views.view_s.rows(), 2 * b);
  inputs << views.view_s, views.view_t;
  const ForwardResult fwd = forward(model, inputs);
  const Matrix z_s = fwd.projections.leftCols(b);
  const Matrix z_t = fwd.projections.rightCols(b);

  FrozenCodes codes;
  if (frozen != nullptr) {
    codes = *frozen;
  } else {
    codes.q_s = test_codes(score_matrix(prototypes.values, z_s), temps.epsilon).values;
    codes.q_t = test_codes(score_matrix(prototypes.values, z_t), temps.epsilon).values;
  }
  const LossValue swav = swapped_prediction_loss(z_s, z_t, codes.q_s, codes.q_t, prototypes.values, temps.tau);
  Matrix dz(fwd.projections.rows(), 2 * b);
  dz << swav.gradients.at("z_s"), swav.gradients.at("z_t");

  LossValue out;
  out.value = swav.value;
  if (!std::isfinite(out.value)) throw NumericalError("test loss is not finite");
  if (!scope.roles.empty()) {
    Upstream up;
    up.projections = std::move(dz);
    out.gradients = backward(model, fwd.tape, up, scope.roles);
  }
  return out;
}

}  // namespace protoalign
