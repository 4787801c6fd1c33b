#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "protoalign/losses.hpp"
#include "support.hpp"

using namespace protoalign;
namespace pt = protoalign::testing;

namespace {

Matrix unit_columns(Eigen::Index rows, Eigen::Index cols, uint64_t seed) {
  return normalize_columns(pt::random_matrix(rows, cols, seed));
}

Matrix column_distributions(Eigen::Index rows, Eigen::Index cols, uint64_t seed) {
  Matrix q = pt::random_matrix(rows, cols, seed).array().exp().matrix();
  q.array().rowwise() /= q.colwise().sum().array();
  return q;
}

ViewBatch random_batch(int b, uint64_t seed) {
  ViewBatch v;
  v.view_s = pt::random_matrix(8, b, seed);
  v.view_t = pt::random_matrix(8, b, seed + 1);
  for (int i = 0; i < b; ++i) v.labels.push_back(i % 3);
  return v;
}

}  // namespace

TEST_CASE("entropy basics") {
  CHECK(entropy(Vector::Constant(4, 0.25)) == doctest::Approx(std::log(4.0)));
  Vector onehot = Vector::Zero(3);
  onehot(1) = 1.0;
  CHECK(entropy(onehot) == 0.0);
}

TEST_CASE("swapped prediction loss matches a direct evaluation") {
  const Matrix c = unit_columns(4, 5, 1);
  const Matrix zs = unit_columns(4, 3, 2);
  const Matrix zt = unit_columns(4, 3, 3);
  const Matrix qs = column_distributions(5, 3, 4);
  const Matrix qt = column_distributions(5, 3, 5);
  const double tau = 0.2;
  double expected = 0.0;
  for (int b = 0; b < 3; ++b) {
    Vector ls = (c.transpose() * zs.col(b)) / tau;
    Vector lt = (c.transpose() * zt.col(b)) / tau;
    ls.array() -= std::log(ls.array().exp().sum());
    lt.array() -= std::log(lt.array().exp().sum());
    expected -= qs.col(b).dot(lt) + qt.col(b).dot(ls);
  }
  expected /= 3.0;
  CHECK(swapped_prediction_loss(zs, zt, qs, qt, c, tau).value == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(swapped_prediction_loss(zs, zt, qs, qt, c, 0.0), ParameterError);
  CHECK_THROWS_AS(swapped_prediction_loss(zs, zt, qs.leftCols(2), qt, c, tau), ShapeError);
}

TEST_CASE("swapped prediction gradients") {
  Matrix c = unit_columns(4, 5, 1);
  Matrix zs = unit_columns(4, 3, 2);
  Matrix zt = unit_columns(4, 3, 3);
  const Matrix qs = column_distributions(5, 3, 4);
  const Matrix qt = column_distributions(5, 3, 5);
  const auto g = swapped_prediction_loss(zs, zt, qs, qt, c, 0.3).gradients;
  const double h = 1e-6;
  for (auto [name, target] : {std::pair{"z_s", &zs}, std::pair{"z_t", &zt}, std::pair{kPrototypeBlockId, &c}}) {
    for (Eigen::Index i = 0; i < target->size(); ++i) {
      const double orig = target->data()[i];
      target->data()[i] = orig + h;
      const double up = swapped_prediction_loss(zs, zt, qs, qt, c, 0.3).value;
      target->data()[i] = orig - h;
      const double down = swapped_prediction_loss(zs, zt, qs, qt, c, 0.3).value;
      target->data()[i] = orig;
      CHECK(pt::relative_error(g.at(name).data()[i], (up - down) / (2 * h)) < 1e-6);
    }
  }
}

TEST_CASE("swapped prediction is minimized by matching the codes") {
  // With q equal to the model's own prediction the loss equals the
  // prediction entropy, and any other code raises the cross-entropy.
  const Matrix c = unit_columns(3, 4, 7);
  const Matrix z = unit_columns(3, 2, 8);
  Matrix p = (c.transpose() * z / 0.5).array().exp().matrix();
  p.array().rowwise() /= p.colwise().sum().array();
  const double matched = swapped_prediction_loss(z, z, p, p, c, 0.5).value;
  const double other = swapped_prediction_loss(z, z, column_distributions(4, 2, 9), column_distributions(4, 2, 10),
                                               c, 0.5).value;
  CHECK(matched < other);
}

TEST_CASE("cross entropy value and gradient") {
  Matrix logits = pt::random_matrix(3, 4, 11);
  const std::vector<int> labels{0, 2, 1, 2};
  double expected = 0.0;
  for (int b = 0; b < 4; ++b) {
    expected -= logits(labels[b], b) - std::log(logits.col(b).array().exp().sum());
  }
  const auto ce = cross_entropy_loss(logits, labels);
  CHECK(ce.value == doctest::Approx(expected / 4).epsilon(1e-12));
  const Matrix g = ce.gradients.at("logits");
  CHECK(g.colwise().sum().cwiseAbs().maxCoeff() < 1e-15);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double orig = logits.data()[i];
    logits.data()[i] = orig + h;
    const double up = cross_entropy_loss(logits, labels).value;
    logits.data()[i] = orig - h;
    const double down = cross_entropy_loss(logits, labels).value;
    logits.data()[i] = orig;
    CHECK(pt::relative_error(g.data()[i], (up - down) / (2 * h)) < 1e-6);
  }
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0, 1, 3, 0}), InputError);
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0, 1}), ShapeError);
}

TEST_CASE("prototype entropy is bounded by the class count") {
  ModelParams m(pt::tiny_model_config(), 5);
  pt::jitter_parameters(m, 6, 1.0);
  for (uint64_t s = 0; s < 10; ++s) {
    const double v = prototype_entropy_loss(unit_columns(4, 6, 20 + s), m).value;
    CHECK(v <= 1e-12);
    CHECK(v >= -std::log(3.0) - 1e-12);
  }
}

TEST_CASE("prototype entropy gradients") {
  ModelParams m(pt::tiny_model_config(), 5);
  pt::jitter_parameters(m, 6, 0.5);
  Matrix c = unit_columns(4, 6, 21);
  const auto g = prototype_entropy_loss(c, m).gradients;
  auto loss = [&] { return prototype_entropy_loss(c, m).value; };
  const auto check = pt::check_blocks(m, &c, g, {"cls.weight", "cls.bias", kPrototypeBlockId}, loss, 8);
  INFO(check.worst);
  CHECK(check.max_rel_error < 1e-6);
}

TEST_CASE("training codes are column distributions") {
  const Matrix s = pt::random_matrix(6, 8, 30) * 0.5;
  const Matrix q = training_codes(s, TemperaturePair{0.1, 0.05}, 3);
  CHECK((q.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(q.minCoeff() >= 0.0);
}

TEST_CASE("full training loss gradients with frozen codes") {
  ModelParams m(pt::tiny_model_config(), 8);
  pt::jitter_parameters(m, 9);
  PrototypeBank c = PrototypeBank::random(4, 5, 10);
  const ViewBatch batch = random_batch(6, 40);
  TrainingObjective obj;
  obj.temps = {0.3, 0.5};
  const TrainingLoss first = ttaps_training_loss(batch, m, c, obj);
  CHECK(first.total.value ==
        doctest::Approx(first.l_swav + obj.gamma1 * first.l_ce + obj.gamma2 * first.l_ent).epsilon(1e-12));
  auto loss = [&] { return ttaps_training_loss(batch, m, c, obj, &first.codes).total.value; };
  auto ids = pt::block_ids(m, RoleSet::all());
  ids.push_back(kPrototypeBlockId);
  const auto check = pt::check_blocks(m, &c.values, first.total.gradients, ids, loss, 4);
  INFO(check.worst);
  CHECK(check.max_rel_error < 1e-5);
}

TEST_CASE("baseline objective trains only through cross-entropy") {
  const ModelParams m(pt::tiny_model_config(), 8);
  const PrototypeBank c = PrototypeBank::random(4, 5, 10);
  TrainingObjective obj;
  obj.swav_weight = 0.0;
  obj.gamma1 = 1.0;
  obj.gamma2 = 0.0;
  const TrainingLoss l = ttaps_training_loss(random_batch(4, 50), m, c, obj);
  CHECK(l.l_swav == 0.0);
  CHECK(l.total.gradients.count(kPrototypeBlockId) == 0);
  CHECK(l.total.gradients.count("cls.weight") == 1);
}

TEST_CASE("test loss gradients follow the requested scope") {
  ModelParams m(pt::tiny_model_config(), 12);
  pt::jitter_parameters(m, 13);
  const PrototypeBank c = PrototypeBank::random(4, 5, 14);
  ViewBatch views = random_batch(4, 60);
  views.labels.clear();
  const TemperaturePair temps{0.75, 1.0};
  const GradientScope scope{{BlockRole::BackboneEarly, BlockRole::BackboneLast}, false};
  const FrozenCodes codes = test_view_codes(views, m, c, temps.epsilon);
  const LossValue l = swav_test_loss(views, m, c, temps, scope);
  CHECK(l.value == doctest::Approx(swav_test_loss(views, m, c, temps, scope, &codes).value).epsilon(1e-14));
  for (const auto& [id, _] : l.gradients) {
    const BlockRole r = m.block(id).role;
    CHECK((r == BlockRole::BackboneEarly || r == BlockRole::BackboneLast));
  }
  auto loss = [&] { return swav_test_loss(views, m, c, temps, scope, &codes).value; };
  const auto check = pt::check_blocks(m, nullptr, l.gradients,
                                      pt::block_ids(m, {BlockRole::BackboneEarly, BlockRole::BackboneLast}), loss, 4);
  INFO(check.worst);
  CHECK(check.max_rel_error < 1e-5);

  CHECK_THROWS_AS(swav_test_loss(views, m, c, temps, GradientScope{RoleSet::all(), false}), ContractError);
  CHECK_THROWS_AS(swav_test_loss(views, m, c, temps, GradientScope{{BlockRole::BackboneLast}, true}), ContractError);
}
