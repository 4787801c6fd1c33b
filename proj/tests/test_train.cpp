#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "protoalign/config.hpp"
#include "protoalign/errors.hpp"
#include "protoalign/train.hpp"
#include "support.hpp"

using namespace protoalign;
namespace pt = protoalign::testing;

TEST_CASE("schedule endpoints") {
  const long total = 100;
  const long warm = 10;
  CHECK(lr_schedule(0, total, warm, 0.1, 0.001) == 0.0);
  CHECK(lr_schedule(5, total, warm, 0.1, 0.001) == doctest::Approx(0.05));
  CHECK(lr_schedule(warm, total, warm, 0.1, 0.001) == doctest::Approx(0.1));
  CHECK(lr_schedule(total - 1, total, warm, 0.1, 0.001) == doctest::Approx(0.001));
  CHECK(lr_schedule(0, total, 0, 0.1, 0.0) == doctest::Approx(0.1));
}

TEST_CASE("schedule rises then decays monotonically") {
  const long total = 300;
  const long warm = 40;
  double prev = -1.0;
  for (long s = 0; s <= warm; ++s) {
    const double lr = lr_schedule(s, total, warm, 0.2, 0.0);
    CHECK(lr > prev);
    prev = lr;
  }
  for (long s = warm + 1; s < total; ++s) {
    const double lr = lr_schedule(s, total, warm, 0.2, 0.0);
    CHECK(lr <= prev);
    CHECK(lr >= 0.0);
    prev = lr;
  }
}

TEST_CASE("momentum step follows v = mu v + g + wd w") {
  TrainConfig tc;
  tc.momentum = 0.9;
  tc.weight_decay = 0.1;
  Trainee t = init_trainee(pt::tiny_model_config(), tc);
  const Matrix w0 = t.model.values("stem.fc.weight");
  const Matrix b0 = t.model.values("stem.fc.bias");
  const Matrix g = Matrix::Constant(w0.rows(), w0.cols(), 0.5);
  const Matrix gb = Matrix::Constant(b0.rows(), 1, 0.5);
  sgd_step(t, {{"stem.fc.weight", g}, {"stem.fc.bias", gb}}, 0.1, tc);
  const Matrix v1 = g + 0.1 * w0;
  CHECK((t.model.values("stem.fc.weight") - (w0 - 0.1 * v1)).cwiseAbs().maxCoeff() < 1e-15);
  // Biases are not decayed.
  CHECK((t.model.values("stem.fc.bias") - (b0 - 0.1 * gb)).cwiseAbs().maxCoeff() < 1e-15);
  const Matrix w1 = t.model.values("stem.fc.weight");
  sgd_step(t, {{"stem.fc.weight", g}}, 0.1, tc);
  const Matrix v2 = 0.9 * v1 + g + 0.1 * w1;
  CHECK((t.model.values("stem.fc.weight") - (w1 - 0.1 * v2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("clipping caps each block's gradient norm") {
  TrainConfig tc;
  tc.momentum = 0.0;
  tc.weight_decay = 0.0;
  tc.grad_clip = 0.3;
  Trainee t = init_trainee(pt::tiny_model_config(), tc);
  const Matrix w0 = t.model.values("cls.weight");
  const Matrix g = Matrix::Constant(w0.rows(), w0.cols(), 10.0);
  sgd_step(t, {{"cls.weight", g}}, 1.0, tc);
  CHECK((w0 - t.model.values("cls.weight")).norm() == doctest::Approx(0.3));
  const Matrix b0 = t.model.values("cls.bias");
  const Matrix small = Matrix::Constant(b0.rows(), 1, 0.01);
  sgd_step(t, {{"cls.bias", small}}, 1.0, tc);
  CHECK((b0 - t.model.values("cls.bias") - small).norm() < 1e-15);
}

TEST_CASE("prototypes stay on the unit sphere") {
  TrainConfig tc;
  Trainee t = init_trainee(pt::tiny_model_config(), tc);
  const Matrix g = pt::random_matrix(t.prototypes.dim(), t.prototypes.count(), 3);
  sgd_step(t, {{kPrototypeBlockId, g}}, 0.5, tc);
  CHECK((t.prototypes.values.colwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("variants map to loss weights") {
  TrainConfig tc;
  tc.gamma1 = 0.3;
  tc.gamma2 = 0.1;
  tc.variant = Variant::Baseline;
  CHECK(tc.objective().swav_weight == 0.0);
  CHECK(tc.objective().gamma2 == 0.0);
  tc.variant = Variant::JT;
  CHECK(tc.objective().swav_weight == 1.0);
  CHECK(tc.objective().gamma1 == 0.3);
  CHECK(tc.objective().gamma2 == 0.0);
  tc.variant = Variant::JT_ENT;
  CHECK(tc.objective().gamma2 == 0.1);
  CHECK(parse_variant("jt-ent") == Variant::JT_ENT);
  CHECK(to_string(Variant::JT) == "jt");
  CHECK_THROWS_AS(parse_variant("swav"), ConfigError);
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    TrainConfig tc;
    mutate(tc);
    return tc;
  };
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.epochs = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.warmup_epochs = c.epochs; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.final_lr = 1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.momentum = 1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.grad_clip = -1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.temps.epsilon = 0.0; }).validate(), ConfigError);
}

TEST_CASE("incomplete final batches are dropped") {
  const Dataset d = generate_synthetic(3, 50, InputShape{2, 10, 10}, 0.2, 1);
  const Dataset train = d.subset(Split::Train);
  TrainConfig tc;
  tc.batch_size = 16;
  CHECK(steps_per_epoch(train, tc) == train.size() / 16);
}

namespace {

ExperimentConfig quick_config(int classes, double difficulty) {
  ExperimentConfig c;
  c.data.num_classes = classes;
  c.data.samples_per_class = 120;
  c.data.difficulty = difficulty;
  c.train.epochs = 12;
  c.train.warmup_epochs = 2;
  c.train.batch_size = 32;
  return c;
}

}  // namespace

TEST_CASE("an easy problem is solved to convergence") {
  const ExperimentConfig c = quick_config(3, 0.0);
  const Dataset d = generate_synthetic(3, c.data.samples_per_class, c.data.shape, 0.0, 2);
  Trainee t = init_trainee(c.model_config(), c.train_config(Variant::Baseline, 10, 0));
  const TrainReport r = fit(c.train_config(Variant::Baseline, 10, 0), c.model_config(), c.augment, d, {}, &t);
  CHECK(r.epochs.size() == 12);
  const Dataset test = d.subset(Split::Test);
  CHECK(accuracy(t.model, test.inputs, test.labels) >= 99.0);
}

TEST_CASE("training is reproducible bit for bit") {
  const ExperimentConfig c = quick_config(3, 0.5);
  const Dataset d = generate_synthetic(3, 60, c.data.shape, 0.5, 2);
  TrainConfig tc = c.train_config(Variant::JT_ENT, 8, 4);
  tc.epochs = 3;
  tc.warmup_epochs = 1;
  Trainee a = init_trainee(c.model_config(), tc);
  Trainee b = init_trainee(c.model_config(), tc);
  const TrainReport ra = fit(tc, c.model_config(), c.augment, d, {}, &a);
  const TrainReport rb = fit(tc, c.model_config(), c.augment, d, {}, &b);
  CHECK(ra.lr_trace == rb.lr_trace);
  for (const auto& blk : a.model.blocks()) {
    const Matrix& other = b.model.values(blk.id);
    CHECK(std::memcmp(blk.values.data(), other.data(), sizeof(double) * other.size()) == 0);
  }
  CHECK(a.prototypes.values == b.prototypes.values);
  CHECK(std::isfinite(ra.epochs.back().l_swav));
  CHECK(ra.epochs.back().l_ent <= 0.0);
}

TEST_CASE("model and dataset must agree") {
  const ExperimentConfig c = quick_config(3, 0.5);
  const Dataset d = generate_synthetic(4, 30, c.data.shape, 0.5, 2);
  CHECK_THROWS_AS(fit(c.train_config(Variant::JT, 8, 0), c.model_config(), c.augment, d, {}), ConfigError);
}
