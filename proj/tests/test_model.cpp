#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "protoalign/model.hpp"
#include "support.hpp"

using namespace protoalign;
namespace pt = protoalign::testing;

namespace {

ModelParams jittered(uint64_t seed = 3) {
  ModelParams m(pt::tiny_model_config(), seed);
  pt::jitter_parameters(m, seed + 100);
  return m;
}

}  // namespace

TEST_CASE("forward shapes and unit projections") {
  const ModelParams m = jittered();
  const Matrix x = pt::random_matrix(8, 5, 1);
  const ForwardResult f = forward(m, x);
  CHECK(f.projections.rows() == 4);
  CHECK(f.projections.cols() == 5);
  CHECK(f.logits.rows() == 3);
  CHECK((f.projections.colwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((classify(m, f.projections) - f.logits).norm() == 0.0);
  CHECK_THROWS_AS(forward(m, pt::random_matrix(7, 2, 1)), ShapeError);
}

TEST_CASE("samples do not interact within a batch") {
  const ModelParams m = jittered();
  const Matrix x = pt::random_matrix(8, 4, 2);
  const Matrix all = forward(m, x).projections;
  for (Eigen::Index b = 0; b < 4; ++b) {
    CHECK((forward(m, Matrix(x.col(b))).projections - all.col(b)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("parameter layout and roles") {
  const ModelParams m(pt::tiny_model_config(), 1);
  CHECK(m.block("stem.fc.weight").role == BlockRole::BackboneEarly);
  CHECK(m.block("block0.fc1.weight").role == BlockRole::BackboneEarly);
  CHECK(m.block("block1.gn2.gamma").role == BlockRole::BackboneLast);
  CHECK(m.block("proj.gn.beta").role == BlockRole::Projection);
  CHECK(m.block("cls.weight").role == BlockRole::Classifier);
  CHECK(m.block("stem.fc.weight").decays);
  CHECK_FALSE(m.block("stem.fc.bias").decays);
  CHECK_FALSE(m.block("stem.gn.gamma").decays);
  CHECK_THROWS_AS(m.block("nope"), ContractError);
  size_t n = 0;
  for (const auto& b : m.blocks()) n += static_cast<size_t>(b.values.size());
  CHECK(m.parameter_count() == n);
}

TEST_CASE("initialization is reproducible from the seed") {
  const ModelParams a(pt::tiny_model_config(), 42);
  const ModelParams b(pt::tiny_model_config(), 42);
  const ModelParams c(pt::tiny_model_config(), 43);
  CHECK(a.values("stem.fc.weight") == b.values("stem.fc.weight"));
  CHECK(a.values("stem.fc.weight") != c.values("stem.fc.weight"));
}

TEST_CASE("configuration validation") {
  ModelConfig c = pt::tiny_model_config();
  c.residual_blocks = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = pt::tiny_model_config();
  c.width = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = pt::tiny_model_config();
  c.projection_hidden = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = pt::tiny_model_config();
  c.num_classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("backward matches finite differences for every block") {
  ModelParams m = jittered(7);
  const Matrix x = pt::random_matrix(8, 4, 3);
  const Matrix wz = pt::random_matrix(4, 4, 4);
  const Matrix wl = pt::random_matrix(3, 4, 5);
  auto loss = [&] {
    const ForwardResult f = forward(m, x);
    return f.projections.cwiseProduct(wz).sum() + f.logits.cwiseProduct(wl).sum();
  };
  const ForwardResult f = forward(m, x);
  const Gradients g = backward(m, f.tape, Upstream{wz, wl});
  const auto ids = pt::block_ids(m, RoleSet::all());
  CHECK(g.size() == ids.size());
  const auto check = pt::check_blocks(m, nullptr, g, ids, loss, 6);
  INFO(check.worst);
  CHECK(check.max_rel_error < 1e-6);
}

TEST_CASE("requested roles restrict the returned blocks") {
  const ModelParams m = jittered();
  const Matrix x = pt::random_matrix(8, 3, 1);
  const ForwardResult f = forward(m, x);
  const Gradients g = backward(m, f.tape, Upstream{pt::random_matrix(4, 3, 2), std::nullopt},
                               RoleSet{BlockRole::BackboneLast});
  CHECK_FALSE(g.empty());
  for (const auto& [id, _] : g) CHECK(m.block(id).role == BlockRole::BackboneLast);
}

TEST_CASE("projection upstream never reaches the classifier") {
  const ModelParams m = jittered();
  const ForwardResult f = forward(m, pt::random_matrix(8, 3, 1));
  const Gradients g = backward(m, f.tape, Upstream{pt::random_matrix(4, 3, 2), std::nullopt});
  CHECK(g.count("cls.weight") == 0);
  CHECK(g.count("cls.bias") == 0);
  CHECK(g.count("stem.fc.weight") == 1);
}

TEST_CASE("stale tapes are rejected") {
  ModelParams m = jittered();
  const ForwardResult f = forward(m, pt::random_matrix(8, 2, 1));
  m.mutable_values("cls.bias")(0, 0) += 1.0;
  CHECK_THROWS_AS(backward(m, f.tape, Upstream{std::nullopt, pt::random_matrix(3, 2, 1)}), ContractError);
}

TEST_CASE("snapshot and restore are bitwise") {
  ModelParams m = jittered();
  const ParamSnapshot snap = snapshot(m);
  for (auto& b : m.mutable_blocks()) b.values.array() += 0.5;
  restore(m, snap);
  const ParamSnapshot again = snapshot(m);
  REQUIRE(again.values.size() == snap.values.size());
  for (size_t i = 0; i < snap.values.size(); ++i) {
    CHECK(std::memcmp(again.values[i].data(), snap.values[i].data(), sizeof(double) * snap.values[i].size()) == 0);
  }
  ModelConfig other = pt::tiny_model_config();
  other.width = 10;
  ModelParams wrong(other, 1);
  CHECK_THROWS_AS(restore(wrong, snap), ContractError);
}

TEST_CASE("prototype bank has unit columns") {
  const PrototypeBank c = PrototypeBank::random(4, 7, 3);
  CHECK(c.dim() == 4);
  CHECK(c.count() == 7);
  CHECK((c.values.colwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(PrototypeBank::random(0, 3, 1), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "protoalign_test_model";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "ckpt.bin").string();
  const Checkpoint ckpt{jittered(), PrototypeBank::random(4, 5, 2), "jt-ent", "abc", 9, 123};
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.variant == "jt-ent");
  CHECK(back.config_hash == "abc");
  CHECK(back.rng_seed == 9);
  CHECK(back.rng_draws == 123);
  CHECK(back.model.config() == ckpt.model.config());
  CHECK(back.prototypes.values == ckpt.prototypes.values);
  for (const auto& b : ckpt.model.blocks()) CHECK(back.model.values(b.id) == b.values);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "garbage";
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::filesystem::remove_all(dir);
}
