#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "protoalign/config.hpp"
#include "protoalign/errors.hpp"

using namespace protoalign;

TEST_CASE("an empty file gives the validated defaults") {
  const ExperimentConfig c = parse_config("");
  CHECK(c.seeds.size() == 3);
  CHECK(c.sweep.prototype_counts == std::vector<int>{30});
  CHECK(c.sweep.severities == std::vector<int>{5});
  CHECK(c.adapt.batch_repeats == 32);
  CHECK(c.adapt.steps == 10);
  CHECK(c.model_config().input_dim == c.data.shape.size());
}

TEST_CASE("canonical text round-trips") {
  ExperimentConfig c = parse_config(
      "[train]\nbase_lr=0.02\ngrad_clip=0.5\n[adapt]\nscope=all\n[experiment]\nseeds=4,5\nprototypes=10,30,100\n"
      "corruptions=blur,contrast\n");
  CHECK(c.train.base_lr == 0.02);
  CHECK(c.train.grad_clip == 0.5);
  CHECK(c.adapt.scope == AdaptScope::AllBackbone);
  CHECK(c.seeds == std::vector<uint64_t>{4, 5});
  CHECK(c.sweep.corruptions.size() == 2);
  const ExperimentConfig back = parse_config(c.to_ini());
  CHECK(back.to_ini() == c.to_ini());
  CHECK(back.hash() == c.hash());
}

TEST_CASE("hash follows results-relevant settings only") {
  ExperimentConfig a;
  ExperimentConfig b;
  b.out_dir = "elsewhere";
  b.data.path = "/tmp/x.bin";
  CHECK(a.hash() == b.hash());
  b.train.gamma2 = 0.2;
  CHECK(a.hash() != b.hash());
  CHECK(a.hash().size() == 16);
}

TEST_CASE("mistakes are config errors") {
  CHECK_THROWS_AS(parse_config("[train]\nepochz=3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[trainer]\nepochs=3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs=three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nbase_lr=0.1x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\nprototypes=\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\nseverities=6\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\ncorruptions=fog\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[adapt]\nbatch_repeats=1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\nwidth=30\nnum_groups=4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("not an ini ["), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.ini"), IoError);
}

TEST_CASE("per-run configs") {
  ExperimentConfig c;
  c.baseline_lr = 0.2;
  const TrainConfig base = c.train_config(Variant::Baseline, 10, 3);
  CHECK(base.base_lr == 0.2);
  CHECK(base.num_prototypes == 10);
  CHECK(base.seed == 3);
  const TrainConfig jt = c.train_config(Variant::JT, 100, 1);
  CHECK(jt.base_lr == c.train.base_lr);
  CHECK(jt.variant == Variant::JT);
}
