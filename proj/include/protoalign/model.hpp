#pragma once

// Dense residual backbone f, projection head g (affine, group norm, relu,
// affine, unit norm) and a linear classifier h applied to the projection.
// Reverse-mode gradients are written out by hand for the handful of layers
// used here.

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "protoalign/group_norm.hpp"

namespace protoalign {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class BlockRole : uint8_t { BackboneEarly = 0, BackboneLast = 1, Projection = 2, Classifier = 3 };

const char* to_string(BlockRole role);

class RoleSet {
 public:
  constexpr RoleSet() = default;
  constexpr RoleSet(std::initializer_list<BlockRole> roles) {
    for (auto r : roles) add(r);
  }
  static constexpr RoleSet all() {
    return {BlockRole::BackboneEarly, BlockRole::BackboneLast, BlockRole::Projection, BlockRole::Classifier};
  }
  constexpr RoleSet& add(BlockRole r) {
    bits_ |= bit(r);
    return *this;
  }
  constexpr bool contains(BlockRole r) const { return (bits_ & bit(r)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }

 private:
  static constexpr uint8_t bit(BlockRole r) { return static_cast<uint8_t>(1u << static_cast<unsigned>(r)); }
  uint8_t bits_ = 0;
};

struct ModelConfig {
  int input_dim = 128;
  int width = 64;
  int residual_blocks = 2;
  int num_groups = 4;
  int projection_hidden = 64;
  int projection_dim = 16;
  int num_classes = 6;
  double gn_epsilon = 1e-5;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ParamBlock {
  std::string id;
  BlockRole role = BlockRole::BackboneEarly;
  Matrix values;
  // Weight matrices receive weight decay; biases and normalization affine
  // parameters do not.
  bool decays = false;
};

using Gradients = std::map<std::string, Matrix>;

class ModelParams {
 public:
  ModelParams(const ModelConfig& config, uint64_t rng_seed);

  // Rebuilds a model from stored blocks; shapes and ids must match the layout
  // implied by `config` exactly.
  static ModelParams from_blocks(const ModelConfig& config, uint64_t rng_seed, std::vector<ParamBlock> blocks);

  const ModelConfig& config() const { return config_; }
  uint64_t rng_seed() const { return rng_seed_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(std::string_view id) const;
  const Matrix& values(std::string_view id) const { return block(id).values; }

  // Mutable access invalidates outstanding tapes.
  Matrix& mutable_values(std::string_view id);
  std::vector<ParamBlock>& mutable_blocks() {
    ++version_;
    return blocks_;
  }

  uint64_t version() const { return version_; }
  std::string signature() const;
  size_t parameter_count() const;

 private:
  ModelParams() = default;
  void index_blocks();

  ModelConfig config_;
  uint64_t rng_seed_ = 0;
  std::vector<ParamBlock> blocks_;
  std::unordered_map<std::string, size_t> index_;
  uint64_t version_ = 0;
};

struct ResidualTape {
  Matrix input;
  GroupNormCache<double> gn1;
  Matrix hidden;  // relu(gn1(fc1(input)))
  GroupNormCache<double> gn2;
  Matrix output;  // relu(input + gn2(fc2(hidden)))
};

struct Tape {
  uint64_t version = 0;
  std::string signature;
  Matrix input;
  GroupNormCache<double> stem_gn;
  Matrix stem_output;
  std::vector<ResidualTape> residual;
  GroupNormCache<double> proj_gn;
  Matrix proj_hidden;  // relu(gn(fc1(backbone output)))
  Vector proj_norms;
  Matrix projections;
};

struct ForwardResult {
  Matrix projections;  // D x B, unit columns
  Matrix logits;       // classes x B, computed from the projections
  Tape tape;
};

// Upstream gradients for backward. Missing entries contribute nothing, and
// blocks that only receive gradient through missing entries are absent from
// the returned map.
struct Upstream {
  std::optional<Matrix> projections;
  std::optional<Matrix> logits;
};

ForwardResult forward(const ModelParams& model, const Matrix& inputs);
Gradients backward(const ModelParams& model, const Tape& tape, const Upstream& upstream,
                   RoleSet requested = RoleSet::all());

// Class scores h(x) = W x + b for arbitrary D-dimensional inputs; used for
// prototypes.
Matrix classify(const ModelParams& model, const Matrix& projections);
std::vector<int> predict(const ModelParams& model, const Matrix& inputs);

/// Scales every column to unit l2 norm. Columns with norm below 1e-12 are
/// divided by 1e-12 instead.
Matrix normalize_columns(const Matrix& v, Vector* norms = nullptr);

struct ParamSnapshot {
  std::string signature;
  std::vector<Matrix> values;
};

ParamSnapshot snapshot(const ModelParams& model);
void restore(ModelParams& model, const ParamSnapshot& snap);

struct PrototypeBank {
  Matrix values;  // D x K, unit columns

  static PrototypeBank random(int dim, int count, uint64_t seed);
  void renormalize();
  Eigen::Index count() const { return values.cols(); }
  Eigen::Index dim() const { return values.rows(); }
};

inline constexpr const char* kPrototypeBlockId = "prototypes";

struct Checkpoint {
  ModelParams model;
  PrototypeBank prototypes;
  std::string variant;
  std::string config_hash;
  uint64_t rng_seed = 0;
  uint64_t rng_draws = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace protoalign
