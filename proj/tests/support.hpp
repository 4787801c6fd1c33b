#pragma once

// Shared helpers for the unit tests and the acceptance suite: small random
// models and central finite differences over parameter blocks.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "protoalign/losses.hpp"

namespace protoalign::testing {

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.input_dim = 8;
  c.width = 8;
  c.residual_blocks = 2;
  c.num_groups = 2;
  c.projection_hidden = 6;
  c.projection_dim = 4;
  c.num_classes = 3;
  return c;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

// Perturbs every parameter so that biases, gamma and beta are not at their
// initial constants (which would hide gradient errors).
inline void jitter_parameters(ModelParams& model, uint64_t seed, double scale = 0.2) {
  uint64_t s = seed;
  for (auto& b : model.mutable_blocks()) {
    b.values += random_matrix(b.values.rows(), b.values.cols(), ++s, scale);
  }
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  int entries = 0;
};

// Relative error |a - n| / max(|a| + |n|, floor), the larger of the two
// standard forms. `entries_per_block` entries are sampled from every block.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

/// Compares analytic gradients for each listed block (or the prototypes,
/// via `prototypes`) against central differences of `loss`.
inline GradCheck check_blocks(ModelParams& model, Matrix* prototypes, const Gradients& analytic,
                              const std::vector<std::string>& ids, const std::function<double()>& loss,
                              int entries_per_block = 4, double h = 1e-5, uint64_t seed = 11) {
  GradCheck out;
  std::mt19937_64 rng(seed);
  for (const auto& id : ids) {
    const bool is_proto = id == kPrototypeBlockId;
    auto value_ref = [&]() -> Matrix& { return is_proto ? *prototypes : model.mutable_values(id); };
    const Eigen::Index size = value_ref().size();
    const auto it = analytic.find(id);
    for (int e = 0; e < entries_per_block; ++e) {
      const Eigen::Index flat = static_cast<Eigen::Index>(rng() % static_cast<uint64_t>(size));
      const double original = value_ref().data()[flat];
      value_ref().data()[flat] = original + h;
      const double up = loss();
      value_ref().data()[flat] = original - h;
      const double down = loss();
      value_ref().data()[flat] = original;
      const double numeric = (up - down) / (2 * h);
      const double a = it == analytic.end() ? 0.0 : it->second.data()[flat];
      const double err = relative_error(a, numeric);
      ++out.entries;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = id + "[" + std::to_string(flat) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

inline std::vector<std::string> block_ids(const ModelParams& model, RoleSet roles) {
  std::vector<std::string> ids;
  for (const auto& b : model.blocks()) {
    if (roles.contains(b.role)) ids.push_back(b.id);
  }
  return ids;
}

}  // namespace protoalign::testing
