#pragma once

// Synthetic class-conditional grids, a five-kind corruption suite with
// severities 1..5, and a versioned little-endian dataset file format.

#include <cstdint>
#include <string>
#include <vector>

#include "protoalign/augment.hpp"

namespace protoalign {

enum class Split : uint8_t { Train = 0, Val = 1, Test = 2 };

struct DatasetMeta {
  int num_classes = 6;
  int samples_per_class = 250;
  InputShape shape;
  double difficulty = 0.5;
  uint64_t seed = 0;
  std::string description;  // free-form provenance (generator, corruption)
};

struct Dataset {
  Matrix inputs;  // input_dim x N, one sample per column
  std::vector<int> labels;
  std::vector<Split> splits;
  DatasetMeta meta;

  Eigen::Index size() const { return inputs.cols(); }
  Dataset subset(Split split) const;
  std::vector<int> indices(Split split) const;
  void validate() const;
};

/// Each class is an elongated Gaussian blob with a class-specific
/// orientation, rendered at a random position, size and channel colour, plus
/// background clutter and pixel noise whose amounts grow with `difficulty`
/// in [0, 1]. Per class: 20% test, and the rest split 80/20 train/val.
Dataset generate_synthetic(int num_classes, int samples_per_class, const InputShape& shape, double difficulty,
                           uint64_t seed);

enum class CorruptionKind { GaussianNoise, ImpulseNoise, Contrast, Blur, Pixelate };

inline constexpr CorruptionKind kAllCorruptions[] = {CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise,
                                                     CorruptionKind::Contrast, CorruptionKind::Blur,
                                                     CorruptionKind::Pixelate};

std::string to_string(CorruptionKind kind);
CorruptionKind parse_corruption(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 5;
  uint64_t seed = 0;

  void validate() const;
};

// Fraction of entries replaced by salt/pepper at each impulse severity.
double impulse_rate(int severity);

Vector corrupt_sample(const Vector& input, const InputShape& shape, const CorruptionSpec& spec, uint64_t sample_key);
Dataset corrupt(const Dataset& dataset, const CorruptionSpec& spec);

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace protoalign
