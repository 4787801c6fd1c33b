#pragma once

// Stochastic two-view transformations for small multi-channel grids:
// random resized crop (window + bilinear resampling), per-channel
// contrast/offset jitter and Gaussian blur with reflective padding.

#include <utility>
#include <vector>

#include "protoalign/model.hpp"
#include "protoalign/rng.hpp"

namespace protoalign {

struct InputShape {
  int channels = 2;
  int height = 10;
  int width = 10;

  int size() const { return channels * height * width; }
  bool operator==(const InputShape&) const = default;
};

struct TransformSpec {
  double crop_scale_min = 0.14;  // fraction of the grid area
  double crop_scale_max = 1.0;
  double jitter_strength = 1.0;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  uint64_t seed = 0;

  static TransformSpec identity() { return {1.0, 1.0, 0.0, 0.0, 0.0, 0}; }
  void validate() const;
};

struct TransformParams {
  double crop_x = 0.0;  // window origin, in pixels
  double crop_y = 0.0;
  double crop_w = 0.0;  // window extent, in pixels
  double crop_h = 0.0;
  std::vector<double> gains;    // per channel, empty when jitter is off
  std::vector<double> offsets;  // per channel
  double blur_sigma = 0.0;
};

TransformParams sample_transform(const InputShape& shape, const TransformSpec& spec, Rng& rng);
Vector apply_transform(const Vector& input, const InputShape& shape, const TransformParams& params);

/// Two independent draws from the transformation set applied to `input`.
std::pair<Vector, Vector> sample_views(const Vector& input, const InputShape& shape, const TransformSpec& spec,
                                       Rng& rng);

// Building blocks shared with the corruption suite.
Vector gaussian_blur(const Vector& input, const InputShape& shape, double sigma);
Vector resample_window(const Vector& input, const InputShape& shape, double x0, double y0, double w, double h);

}  // namespace protoalign
