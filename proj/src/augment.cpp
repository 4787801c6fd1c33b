#include "protoalign/augment.hpp"

#include <algorithm>
#include <cmath>

#include "protoalign/errors.hpp"

namespace protoalign {

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : k) w /= total;
  return k;
}

}  // namespace

void TransformSpec::validate() const {
  if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max || crop_scale_max > 1.0) {
    throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (jitter_strength < 0.0) throw ConfigError("jitter strength must be nonnegative");
  if (blur_sigma_min < 0.0 || blur_sigma_min > blur_sigma_max) {
    throw ConfigError("blur sigma range must satisfy 0 <= min <= max");
  }
}

Vector resample_window(const Vector& input, const InputShape& shape, double x0, double y0, double w, double h) {
  const int H = shape.height;
  const int W = shape.width;
  Vector out(input.size());
  const double sy = h / H;
  const double sx = w / W;
  for (int c = 0; c < shape.channels; ++c) {
    const Eigen::Index base = static_cast<Eigen::Index>(c) * H * W;
    for (int i = 0; i < H; ++i) {
      const double y = std::clamp(y0 + (i + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
      const int y_lo = static_cast<int>(std::floor(y));
      const int y_hi = std::min(y_lo + 1, H - 1);
      const double fy = y - y_lo;
      for (int j = 0; j < W; ++j) {
        const double x = std::clamp(x0 + (j + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
        const int x_lo = static_cast<int>(std::floor(x));
        const int x_hi = std::min(x_lo + 1, W - 1);
        const double fx = x - x_lo;
        auto at = [&](int yy, int xx) { return input(base + yy * W + xx); };
        double v = at(y_lo, x_lo);
        if (fx != 0.0 || fy != 0.0) {
          v = (1.0 - fy) * ((1.0 - fx) * at(y_lo, x_lo) + fx * at(y_lo, x_hi)) +
              fy * ((1.0 - fx) * at(y_hi, x_lo) + fx * at(y_hi, x_hi));
        }
        out(base + i * W + j) = v;
      }
    }
  }
  return out;
}

Vector gaussian_blur(const Vector& input, const InputShape& shape, double sigma) {
  if (sigma <= 0.0) return input;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  const int H = shape.height;
  const int W = shape.width;
  Vector tmp(input.size());
  Vector out(input.size());
  for (int c = 0; c < shape.channels; ++c) {
    const Eigen::Index base = static_cast<Eigen::Index>(c) * H * W;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          acc += kernel[static_cast<size_t>(t + radius)] * input(base + i * W + reflect(j + t, W));
        }
        tmp(base + i * W + j) = acc;
      }
    }
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          acc += kernel[static_cast<size_t>(t + radius)] * tmp(base + reflect(i + t, H) * W + j);
        }
        out(base + i * W + j) = acc;
      }
    }
  }
  return out;
}

TransformParams sample_transform(const InputShape& shape, const TransformSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TransformParams p;
  const double scale = spec.crop_scale_min + (spec.crop_scale_max - spec.crop_scale_min) * unit(rng);
  const double side = std::sqrt(scale);
  p.crop_w = side * shape.width;
  p.crop_h = side * shape.height;
  p.crop_x = (shape.width - p.crop_w) * unit(rng);
  p.crop_y = (shape.height - p.crop_h) * unit(rng);
  if (spec.jitter_strength > 0.0) {
    const double s = spec.jitter_strength;
    for (int c = 0; c < shape.channels; ++c) {
      p.gains.push_back(1.0 + 0.4 * s * (2.0 * unit(rng) - 1.0));
      p.offsets.push_back(0.2 * s * (2.0 * unit(rng) - 1.0));
    }
  }
  p.blur_sigma = spec.blur_sigma_min + (spec.blur_sigma_max - spec.blur_sigma_min) * unit(rng);
  return p;
}

Vector apply_transform(const Vector& input, const InputShape& shape, const TransformParams& params) {
  if (input.size() != shape.size()) throw ShapeError("input does not match the configured grid shape");
  Vector out = resample_window(input, shape, params.crop_x, params.crop_y, params.crop_w, params.crop_h);
  if (!params.gains.empty()) {
    const Eigen::Index plane = static_cast<Eigen::Index>(shape.height) * shape.width;
    for (int c = 0; c < shape.channels; ++c) {
      auto seg = out.segment(c * plane, plane);
      const double mean = seg.mean();
      const size_t ci = static_cast<size_t>(c);
      seg = ((seg.array() - mean) * params.gains[ci] + mean + params.offsets[ci]).cwiseMax(0.0).cwiseMin(1.0);
    }
  }
  return gaussian_blur(out, shape, params.blur_sigma);
}

std::pair<Vector, Vector> sample_views(const Vector& input, const InputShape& shape, const TransformSpec& spec,
                                       Rng& rng) {
  if (!input.allFinite()) throw InputError("cannot augment non-finite input");
  const TransformParams s = sample_transform(shape, spec, rng);
  const TransformParams t = sample_transform(shape, spec, rng);
  return {apply_transform(input, shape, s), apply_transform(input, shape, t)};
}

}  // namespace protoalign
