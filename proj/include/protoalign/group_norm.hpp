#pragma once

// Group normalization over the feature axis of a (channels x batch) matrix.
// Statistics are computed per column, so the output for a sample never
// depends on the other samples in the batch.

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "protoalign/errors.hpp"

namespace protoalign {

template <typename Scalar>
struct GroupNormCache {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> normalized;  // x_hat
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> inv_std;     // groups x batch
  int num_groups = 1;
};

inline void check_group_divisibility(Eigen::Index channels, int num_groups) {
  if (num_groups < 1 || channels % num_groups != 0) {
    throw ConfigError("channel count " + std::to_string(channels) + " is not divisible by " +
                      std::to_string(num_groups) + " groups");
  }
}

/// Normalizes each group of channels of each column to zero mean and unit
/// variance (before any affine transform). `epsilon` guards constant groups,
/// which map to exactly zero.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> group_normalize(
    const Eigen::MatrixBase<Derived>& x, int num_groups, double epsilon = 1e-5,
    GroupNormCache<typename Derived::Scalar>* cache = nullptr) {
  using Scalar = typename Derived::Scalar;
  check_group_divisibility(x.rows(), num_groups);
  const Eigen::Index group = x.rows() / num_groups;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(x.rows(), x.cols());
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> inv_std(num_groups, x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    for (int g = 0; g < num_groups; ++g) {
      const auto seg = x.col(b).segment(g * group, group);
      const Scalar mean = seg.mean();
      const Scalar var = (seg.array() - mean).square().mean();
      const Scalar is = Scalar(1) / std::sqrt(var + static_cast<Scalar>(epsilon));
      out.col(b).segment(g * group, group) = (seg.array() - mean) * is;
      inv_std(g, b) = is;
    }
  }
  if (cache != nullptr) {
    cache->normalized = out;
    cache->inv_std = std::move(inv_std);
    cache->num_groups = num_groups;
  }
  return out;
}

/// Gradient of group_normalize with respect to its input, given the gradient
/// with respect to the normalized output.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> group_normalize_backward(
    const Eigen::MatrixBase<Derived>& grad_normalized, const GroupNormCache<Scalar>& cache) {
  const int num_groups = cache.num_groups;
  const Eigen::Index group = grad_normalized.rows() / num_groups;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> dx(grad_normalized.rows(), grad_normalized.cols());
  for (Eigen::Index b = 0; b < grad_normalized.cols(); ++b) {
    for (int g = 0; g < num_groups; ++g) {
      const auto dy = grad_normalized.col(b).segment(g * group, group);
      const auto xh = cache.normalized.col(b).segment(g * group, group);
      const Scalar mean_dy = dy.mean();
      const Scalar mean_dy_xh = dy.dot(xh) / Scalar(group);
      dx.col(b).segment(g * group, group) =
          cache.inv_std(g, b) * (dy.array() - mean_dy - xh.array() * mean_dy_xh);
    }
  }
  return dx;
}

}  // namespace protoalign
