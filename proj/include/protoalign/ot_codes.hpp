#pragma once

// Code assignment between projections and prototypes.
//
// Training codes solve the entropic transport problem over the equipartition
// polytope {Q >= 0 : Q 1 = 1/K, Q^T 1 = 1/B} with Sinkhorn-Knopp scaling.
// Test codes solve the same objective over the relaxed polytope
// {Q >= 0 : Q^T 1 = 1}, whose maximizer is a column-wise softmax.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "protoalign/errors.hpp"

namespace protoalign {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class CodeMode { Train, Test };

template <typename Scalar>
struct CodeMatrix {
  Mat<Scalar> values;  // K x B
  CodeMode mode = CodeMode::Train;

  Eigen::Index prototypes() const { return values.rows(); }
  Eigen::Index batch() const { return values.cols(); }
};

struct SinkhornSettings {
  double epsilon = 0.05;
  int iterations = 3;
  // Log-domain updates. Plain-domain updates overflow for small epsilon.
  bool stabilized = true;
  // When > 0, iteration stops early once the largest row-marginal residual
  // falls below this value (columns are exact after every iteration).
  double tolerance = 0.0;

  static SinkhornSettings with_defaults(double epsilon, int iterations) {
    SinkhornSettings s;
    s.epsilon = epsilon;
    s.iterations = iterations;
    s.stabilized = epsilon < 0.1;
    return s;
  }

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
      throw ParameterError("sinkhorn epsilon must be positive, got " + std::to_string(epsilon));
    }
    if (iterations < 1) {
      throw ParameterError("sinkhorn iterations must be >= 1, got " + std::to_string(iterations));
    }
  }
};

namespace detail {

template <typename Derived>
void require_finite_scores(const Eigen::MatrixBase<Derived>& scores) {
  if (scores.rows() < 1 || scores.cols() < 1) {
    throw ShapeError("score matrix must be at least 1x1");
  }
  if (!scores.allFinite()) {
    throw InputError("score matrix contains non-finite entries");
  }
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  using std::exp;
  using std::log;
  const auto m = x.maxCoeff();
  return m + log((x.array() - m).exp().sum());
}

}  // namespace detail

/// Dot products between every prototype (column of `prototypes`, D x K) and
/// every projection (column of `projections`, D x B); result is K x B.
template <typename DerivedC, typename DerivedZ>
Mat<typename DerivedC::Scalar> score_matrix(const Eigen::MatrixBase<DerivedC>& prototypes,
                                            const Eigen::MatrixBase<DerivedZ>& projections) {
  if (prototypes.rows() != projections.rows()) {
    throw ShapeError("prototype dimension " + std::to_string(prototypes.rows()) +
                     " does not match projection dimension " + std::to_string(projections.rows()));
  }
  if (prototypes.cols() < 1 || projections.cols() < 1) {
    throw ShapeError("score matrix needs K >= 1 prototypes and B >= 1 projections");
  }
  return prototypes.transpose() * projections;
}

/// Largest absolute deviation of row sums from 1/K and column sums from 1/B.
template <typename Derived>
typename Derived::Scalar marginal_residual(const Eigen::MatrixBase<Derived>& q) {
  using Scalar = typename Derived::Scalar;
  const Scalar row_target = Scalar(1) / Scalar(q.rows());
  const Scalar col_target = Scalar(1) / Scalar(q.cols());
  const Scalar row_err = (q.rowwise().sum().array() - row_target).abs().maxCoeff();
  const Scalar col_err = (q.colwise().sum().array() - col_target).abs().maxCoeff();
  return std::max(row_err, col_err);
}

/// Sinkhorn-Knopp codes Q = Diag(u) exp(S / eps) Diag(v) over the
/// equipartition polytope. Each iteration rescales rows then columns, so
/// column marginals are exact on return.
template <typename Derived>
CodeMatrix<typename Derived::Scalar> sinkhorn_codes(const Eigen::MatrixBase<Derived>& scores,
                                                    const SinkhornSettings& settings) {
  using Scalar = typename Derived::Scalar;
  using std::exp;
  using std::log;
  settings.validate();
  detail::require_finite_scores(scores);
  const Eigen::Index k = scores.rows();
  const Eigen::Index b = scores.cols();
  if (b == 1) {
    // Equipartition with one column pins q to uniform regardless of the
    // scores; single-sample batches belong to test_codes.
    throw ContractError("sinkhorn_codes requires B >= 2; use test_codes for single samples");
  }
  const Scalar eps = static_cast<Scalar>(settings.epsilon);
  const Scalar log_row = -log(Scalar(k));
  const Scalar log_col = -log(Scalar(b));

  CodeMatrix<Scalar> out;
  out.mode = CodeMode::Train;

  if (settings.stabilized) {
    Mat<Scalar> log_q = scores / eps;
    for (int it = 0; it < settings.iterations; ++it) {
      for (Eigen::Index r = 0; r < k; ++r) {
        log_q.row(r).array() += log_row - detail::log_sum_exp(log_q.row(r));
      }
      for (Eigen::Index c = 0; c < b; ++c) {
        log_q.col(c).array() += log_col - detail::log_sum_exp(log_q.col(c));
      }
      if (settings.tolerance > 0.0) {
        const Scalar res = (log_q.array().exp().rowwise().sum() - exp(log_row)).abs().maxCoeff();
        if (res < settings.tolerance) break;
      }
    }
    out.values = log_q.array().exp().matrix();
  } else {
    Mat<Scalar> q = (scores / eps).array().exp().matrix();
    if (!q.allFinite()) {
      throw NumericalError("exp(scores / epsilon) overflowed at epsilon=" + std::to_string(settings.epsilon) +
                           "; enable stabilized mode");
    }
    const Scalar total = q.sum();
    if (!(total > Scalar(0)) || !std::isfinite(static_cast<double>(total))) {
      throw NumericalError("exp(scores / epsilon) has degenerate total mass; enable stabilized mode");
    }
    q /= total;
    const Scalar row_target = Scalar(1) / Scalar(k);
    const Scalar col_target = Scalar(1) / Scalar(b);
    for (int it = 0; it < settings.iterations; ++it) {
      for (Eigen::Index r = 0; r < k; ++r) {
        const Scalar s = q.row(r).sum();
        if (!(s > Scalar(0))) throw NumericalError("sinkhorn row mass underflowed; enable stabilized mode");
        q.row(r) *= row_target / s;
      }
      for (Eigen::Index c = 0; c < b; ++c) {
        const Scalar s = q.col(c).sum();
        if (!(s > Scalar(0))) throw NumericalError("sinkhorn column mass underflowed; enable stabilized mode");
        q.col(c) *= col_target / s;
      }
      if (settings.tolerance > 0.0) {
        const Scalar res = (q.rowwise().sum().array() - row_target).abs().maxCoeff();
        if (res < settings.tolerance) break;
      }
    }
    out.values = std::move(q);
  }
  return out;
}

/// Closed-form codes over the relaxed test polytope: column b is
/// softmax_k(scores(k, b) / epsilon). No iteration.
template <typename Derived>
CodeMatrix<typename Derived::Scalar> test_codes(const Eigen::MatrixBase<Derived>& scores, double epsilon) {
  using Scalar = typename Derived::Scalar;
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("test code epsilon must be positive, got " + std::to_string(epsilon));
  }
  detail::require_finite_scores(scores);
  const Scalar eps = static_cast<Scalar>(epsilon);
  Mat<Scalar> logits = scores / eps;
  const auto col_max = logits.colwise().maxCoeff();
  logits.rowwise() -= col_max;
  Mat<Scalar> q = logits.array().exp().matrix();
  const auto col_sum = q.colwise().sum();
  q.array().rowwise() /= col_sum.array();
  return CodeMatrix<Scalar>{std::move(q), CodeMode::Test};
}

/// Per-column entropic objective  q . s + eps * H(q)  with 0 log 0 = 0.
template <typename DerivedQ, typename DerivedS>
double column_objective(const Eigen::MatrixBase<DerivedQ>& q, const Eigen::MatrixBase<DerivedS>& s, double epsilon) {
  double value = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) {
    const double qk = static_cast<double>(q(k));
    value += qk * static_cast<double>(s(k));
    if (qk > 0.0) value -= epsilon * qk * std::log(qk);
  }
  return value;
}

struct ClosedFormCheck {
  // max over columns of (oracle optimum - closed-form objective).
  double gap = 0.0;
  // Set when the oracle search did not resolve the optimum to its target
  // precision; the gap is then only a lower bound on the true discrepancy.
  bool bracket_warning = false;
  std::string diagnostic;
};

namespace detail {

inline double golden_section_two_simplex(double s0, double s1, double epsilon, int* evaluations) {
  auto f = [&](double a) {
    Eigen::Vector2d q(a, 1.0 - a);
    Eigen::Vector2d s(s0, s1);
    return column_objective(q, s, epsilon);
  };
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = 0.0;
  double hi = 1.0;
  double x1 = hi - phi * (hi - lo);
  double x2 = lo + phi * (hi - lo);
  double f1 = f(x1);
  double f2 = f(x2);
  int n = 0;
  while (hi - lo > 1e-13 && n < 400) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + phi * (hi - lo);
      f2 = f(x2);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - phi * (hi - lo);
      f1 = f(x1);
    }
    ++n;
  }
  *evaluations = n;
  return std::max({f(0.5 * (lo + hi)), f(0.0), f(1.0)});
}

// Enumerates every point of the simplex grid {n / r : sum n = r} and then
// zooms a shrinking lattice around the incumbent. Returns the best objective
// and whether the zoom converged below `precision`.
inline double simplex_grid_search(const Eigen::VectorXd& s, double epsilon, int resolution, bool* converged) {
  const int k = static_cast<int>(s.size());
  Eigen::VectorXd best(k);
  double best_value = -std::numeric_limits<double>::infinity();
  std::vector<int> counts(static_cast<size_t>(k), 0);
  Eigen::VectorXd q(k);

  // Odometer over compositions of `resolution` into k parts.
  std::vector<int> free_counts(static_cast<size_t>(k - 1), 0);
  while (true) {
    int used = 0;
    for (int i = 0; i < k - 1; ++i) used += free_counts[static_cast<size_t>(i)];
    if (used <= resolution) {
      for (int i = 0; i < k - 1; ++i) q(i) = static_cast<double>(free_counts[static_cast<size_t>(i)]) / resolution;
      q(k - 1) = static_cast<double>(resolution - used) / resolution;
      const double v = column_objective(q, s, epsilon);
      if (v > best_value) {
        best_value = v;
        best = q;
      }
    }
    int i = 0;
    while (i < k - 1) {
      if (++free_counts[static_cast<size_t>(i)] <= resolution) break;
      free_counts[static_cast<size_t>(i)] = 0;
      ++i;
    }
    if (i == k - 1) break;
  }

  constexpr int kHalfWidth = 2;
  double step = 1.0 / resolution;
  const double precision = 1e-12;
  int levels = 0;
  std::vector<int> offset(static_cast<size_t>(k - 1), -kHalfWidth);
  while (step > precision && levels < 2000) {
    ++levels;
    Eigen::VectorXd center = best;
    bool moved = false;
    std::fill(offset.begin(), offset.end(), -kHalfWidth);
    while (true) {
      double free_sum = 0.0;
      bool feasible = true;
      for (int j = 0; j < k - 1; ++j) {
        q(j) = center(j) + step * offset[static_cast<size_t>(j)];
        if (q(j) < 0.0) feasible = false;
        free_sum += q(j);
      }
      q(k - 1) = 1.0 - free_sum;
      if (q(k - 1) < 0.0) feasible = false;
      if (feasible) {
        const double v = column_objective(q, s, epsilon);
        if (v > best_value) {
          best_value = v;
          best = q;
          moved = true;
        }
      }
      int j = 0;
      while (j < k - 1) {
        if (++offset[static_cast<size_t>(j)] <= kHalfWidth) break;
        offset[static_cast<size_t>(j)] = -kHalfWidth;
        ++j;
      }
      if (j == k - 1) break;
    }
    if (!moved) step *= 0.5;
  }
  *converged = step <= precision;
  return best_value;
}

}  // namespace detail

/// Independent optimality oracle for test_codes. For each column the entropic
/// objective is maximized over the probability simplex by direct search
/// (golden section for K = 2, simplex-grid enumeration followed by lattice
/// zooming for K > 2) without using the softmax solution, and compared with
/// the objective attained by test_codes.
template <typename Derived>
ClosedFormCheck verify_closed_form(const Eigen::MatrixBase<Derived>& scores, double epsilon, int grid_resolution) {
  if (scores.rows() > 6 || scores.cols() > 4) {
    throw ParameterError("verify_closed_form is limited to K <= 6 and B <= 4");
  }
  if (grid_resolution < 1) {
    throw ParameterError("grid_resolution must be positive");
  }
  const Eigen::MatrixXd s = scores.template cast<double>();
  const auto closed = test_codes(s, epsilon);

  ClosedFormCheck check;
  check.gap = -std::numeric_limits<double>::infinity();
  for (Eigen::Index b = 0; b < s.cols(); ++b) {
    const Eigen::VectorXd col = s.col(b);
    const double closed_value = column_objective(closed.values.col(b), col, epsilon);
    double oracle = 0.0;
    if (s.rows() == 1) {
      oracle = col(0);
    } else if (s.rows() == 2) {
      int evals = 0;
      oracle = detail::golden_section_two_simplex(col(0), col(1), epsilon, &evals);
    } else {
      bool converged = false;
      oracle = detail::simplex_grid_search(col, epsilon, grid_resolution, &converged);
      if (!converged) {
        check.bracket_warning = true;
        check.diagnostic = "lattice zoom did not converge for column " + std::to_string(b) +
                           "; increase grid_resolution";
      }
    }
    check.gap = std::max(check.gap, oracle - closed_value);
  }
  return check;
}

}  // namespace protoalign
