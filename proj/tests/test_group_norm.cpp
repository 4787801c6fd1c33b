#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "protoalign/group_norm.hpp"
#include "support.hpp"

using namespace protoalign;
using protoalign::testing::random_matrix;

TEST_CASE("groups come out with zero mean and unit variance") {
  const Matrix x = random_matrix(12, 5, 1, 3.0).array() + 2.0;
  const Matrix y = group_normalize(x, 3, 1e-12);
  for (Eigen::Index b = 0; b < y.cols(); ++b) {
    for (int g = 0; g < 3; ++g) {
      const Vector seg = y.col(b).segment(4 * g, 4);
      CHECK(seg.mean() == doctest::Approx(0.0).epsilon(1e-12));
      CHECK((seg.array() - seg.mean()).square().mean() == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("columns are normalized independently") {
  const Matrix x = random_matrix(8, 4, 2);
  const Matrix full = group_normalize(x, 2);
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    const Matrix single = group_normalize(Matrix(x.col(b)), 2);
    CHECK((single - full.col(b)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("constant groups map to zero") {
  const Matrix x = Matrix::Constant(6, 2, 4.2);
  const Matrix y = group_normalize(x, 3);
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("indivisible channel counts are rejected") {
  CHECK_THROWS_AS(group_normalize(random_matrix(7, 2, 1), 2), ConfigError);
  CHECK_THROWS_AS(group_normalize(random_matrix(8, 2, 1), 0), ConfigError);
}

TEST_CASE("backward matches finite differences") {
  const Matrix x = random_matrix(8, 3, 5);
  const Matrix w = random_matrix(8, 3, 6);
  auto loss = [&](const Matrix& in) { return group_normalize(in, 2).cwiseProduct(w).sum(); };
  GroupNormCache<double> cache;
  group_normalize(x, 2, 1e-5, &cache);
  const Matrix dx = group_normalize_backward(w, cache);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix up = x;
    Matrix down = x;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double numeric = (loss(up) - loss(down)) / (2 * h);
    CHECK(protoalign::testing::relative_error(dx.data()[i], numeric) < 1e-6);
  }
}

TEST_CASE("gradient is orthogonal to shifts and scalings of a group") {
  // The output is invariant to x -> a x + c per group, so the input gradient
  // sums to zero and is orthogonal to x_hat within each group.
  const Matrix x = random_matrix(6, 2, 9);
  GroupNormCache<double> cache;
  group_normalize(x, 2, 0.0, &cache);
  const Matrix dx = group_normalize_backward(random_matrix(6, 2, 10), cache);
  for (Eigen::Index b = 0; b < 2; ++b) {
    for (int g = 0; g < 2; ++g) {
      CHECK(dx.col(b).segment(3 * g, 3).sum() == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(dx.col(b).segment(3 * g, 3).dot(cache.normalized.col(b).segment(3 * g, 3)) ==
            doctest::Approx(0.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("float instantiation") {
  const Eigen::MatrixXf x = random_matrix(4, 2, 3).cast<float>();
  const Eigen::MatrixXf y = group_normalize(x, 2);
  CHECK(y.allFinite());
}
