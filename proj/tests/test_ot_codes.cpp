#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "protoalign/ot_codes.hpp"
#include "support.hpp"

using namespace protoalign;
using protoalign::testing::random_matrix;

TEST_CASE("score matrix is C^T Z") {
  const Matrix c = random_matrix(4, 3, 1);
  const Matrix z = random_matrix(4, 5, 2);
  const Matrix s = score_matrix(c, z);
  CHECK(s.rows() == 3);
  CHECK(s.cols() == 5);
  CHECK((s - c.transpose() * z).norm() == doctest::Approx(0.0));
  CHECK_THROWS_AS(score_matrix(c, random_matrix(5, 2, 3)), ShapeError);
}

TEST_CASE("converged sinkhorn meets both marginals") {
  for (double eps : {0.05, 0.5, 1.0}) {
    for (int trial = 0; trial < 10; ++trial) {
      const int k = 2 + trial % 6;
      const int b = 2 + (3 * trial) % 14;
      const Matrix s = random_matrix(k, b, 100 + trial);
      auto settings = SinkhornSettings::with_defaults(eps, 10000);
      settings.tolerance = 1e-13;
      const auto q = sinkhorn_codes(s, settings);
      CHECK(q.mode == CodeMode::Train);
      CHECK(marginal_residual(q.values) < 1e-8);
      CHECK(q.values.minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("stabilized and plain iterations agree where both are safe") {
  const Matrix s = random_matrix(5, 7, 9, 0.5);
  SinkhornSettings plain = SinkhornSettings::with_defaults(0.5, 20);
  plain.stabilized = false;
  SinkhornSettings logd = plain;
  logd.stabilized = true;
  const auto a = sinkhorn_codes(s, plain);
  const auto b = sinkhorn_codes(s, logd);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("plain iterations overflow loudly at tiny epsilon") {
  const Matrix s = random_matrix(4, 4, 3) * 50.0;
  SinkhornSettings plain = SinkhornSettings::with_defaults(1e-3, 3);
  plain.stabilized = false;
  CHECK_THROWS_AS(sinkhorn_codes(s, plain), NumericalError);
  plain.stabilized = true;
  const auto q = sinkhorn_codes(s, plain);
  CHECK(q.values.allFinite());
}

TEST_CASE("columns are exact after any iteration count") {
  const Matrix s = random_matrix(6, 9, 4);
  const auto q = sinkhorn_codes(s, SinkhornSettings::with_defaults(0.05, 3));
  const Eigen::RowVectorXd cols = q.values.colwise().sum();
  CHECK((cols.array() - 1.0 / 9).abs().maxCoeff() < 1e-12);
}

TEST_CASE("equal scores give the uniform plan") {
  const Matrix s = Matrix::Constant(3, 4, 0.7);
  const auto q = sinkhorn_codes(s, SinkhornSettings::with_defaults(0.05, 3));
  CHECK((q.values.array() - 1.0 / 12).abs().maxCoeff() < 1e-14);
}

TEST_CASE("sinkhorn input validation") {
  CHECK_THROWS_AS(sinkhorn_codes(random_matrix(3, 1, 1), SinkhornSettings::with_defaults(0.05, 3)), ContractError);
  Matrix bad = random_matrix(3, 3, 1);
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(sinkhorn_codes(bad, SinkhornSettings::with_defaults(0.05, 3)), InputError);
  CHECK_THROWS_AS(sinkhorn_codes(random_matrix(3, 3, 1), SinkhornSettings::with_defaults(0.0, 3)), ParameterError);
  CHECK_THROWS_AS(sinkhorn_codes(random_matrix(3, 3, 1), SinkhornSettings::with_defaults(0.1, 0)), ParameterError);
}

TEST_CASE("sinkhorn is permutation equivariant in the batch") {
  const Matrix s = random_matrix(4, 6, 21);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
  perm.indices() << 3, 0, 5, 1, 4, 2;
  const auto settings = SinkhornSettings::with_defaults(0.05, 3);
  const Matrix a = sinkhorn_codes(Matrix(s * perm), settings).values;
  const Matrix b = sinkhorn_codes(s, settings).values * perm;
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("test codes are a column softmax") {
  const Matrix s = random_matrix(5, 3, 8);
  const double eps = 0.7;
  const auto q = test_codes(s, eps);
  CHECK(q.mode == CodeMode::Test);
  for (Eigen::Index b = 0; b < s.cols(); ++b) {
    Vector e = (s.col(b).array() / eps).exp();
    e /= e.sum();
    CHECK((q.values.col(b) - e).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK_THROWS_AS(test_codes(s, -1.0), ParameterError);
}

TEST_CASE("test codes survive huge scores") {
  Matrix s(3, 1);
  s << 1e4, -1e4, 0.0;
  const auto q = test_codes(s, 0.01);
  CHECK(q.values.allFinite());
  CHECK(q.values(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("closed form beats the search oracle by a negligible gap") {
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 1 + trial % 5;
    const int b = 1 + trial % 3;
    const Matrix s = random_matrix(k, b, 300 + trial);
    const auto check = verify_closed_form(s, 0.5 + 0.25 * (trial % 3), 24);
    CHECK(check.gap <= 1e-3);
    CHECK(check.gap >= -1e-9);
  }
}

TEST_CASE("oracle detects a wrong code") {
  // Guard against an oracle that only ever agrees: a uniform column is
  // strictly suboptimal for unequal scores.
  Eigen::Vector3d s(2.0, 0.0, -1.0);
  const double eps = 0.5;
  const Eigen::Vector3d uniform = Eigen::Vector3d::Constant(1.0 / 3);
  const Vector q = test_codes(Matrix(s), eps).values.col(0);
  CHECK(column_objective(q, s, eps) > column_objective(uniform, s, eps) + 0.1);
}

TEST_CASE("oracle size limits") {
  CHECK_THROWS_AS(verify_closed_form(random_matrix(7, 2, 1), 1.0, 10), ParameterError);
  CHECK_THROWS_AS(verify_closed_form(random_matrix(3, 2, 1), 1.0, 0), ParameterError);
}
