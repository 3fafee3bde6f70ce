#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "adexp/matrix.hpp"
#include "adexp/rng.hpp"

using namespace adexp;

namespace {

Eigen::MatrixXd random_matrix(RngStream& rng, int d) {
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  return m;
}

Eigen::MatrixXd random_psd(RngStream& rng, int d) {
  Eigen::MatrixXd a = random_matrix(rng, d);
  return a.transpose() * a;
}

}  // namespace

TEST_CASE("psd_sqrt on identity and diagonal matrices") {
  SymMatrix id = SymMatrix::Identity(3);
  CHECK((psd_sqrt(id).mat() - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-14);

  Eigen::MatrixXd d = Eigen::Vector2d(4.0, 9.0).asDiagonal();
  Eigen::MatrixXd s = psd_sqrt(SymMatrix(d)).mat();
  CHECK(s(0, 0) == Catch::Approx(2.0).margin(1e-12));
  CHECK(s(1, 1) == Catch::Approx(3.0).margin(1e-12));
  CHECK(std::abs(s(0, 1)) < 1e-12);
}

TEST_CASE("psd_sqrt squares back to the input") {
  RngStream rng(42);
  Eigen::MatrixXd a = random_matrix(rng, 4);
  Eigen::MatrixXd m = a.transpose() * a;
  Eigen::MatrixXd s = psd_sqrt(SymMatrix(m)).mat();
  double err = (s * s - m).norm();
  CHECK(err <= 1e-8 * std::max(1.0, m.norm()));
}

TEST_CASE("psd_sqrt rejects asymmetric and indefinite inputs") {
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 0.5, -0.5, 1.0;
  CHECK_THROWS_AS(SymMatrix(bad), NotSymmetric);

  Eigen::MatrixXd indef = Eigen::Vector2d(1.0, -0.5).asDiagonal();
  CHECK_THROWS_AS(psd_sqrt(SymMatrix(indef)), IndefiniteMatrix);
}

TEST_CASE("psd_sqrt property: 1000 random PSD matrices") {
  RngStream rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    int d = 1 + int(rng.below(10));
    Eigen::MatrixXd m = random_psd(rng, d);
    Eigen::MatrixXd s = psd_sqrt(SymMatrix(m)).mat();
    CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    double rel = (s * s - m).norm() / std::max(1.0, m.norm());
    REQUIRE(rel <= 1e-8);
  }
}

TEST_CASE("pseudo_inverse on rank-deficient diagonal and projectors") {
  Eigen::MatrixXd d = Eigen::Vector2d(2.0, 0.0).asDiagonal();
  Eigen::MatrixXd p = pseudo_inverse(SymMatrix(d)).mat();
  CHECK(p(0, 0) == Catch::Approx(0.5).margin(1e-12));
  CHECK(p(1, 1) == Catch::Approx(0.0).margin(1e-12));

  for (int dd : {1, 3, 6})
    CHECK((pseudo_inverse(SymMatrix::Identity(dd)).mat() -
           Eigen::MatrixXd::Identity(dd, dd)).cwiseAbs().maxCoeff() < 1e-12);

  // A unit rank-one projector is its own pseudoinverse.
  RngStream rng(3);
  Eigen::VectorXd v(4);
  for (int i = 0; i < 4; ++i) v[i] = rng.normal();
  v.normalize();
  Eigen::MatrixXd proj = v * v.transpose();
  CHECK((pseudo_inverse(SymMatrix(proj)).mat() - proj).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("pseudo_inverse satisfies the Penrose identities on rank-deficient inputs") {
  RngStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    int d = 2 + int(rng.below(8));
    int r = 1 + int(rng.below(std::uint64_t(d)));
    Eigen::MatrixXd a(d, r);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < r; ++j) a(i, j) = rng.normal();
    Eigen::MatrixXd m = a * a.transpose();  // rank <= r
    Eigen::MatrixXd mp = pseudo_inverse(SymMatrix(m)).mat();
    double scale = std::max(1.0, m.norm());
    CHECK((m * mp * m - m).norm() <= 1e-8 * scale);
    CHECK((mp * m * mp - mp).norm() <= 1e-8 * std::max(1.0, mp.norm()));
    CHECK((m * mp - (m * mp).transpose()).norm() <= 1e-8 * scale);
  }
}

TEST_CASE("pseudo_inverse is an involution away from the rank cutoff") {
  RngStream rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    int d = 2 + int(rng.below(6));
    // Spectrum bounded away from the cutoff: eigenvalues in {0} or [1e-3, 10].
    Eigen::MatrixXd basis = random_matrix(rng, d);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::VectorXd lam(d);
    for (int i = 0; i < d; ++i)
      lam[i] = rng.uniform() < 0.3 ? 0.0 : 1e-3 + 10.0 * rng.uniform();
    Eigen::MatrixXd m = q * lam.asDiagonal() * q.transpose();
    Eigen::MatrixXd mpp = pseudo_inverse(pseudo_inverse(SymMatrix(m))).mat();
    CHECK((mpp - m).cwiseAbs().maxCoeff() <= 1e-7 * std::max(1.0, m.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("spd_solve identity and diagonal cases") {
  Eigen::VectorXd b(2);
  b << 3.0, 4.0;
  Eigen::VectorXd x = spd_solve(SymMatrix::Identity(2), b);
  CHECK((x - b).norm() <= 1e-8 * b.norm());

  Eigen::MatrixXd d = Eigen::Vector2d(2.0, 4.0).asDiagonal();
  Eigen::VectorXd rhs(2);
  rhs << 2.0, 4.0;
  Eigen::VectorXd y = spd_solve(SymMatrix(d), rhs);
  CHECK(y[0] == Catch::Approx(1.0).margin(1e-9));
  CHECK(y[1] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("spd_solve residual against the multiplication oracle") {
  RngStream rng(99);
  Eigen::MatrixXd a = random_matrix(rng, 5);
  Eigen::MatrixXd m = a.transpose() * a + Eigen::MatrixXd::Identity(5, 5);
  Eigen::VectorXd b(5);
  for (int i = 0; i < 5; ++i) b[i] = rng.normal();
  Eigen::VectorXd x = spd_solve(SymMatrix(m), b);
  CHECK((m * x - b).norm() <= 1e-8 * b.norm());
}

TEST_CASE("sqrt_backward matches finite differences") {
  RngStream rng(5);
  int d = 4;
  Eigen::MatrixXd m = random_psd(rng, d) + 0.5 * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd s_bar = random_matrix(rng, d);

  lin::EigSym f;
  lin::psd_sqrt(m, &f);
  Eigen::MatrixXd d_bar = lin::sqrt_backward(f, s_bar);

  // Directional check: <Sbar, dS> == <Dbar, dD> for a random symmetric dD.
  Eigen::MatrixXd dir = lin::symmetrized(random_matrix(rng, d));
  double h = 1e-6;
  Eigen::MatrixXd s_plus = lin::psd_sqrt(m + h * dir);
  Eigen::MatrixXd s_minus = lin::psd_sqrt(m - h * dir);
  double lhs = (lin::symmetrized(s_bar).cwiseProduct((s_plus - s_minus) / (2.0 * h))).sum();
  double rhs = d_bar.cwiseProduct(dir).sum();
  CHECK(lhs == Catch::Approx(rhs).epsilon(1e-5));
}
