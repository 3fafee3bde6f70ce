#pragma once

// Symmetric-matrix primitives shared by the posterior and planner code.
// Everything routes through one eigendecomposition backend because the
// information matrices that show up here are routinely rank-deficient, which
// rules out plain Cholesky factorizations.

#include <Eigen/Dense>
#include <cmath>
#include <utility>

#include "adexp/errors.hpp"

namespace adexp {

inline constexpr double kPsdTol = 1e-10;    // relative eigenvalue clamp
inline constexpr double kRankTol = 1e-10;   // relative rank cutoff for pinv

class SymMatrix {
 public:
  SymMatrix() = default;

  explicit SymMatrix(Eigen::MatrixXd m) {
    if (m.rows() != m.cols()) throw DimensionMismatch("SymMatrix: not square");
    double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-8 * scale) throw NotSymmetric("SymMatrix: asymmetry " + std::to_string(asym));
    m_ = 0.5 * (m + m.transpose());
  }

  static SymMatrix Zero(int d) { return SymMatrix(Eigen::MatrixXd::Zero(d, d)); }
  static SymMatrix Identity(int d) { return SymMatrix(Eigen::MatrixXd::Identity(d, d)); }

  int dim() const { return int(m_.rows()); }
  const Eigen::MatrixXd& mat() const { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }

 private:
  Eigen::MatrixXd m_;
};

namespace lin {

struct EigSym {
  Eigen::VectorXd lambda;  // ascending
  Eigen::MatrixXd vectors;
};

inline EigSym eig_sym(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericalFailure("eig_sym: solver failed");
  return {es.eigenvalues(), es.eigenvectors()};
}

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) {
  return 0.5 * (m + m.transpose());
}

// PSD square root with eigenvalue clamping. Rejects matrices whose negative
// spectrum exceeds the relative tolerance.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, EigSym* factor = nullptr) {
  EigSym es = eig_sym(symmetrized(m));
  double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  double tol = kPsdTol * scale;
  if (es.lambda.minCoeff() < -tol)
    throw IndefiniteMatrix("psd_sqrt: eigenvalue " + std::to_string(es.lambda.minCoeff()));
  Eigen::VectorXd root = es.lambda.cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd s = es.vectors * root.asDiagonal() * es.vectors.transpose();
  if (factor) {
    factor->lambda = es.lambda.cwiseMax(0.0);
    factor->vectors = es.vectors;
  }
  return symmetrized(s);
}

// Moore-Penrose pseudoinverse through the same eigendecomposition.
inline Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& m, double rank_tol = kRankTol) {
  EigSym es = eig_sym(symmetrized(m));
  double lmax = es.lambda.cwiseAbs().maxCoeff();
  double cutoff = rank_tol * std::max(lmax, 1e-300);
  Eigen::VectorXd inv(es.lambda.size());
  for (int i = 0; i < es.lambda.size(); ++i)
    inv[i] = std::abs(es.lambda[i]) > cutoff ? 1.0 / es.lambda[i] : 0.0;
  return symmetrized(es.vectors * inv.asDiagonal() * es.vectors.transpose());
}

// Inverse of a strictly positive definite matrix. jitter_scale > 0 adds a
// trace-relative diagonal regularization before factorizing.
inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m, double jitter_scale = 0.0) {
  int d = int(m.rows());
  Eigen::MatrixXd a = symmetrized(m);
  if (jitter_scale > 0.0) {
    double jitter = jitter_scale * m.trace() / double(d);
    a += jitter * Eigen::MatrixXd::Identity(d, d);
  }
  EigSym es = eig_sym(a);
  if (es.lambda.minCoeff() <= 0.0)
    throw SingularMatrix("spd_inverse: eigenvalue " + std::to_string(es.lambda.minCoeff()));
  return symmetrized(es.vectors * es.lambda.cwiseInverse().asDiagonal() * es.vectors.transpose());
}

// Adjoint of S = sqrt(D) through the eigendecomposition of D, given the
// factorization produced by psd_sqrt. Entries with a vanishing denominator
// (clamped null directions) carry no signal.
inline Eigen::MatrixXd sqrt_backward(const EigSym& f, const Eigen::MatrixXd& s_bar) {
  Eigen::VectorXd root = f.lambda.cwiseSqrt();
  Eigen::MatrixXd inner = f.vectors.transpose() * symmetrized(s_bar) * f.vectors;
  for (int i = 0; i < root.size(); ++i)
    for (int j = 0; j < root.size(); ++j) {
      double denom = root[i] + root[j];
      inner(i, j) = denom > 0.0 ? inner(i, j) / denom : 0.0;
    }
  return symmetrized(f.vectors * inner * f.vectors.transpose());
}

}  // namespace lin

inline SymMatrix psd_sqrt(const SymMatrix& m) { return SymMatrix(lin::psd_sqrt(m.mat())); }

inline SymMatrix pseudo_inverse(const SymMatrix& m, double rank_tol = kRankTol) {
  return SymMatrix(lin::pseudo_inverse(m.mat(), rank_tol));
}

inline Eigen::VectorXd spd_solve(const SymMatrix& m, const Eigen::VectorXd& b) {
  if (m.dim() != b.size()) throw DimensionMismatch("spd_solve: size mismatch");
  return lin::spd_inverse(m.mat(), 1e-12) * b;
}

}  // namespace adexp
