#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace dfiv {

// Dense row-major f64 matrix. Row i of a feature matrix is the feature
// vector of sample i.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

inline bool all_finite(const Mat& m) { return m.allFinite(); }
inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw std::runtime_error(std::string(what) + ": non-finite entries");
}

namespace detail {

// Jitter ladder applied to the diagonal when a Cholesky factorization
// reports a non-positive pivot. Scaled by trace(A)/d so the ladder is
// invariant to the overall scale of A.
inline constexpr double kJitterLadder[] = {1e-12, 1e-10, 1e-8};

}  // namespace detail

/// Solves A X = B for symmetric positive definite A via Cholesky.
/// Retries with diagonal jitter (1e-12, 1e-10, 1e-8 times trace(A)/d)
/// before giving up.
inline Mat spd_solve(const Mat& A, const Mat& B) {
  if (A.rows() != A.cols()) throw std::invalid_argument("spd_solve: A must be square");
  if (A.rows() != B.rows()) throw std::invalid_argument("spd_solve: A and B row mismatch");
  if (A.rows() < 1) throw std::invalid_argument("spd_solve: empty system");
  require_finite(A, "spd_solve A");
  require_finite(B, "spd_solve B");

  const Index d = A.rows();
  const double scale = A.cwiseAbs().maxCoeff();
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, scale))
    throw std::invalid_argument("spd_solve: A is not symmetric");

  // Symmetrize to kill rounding asymmetry before factorization.
  Mat As = 0.5 * (A + A.transpose());
  const double jitter_unit = As.trace() / static_cast<double>(d);

  Eigen::LLT<Mat> llt(As);
  if (llt.info() == Eigen::Success) {
    Mat X = llt.solve(B);
    if (X.allFinite()) return X;
  }
  // A matrix with non-positive trace cannot be positive definite, so the
  // jitter ladder (scaled by the trace) does not apply.
  if (jitter_unit <= 0.0)
    throw std::runtime_error("spd_solve: matrix not positive definite (non-positive trace)");
  for (double j : detail::kJitterLadder) {
    Mat Aj = As + j * jitter_unit * Mat::Identity(d, d);
    llt.compute(Aj);
    if (llt.info() == Eigen::Success) {
      Mat X = llt.solve(B);
      if (X.allFinite()) return X;
    }
  }
  throw std::runtime_error("spd_solve: matrix not positive definite after jitter retries");
}

inline Vec spd_solve(const Mat& A, const Vec& b) {
  Mat B = b;
  return spd_solve(A, B).col(0);
}

/// Max-norm residual ||A X - B||_inf, for callers that want to check a solve.
inline double solve_residual(const Mat& A, const Mat& X, const Mat& B) {
  return (A * X - B).cwiseAbs().maxCoeff();
}

inline double mean_squared_error(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mean_squared_error: size mismatch");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

inline double sample_corr(const Vec& a, const Vec& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("sample_corr: need two equal-length vectors");
  Vec da = a.array() - a.mean();
  Vec db = b.array() - b.mean();
  const double denom = da.norm() * db.norm();
  if (denom == 0.0) throw std::runtime_error("sample_corr: zero variance");
  return da.dot(db) / denom;
}

/// Multi-target ridge regression: solves
///   (D^T D + sample_count * reg * I) W = D^T T
/// for W (d x k). The penalty scaling matches a loss averaged over
/// sample_count rows with an unscaled reg * ||W||^2 term, so callers
/// must pass the row count the loss is averaged over.
inline Mat ridge_solve(const Mat& design, const Mat& targets, double reg, Index sample_count) {
  if (design.rows() != targets.rows())
    throw std::invalid_argument("ridge_solve: design/targets row mismatch");
  if (reg < 0) throw std::invalid_argument("ridge_solve: negative regularizer");
  if (sample_count < 1) throw std::invalid_argument("ridge_solve: sample_count must be >= 1");
  require_finite(design, "ridge_solve design");
  require_finite(targets, "ridge_solve targets");

  const Index d = design.cols();
  Mat A = design.transpose() * design;
  A += static_cast<double>(sample_count) * reg * Mat::Identity(d, d);
  Mat B = design.transpose() * targets;
  return spd_solve(A, B);
}

inline Vec ridge_solve(const Mat& design, const Vec& targets, double reg, Index sample_count) {
  Mat T = targets;
  return ridge_solve(design, T, reg, sample_count).col(0);
}

}  // namespace dfiv
