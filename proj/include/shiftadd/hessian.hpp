#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "shiftadd/error.hpp"
#include "shiftadd/matrix.hpp"

namespace shiftadd {

inline constexpr double kDefaultDamping = 0.01;

/// H = sum_batches X X^T + lambda I over calibration inputs X of shape [n, s].
///
/// `inverse_upper` is the upper Cholesky factor U of H^-1 (H^-1 = U^T U). Its diagonal
/// d_j drives both the per-column error normalization and the importance score; row j
/// past the diagonal is the compensation row for column j.
struct CalibrationHessian {
  std::size_t dim = 0;
  std::size_t samples = 0;
  Eigen::MatrixXd raw;  // undamped sum of x x^T
  double damping_fraction = kDefaultDamping;
  double lambda = 0.0;
  int escalations = 0;
  Eigen::MatrixXd damped;
  Eigen::MatrixXd lower;          // H = L L^T
  Eigen::MatrixXd inverse_upper;  // H^-1 = U^T U
  std::vector<double> d;          // diag(U)
};

/// Damps and factorizes a raw second-moment matrix. lambda = fraction * mean(diag(raw));
/// on factorization failure lambda grows 10x, at most 5 times. When the diagonal is all
/// zero the fraction itself is used as an absolute ridge.
inline CalibrationHessian factorize_hessian(Eigen::MatrixXd raw, std::size_t samples, double damping_fraction) {
  require(raw.rows() == raw.cols() && raw.rows() > 0, "factorize_hessian: matrix must be square and non-empty");
  require(damping_fraction >= 0.0 && std::isfinite(damping_fraction), "damping fraction must be finite and >= 0");
  CalibrationHessian h;
  h.dim = static_cast<std::size_t>(raw.rows());
  h.samples = samples;
  h.damping_fraction = damping_fraction;
  h.raw = std::move(raw);
  const double mean_diag = h.raw.diagonal().mean();
  double lambda = damping_fraction * (mean_diag > 0.0 ? mean_diag : 1.0);
  const auto identity = Eigen::MatrixXd::Identity(h.raw.rows(), h.raw.cols());

  for (int attempt = 0; attempt <= 5; ++attempt) {
    Eigen::MatrixXd damped = h.raw + lambda * identity;
    Eigen::LLT<Eigen::MatrixXd> llt(damped);
    bool ok = llt.info() == Eigen::Success;
    Eigen::MatrixXd inverse;
    Eigen::LLT<Eigen::MatrixXd> inv_llt;
    if (ok) {
      inverse = llt.solve(identity);
      inverse = 0.5 * (inverse + inverse.transpose());
      inv_llt.compute(inverse);
      ok = inv_llt.info() == Eigen::Success && inverse.allFinite();
    }
    if (ok) {
      Eigen::MatrixXd upper = inv_llt.matrixU();
      for (Eigen::Index j = 0; j < upper.rows(); ++j) ok = ok && upper(j, j) > 0.0 && std::isfinite(upper(j, j));
      if (ok) {
        h.lambda = lambda;
        h.escalations = attempt;
        h.damped = std::move(damped);
        h.lower = llt.matrixL();
        h.inverse_upper = std::move(upper);
        h.d.resize(h.dim);
        for (std::size_t j = 0; j < h.dim; ++j) h.d[j] = h.inverse_upper(j, j);
        return h;
      }
    }
    lambda = lambda > 0.0 ? lambda * 10.0 : damping_fraction > 0.0 ? damping_fraction : 1e-8;
  }
  fail(ErrorKind::Degeneracy, "Hessian factorization failed after 5 damping escalations");
}

inline CalibrationHessian accumulate_hessian(std::span<const Matrix> batches, double damping_fraction = kDefaultDamping) {
  require(!batches.empty(), "accumulate_hessian: no calibration batches");
  const std::size_t n = batches.front().rows();
  require(n > 0, "accumulate_hessian: zero input width");
  Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::size_t samples = 0;
  for (const auto& x : batches) {
    require(x.rows() == n, "accumulate_hessian: batch width " + std::to_string(x.rows()) + " != " + std::to_string(n));
    const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> xf(
        x.data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols()));
    const Eigen::MatrixXd xd = xf.cast<double>();
    raw.noalias() += xd * xd.transpose();
    samples += x.cols();
  }
  require(samples >= 1, "accumulate_hessian: at least one calibration sample is required");
  return factorize_hessian(std::move(raw), samples, damping_fraction);
}

inline CalibrationHessian accumulate_hessian(const Matrix& x, double damping_fraction = kDefaultDamping) {
  return accumulate_hessian(std::span<const Matrix>(&x, 1), damping_fraction);
}

}  // namespace shiftadd
