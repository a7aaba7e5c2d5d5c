#pragma once

// Full-layer reparameterization under the weight, activation and multi-objective schemes.
//
// Notation: W is [m outputs, n inputs]; H is n x n over the input dimension; U is the
// upper Cholesky factor of H^-1 (see hessian.hpp). Columns are processed in natural
// order. After fixing a set S of columns to quantized values Q_S, the remaining columns
// R absorb the error through
//
//     E   = (W_S - Q_S) U_SS^-1
//     W_R -= E U_SR
//
// which for |S| = 1 is the familiar e_j = (w_j - q_j) / d_j update. The accumulated
// sum ||E||^2 equals ||(W - Q) X||^2 + lambda ||W - Q||^2 exactly, and is reported as
// `tracked_loss`.

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "shiftadd/bcq.hpp"
#include "shiftadd/error.hpp"
#include "shiftadd/hessian.hpp"
#include "shiftadd/matrix.hpp"

namespace shiftadd {

enum class Objective { WeightOnly, ActivationOnly, MultiObjective };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::WeightOnly: return "weight";
    case Objective::ActivationOnly: return "activation";
    case Objective::MultiObjective: return "multi";
  }
  return "unknown";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "weight" || s == "weight-only") return Objective::WeightOnly;
  if (s == "activation" || s == "activation-only") return Objective::ActivationOnly;
  if (s == "multi" || s == "multi-objective" || s == "multiobjective") return Objective::MultiObjective;
  fail(ErrorKind::Validation, "unknown objective '" + s + "'");
}

struct ReparamConfig {
  Objective objective = Objective::MultiObjective;
  Grouping grouping = Grouping::column_wise();
  int bits = 3;
  PotConfig pot{true, kDefaultPotTerms, false};
  int cycles = kDefaultCycles;
  double damping = kDefaultDamping;
};

inline void validate_config(const ReparamConfig& cfg) {
  require(cfg.bits >= 1 && cfg.bits <= kMaxBits, "bits must be in 1..8, got " + std::to_string(cfg.bits));
  require(cfg.cycles >= 0, "cycles must be >= 0");
  require(!cfg.pot.enabled || (cfg.pot.terms >= 1 && cfg.pot.terms <= 16), "PoT terms must be in 1..16");
  switch (cfg.objective) {
    case Objective::WeightOnly:
    case Objective::ActivationOnly:
      require(cfg.grouping.kind == GroupingKind::RowWise,
              std::string(to_string(cfg.objective)) + " objective uses row-wise scaling factors");
      break;
    case Objective::MultiObjective:
      require(cfg.grouping.kind == GroupingKind::ColumnWise || cfg.grouping.kind == GroupingKind::BlockWise,
              "multi-objective reparameterization needs column-wise or block-wise grouping");
      break;
  }
}

struct ReparamResult {
  BcqWeight weight;
  double weight_error = 0.0;      // ||W - W_q||_F
  double activation_error = 0.0;  // ||W X - W_q X||_F over all calibration batches
  std::vector<double> column_errors;
  double tracked_loss = 0.0;
  double lambda = 0.0;
  std::size_t clamped_exponents = 0;
};

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> map(
      m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
  return map.cast<double>();
}

/// ||(W - W_q) X||_F.
inline double output_error(const Matrix& w, const Matrix& wq, const Matrix& x) {
  require(w.rows() == wq.rows() && w.cols() == wq.cols(), "output_error: W and W_q shapes differ");
  require(x.rows() == w.cols(), "output_error: X has " + std::to_string(x.rows()) + " rows, expected " +
                                    std::to_string(w.cols()));
  return ((to_eigen(w) - to_eigen(wq)) * to_eigen(x)).norm();
}

inline double output_error(const Matrix& w, const Matrix& wq, std::span<const Matrix> batches) {
  double acc = 0.0;
  for (const auto& x : batches) {
    const double e = output_error(w, wq, x);
    acc += e * e;
  }
  return std::sqrt(acc);
}

inline double frobenius_error(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "frobenius_error: shape mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a.values()[k]) - b.values()[k];
    acc += d * d;
  }
  return std::sqrt(acc);
}

namespace detail {

inline void finish(ReparamResult& res, const Matrix& w, std::span<const Matrix> batches) {
  const Matrix wq = dequantize(res.weight);
  res.weight_error = frobenius_error(w, wq);
  res.activation_error = batches.empty() ? 0.0 : output_error(w, wq, batches);
}

inline void check_hessian(const Matrix& w, const CalibrationHessian& h) {
  require(h.dim == w.cols(), "Hessian dimension " + std::to_string(h.dim) + " does not match layer input width " +
                                 std::to_string(w.cols()));
  for (double d : h.d)
    if (!(d > 0.0)) fail(ErrorKind::Degeneracy, "non-positive inverse-Hessian factor diagonal");
}

/// Compensate columns right of `end` for the error of columns [begin, end).
inline double compensate(Eigen::MatrixXd& work, const Eigen::MatrixXd& quantized, const Eigen::MatrixXd& u,
                         Eigen::Index begin, Eigen::Index end, std::vector<double>& column_errors) {
  const Eigen::Index width = end - begin;
  Eigen::MatrixXd e = work.middleCols(begin, width) - quantized;
  u.block(begin, begin, width, width).triangularView<Eigen::Upper>().solveInPlace<Eigen::OnTheRight>(e);
  for (Eigen::Index k = 0; k < width; ++k) column_errors[static_cast<std::size_t>(begin + k)] = e.col(k).squaredNorm();
  const Eigen::Index rest = work.cols() - end;
  if (rest > 0) work.rightCols(rest).noalias() -= e * u.block(begin, end, width, rest);
  return e.squaredNorm();
}

}  // namespace detail

/// Weight objective: every row quantized independently, no Hessian.
inline ReparamResult reparam_weight_only(const Matrix& w, const ReparamConfig& cfg,
                                         std::span<const Matrix> batches = {}) {
  require(cfg.objective == Objective::WeightOnly, "reparam_weight_only: objective must be WeightOnly");
  validate_config(cfg);
  ReparamResult res;
  res.weight = quantize_groups(w, cfg.bits, Grouping::row_wise(), cfg.cycles, cfg.pot);
  res.column_errors.assign(w.cols(), 0.0);
  detail::finish(res, w, batches);
  res.tracked_loss = res.weight_error * res.weight_error;
  return res;
}

/// Activation objective: row scales fixed by an initial row-wise fit of W, then columns
/// snapped one at a time to the nearest level of their row, with compensation.
inline ReparamResult reparam_activation_only(const Matrix& w, const CalibrationHessian& h, const ReparamConfig& cfg,
                                             std::span<const Matrix> batches = {}) {
  require(cfg.objective == Objective::ActivationOnly, "reparam_activation_only: objective must be ActivationOnly");
  validate_config(cfg);
  detail::check_hessian(w, h);
  ReparamResult res;
  res.lambda = h.lambda;
  res.weight = quantize_groups(w, cfg.bits, Grouping::row_wise(), cfg.cycles, cfg.pot);
  const std::size_t m = w.rows(), n = w.cols();

  std::vector<LevelSet> levels;
  levels.reserve(m);
  for (std::size_t r = 0; r < m; ++r) {
    std::vector<double> alphas(static_cast<std::size_t>(cfg.bits));
    for (int i = 0; i < cfg.bits; ++i) alphas[i] = res.weight.scales.alpha(r, i);
    levels.emplace_back(alphas);
  }

  Eigen::MatrixXd work = to_eigen(w);
  res.column_errors.assign(n, 0.0);
  Eigen::MatrixXd q(static_cast<Eigen::Index>(m), 1);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t r = 0; r < m; ++r) {
      const double x = work(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
      const std::size_t idx = levels[r].nearest_index(x);
      const std::uint32_t code = levels[r].code_at(idx);
      for (int i = 0; i < cfg.bits; ++i) res.weight.planes[i].set(r, j, (code >> i) & 1u);
      q(static_cast<Eigen::Index>(r), 0) = levels[r].values()[idx];
    }
    const auto jj = static_cast<Eigen::Index>(j);
    res.tracked_loss += detail::compensate(work, q, h.inverse_upper, jj, jj + 1, res.column_errors);
  }
  detail::finish(res, w, batches);
  return res;
}

/// Multi-objective: scales are fit per column (or per block) on the already-compensated
/// weights, so later groups see the error pushed onto them by earlier ones.
inline ReparamResult reparam_multiobjective(const Matrix& w, const CalibrationHessian& h, const ReparamConfig& cfg,
                                            std::span<const Matrix> batches = {}) {
  require(cfg.objective == Objective::MultiObjective, "reparam_multiobjective: objective must be MultiObjective");
  validate_config(cfg);
  detail::check_hessian(w, h);
  const std::size_t m = w.rows(), n = w.cols();
  ReparamResult res;
  res.lambda = h.lambda;
  res.weight = make_empty_bcq(m, n, cfg.bits, cfg.grouping, cfg.pot.enabled ? cfg.pot.terms : 0);
  res.column_errors.assign(n, 0.0);
  const GroupLayout layout = res.weight.layout();
  Eigen::MatrixXd work = to_eigen(w);

  auto fit_group = [&](std::size_t g, Eigen::MatrixXd& q, std::size_t col_begin) {
    const auto members = group_members(layout, g);
    std::vector<double> v;
    v.reserve(members.size());
    for (const auto& [r, c] : members) v.push_back(work(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    const AlternatingResult fit = alternating_bcq(std::span<const double>(v), cfg.bits, cfg.cycles, cfg.pot);
    res.clamped_exponents += fit.clamped_exponents;
    store_group(res.weight, g, fit, members);
    for (std::size_t k = 0; k < members.size(); ++k)
      q(static_cast<Eigen::Index>(members[k].first), static_cast<Eigen::Index>(members[k].second - col_begin)) =
          fit.fit.level(k);
  };

  if (cfg.grouping.kind == GroupingKind::ColumnWise) {
    Eigen::MatrixXd q(static_cast<Eigen::Index>(m), 1);
    for (std::size_t j = 0; j < n; ++j) {
      fit_group(j, q, j);
      const auto jj = static_cast<Eigen::Index>(j);
      res.tracked_loss += detail::compensate(work, q, h.inverse_upper, jj, jj + 1, res.column_errors);
    }
  } else {
    for (std::size_t cg = 0; cg < layout.col_group_count(); ++cg) {
      const std::size_t c0 = layout.col_group_begin(cg), c1 = layout.col_group_end(cg);
      Eigen::MatrixXd q(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(c1 - c0));
      for (std::size_t rg = 0; rg < layout.row_group_count(); ++rg) fit_group(rg * layout.col_group_count() + cg, q, c0);
      res.tracked_loss += detail::compensate(work, q, h.inverse_upper, static_cast<Eigen::Index>(c0),
                                             static_cast<Eigen::Index>(c1), res.column_errors);
    }
  }
  detail::finish(res, w, batches);
  return res;
}

/// Dispatch on cfg.objective. The Hessian is only built when the objective needs it.
inline ReparamResult reparameterize(const Matrix& w, std::span<const Matrix> batches, const ReparamConfig& cfg) {
  validate_config(cfg);
  for (const auto& x : batches)
    require(x.rows() == w.cols(), "calibration width " + std::to_string(x.rows()) + " does not match layer input width " +
                                      std::to_string(w.cols()));
  if (cfg.objective == Objective::WeightOnly) return reparam_weight_only(w, cfg, batches);
  require(!batches.empty(), "activation-aware objectives need calibration data");
  const CalibrationHessian h = accumulate_hessian(batches, cfg.damping);
  if (cfg.objective == Objective::ActivationOnly) return reparam_activation_only(w, h, cfg, batches);
  return reparam_multiobjective(w, h, cfg, batches);
}

}  // namespace shiftadd
