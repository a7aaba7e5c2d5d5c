#pragma once

// Layer sensitivity criteria and mixed-bit allocation over the {2, 3, 4} menu.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "shiftadd/error.hpp"
#include "shiftadd/hessian.hpp"
#include "shiftadd/matrix.hpp"
#include "shiftadd/reparam.hpp"

namespace shiftadd {

inline constexpr std::array<int, 3> kBitMenu{2, 3, 4};

inline std::size_t menu_index(int bits) {
  require(bits >= 2 && bits <= 4, "bit width " + std::to_string(bits) + " is not in the {2,3,4} menu");
  return static_cast<std::size_t>(bits - 2);
}

/// IS_{:,j} = W_{:,j} / d_j with d_j the diagonal of the upper Cholesky factor of H^-1.
inline Eigen::MatrixXd importance_score(const Matrix& w, std::span<const double> d) {
  require(d.size() == w.cols(), "importance_score: " + std::to_string(d.size()) + " factors for " +
                                    std::to_string(w.cols()) + " columns");
  Eigen::MatrixXd is = to_eigen(w);
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (!(d[j] > 0.0)) fail(ErrorKind::Degeneracy, "importance_score: non-positive factor at column " + std::to_string(j));
    is.col(static_cast<Eigen::Index>(j)) /= d[j];
  }
  return is;
}

/// C = ||IS||_F * Var(IS), population variance over all entries.
inline double criterion(const Eigen::MatrixXd& is) {
  require(is.size() > 0, "criterion: empty importance score");
  const double mean = is.mean();
  const double var = (is.array() - mean).square().mean();
  return is.norm() * var;
}

struct BitError {
  int bits = 0;
  double error = 0.0;
};

struct MeasureOptions {
  double row_fraction = 1.0;  // subsample this fraction of rows (at least one row)
  std::uint64_t seed = 0;
};

/// Activation error of reparameterizing W at each requested bit width.
inline std::vector<BitError> measure_bit_errors(const Matrix& w, std::span<const Matrix> batches,
                                                std::span<const int> bits, ReparamConfig cfg,
                                                const MeasureOptions& opts = {}) {
  require(!bits.empty(), "measure_bit_errors: empty bit list");
  for (int b : bits) menu_index(b);
  require(opts.row_fraction > 0.0 && opts.row_fraction <= 1.0, "row fraction must be in (0, 1]");

  const Matrix* source = &w;
  Matrix sampled;
  if (opts.row_fraction < 1.0) {
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(opts.row_fraction * w.rows())));
    std::vector<std::size_t> rows(w.rows());
    std::iota(rows.begin(), rows.end(), 0);
    std::mt19937_64 rng(opts.seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(keep);
    std::sort(rows.begin(), rows.end());
    sampled = Matrix(keep, w.cols());
    for (std::size_t k = 0; k < keep; ++k) std::copy_n(w.row(rows[k]).begin(), w.cols(), sampled.row(k).begin());
    source = &sampled;
  }

  std::vector<BitError> out;
  if (cfg.objective == Objective::WeightOnly) {
    for (int b : bits) {
      cfg.bits = b;
      out.push_back({b, reparam_weight_only(*source, cfg, batches).activation_error});
    }
    return out;
  }
  require(!batches.empty(), "measure_bit_errors: calibration data required");
  const CalibrationHessian h = accumulate_hessian(batches, cfg.damping);
  for (int b : bits) {
    cfg.bits = b;
    const ReparamResult r = cfg.objective == Objective::ActivationOnly ? reparam_activation_only(*source, h, cfg, batches)
                                                                       : reparam_multiobjective(*source, h, cfg, batches);
    out.push_back({b, r.activation_error});
  }
  return out;
}

struct LayerSensitivity {
  std::string name;
  double criterion = 0.0;
  std::vector<BitError> measured;
  std::array<double, 3> fitted{};  // C_{i,b} for b = 2, 3, 4
};

/// Least-squares polynomial (degree min(2, points - 1)) of error against bit width,
/// evaluated at 2, 3, 4, then clamped to be non-negative and non-increasing in b.
inline std::array<double, 3> fit_bit_curve(std::span<const BitError> points) {
  require(points.size() >= 2, "fit_bit_curve: at least two measured points are required");
  for (std::size_t a = 0; a < points.size(); ++a)
    for (std::size_t b = a + 1; b < points.size(); ++b)
      require(points[a].bits != points[b].bits, "fit_bit_curve: repeated bit width");
  const Eigen::Index degree = std::min<Eigen::Index>(2, static_cast<Eigen::Index>(points.size()) - 1);
  Eigen::MatrixXd v(static_cast<Eigen::Index>(points.size()), degree + 1);
  Eigen::VectorXd e(static_cast<Eigen::Index>(points.size()));
  for (std::size_t k = 0; k < points.size(); ++k) {
    const double t = points[k].bits - 3.0;
    double p = 1.0;
    for (Eigen::Index d = 0; d <= degree; ++d, p *= t) v(static_cast<Eigen::Index>(k), d) = p;
    e(static_cast<Eigen::Index>(k)) = points[k].error;
  }
  const Eigen::VectorXd coef = v.colPivHouseholderQr().solve(e);
  std::array<double, 3> out{};
  for (std::size_t k = 0; k < kBitMenu.size(); ++k) {
    const double t = kBitMenu[k] - 3.0;
    double p = 1.0, acc = 0.0;
    for (Eigen::Index d = 0; d <= degree; ++d, p *= t) acc += coef(d) * p;
    out[k] = std::max(0.0, acc);
  }
  for (std::size_t k = 1; k < out.size(); ++k) out[k] = std::min(out[k], out[k - 1]);
  return out;
}

inline void fit_bit_curve(LayerSensitivity& layer) { layer.fitted = fit_bit_curve(layer.measured); }

struct AllocationProblem {
  std::vector<std::array<double, 3>> criteria;  // C_{i,b} per layer, b = 2, 3, 4
  double budget = 3.0;                          // average bits per layer
};

struct Allocation {
  std::vector<int> bits;
  double objective = 0.0;
  int total_bits = 0;
  int budget_bits = 0;
  bool feasible = false;
};

inline int budget_bits(double budget, std::size_t layers) {
  return static_cast<int>(std::floor(budget * static_cast<double>(layers) + 1e-9));
}

/// Exact minimum of sum_i C_{i,b_i} subject to sum_i b_i <= floor(budget * L).
///
/// Ties are broken by (1) more total bits, (2) the higher width going to the layer with
/// the larger C_{i,2} - C_{i,4} spread, (3) the lower layer index. The DP runs over
/// layers in that priority order so the reconstruction pass can apply (2) and (3)
/// greedily.
inline Allocation solve_allocation(const AllocationProblem& problem) {
  const std::size_t layers = problem.criteria.size();
  require(layers >= 1, "solve_allocation: no layers");
  require(std::isfinite(problem.budget) && problem.budget <= 4.0 + 1e-12,
          "solve_allocation: budget must be a finite average in [2, 4]");
  const int cap = budget_bits(problem.budget, layers);
  if (cap < 2 * static_cast<int>(layers))
    fail(ErrorKind::Validation, "solve_allocation: budget " + std::to_string(problem.budget) +
                                    " is infeasible (minimum is 2 bits per layer)");
  for (const auto& c : problem.criteria)
    for (double v : c) require(std::isfinite(v), "solve_allocation: non-finite criterion");

  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = problem.criteria[a][0] - problem.criteria[a][2];
    const double sb = problem.criteria[b][0] - problem.criteria[b][2];
    return sa > sb;
  });

  const int max_bits = 4 * static_cast<int>(layers);
  constexpr double inf = std::numeric_limits<double>::infinity();
  // best[k][B]: minimum objective of layers order[k..] using exactly B bits.
  std::vector<std::vector<double>> best(layers + 1, std::vector<double>(static_cast<std::size_t>(max_bits) + 1, inf));
  best[layers][0] = 0.0;
  for (std::size_t k = layers; k-- > 0;) {
    const auto& c = problem.criteria[order[k]];
    for (int b_total = 0; b_total <= max_bits; ++b_total) {
      double v = inf;
      for (std::size_t m = 0; m < kBitMenu.size(); ++m) {
        const int rest = b_total - kBitMenu[m];
        if (rest < 0 || best[k + 1][static_cast<std::size_t>(rest)] == inf) continue;
        v = std::min(v, c[m] + best[k + 1][static_cast<std::size_t>(rest)]);
      }
      best[k][static_cast<std::size_t>(b_total)] = v;
    }
  }

  auto close = [](double a, double b) { return std::fabs(a - b) <= 1e-12 * std::max({1.0, std::fabs(a), std::fabs(b)}); };

  int chosen_total = -1;
  double chosen_value = inf;
  for (int b_total = std::min(cap, max_bits); b_total >= 0; --b_total) {
    const double v = best[0][static_cast<std::size_t>(b_total)];
    if (v == inf) continue;
    if (chosen_total < 0 || (v < chosen_value && !close(v, chosen_value))) {
      chosen_total = b_total;
      chosen_value = v;
    }
  }

  Allocation out;
  out.bits.assign(layers, 0);
  out.budget_bits = cap;
  int remaining = chosen_total;
  for (std::size_t k = 0; k < layers; ++k) {
    const auto& c = problem.criteria[order[k]];
    const double target = best[k][static_cast<std::size_t>(remaining)];
    for (std::size_t m = kBitMenu.size(); m-- > 0;) {
      const int rest = remaining - kBitMenu[m];
      if (rest < 0 || best[k + 1][static_cast<std::size_t>(rest)] == inf) continue;
      if (close(c[m] + best[k + 1][static_cast<std::size_t>(rest)], target)) {
        out.bits[order[k]] = kBitMenu[m];
        remaining = rest;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < layers; ++i) {
    out.objective += problem.criteria[i][menu_index(out.bits[i])];
    out.total_bits += out.bits[i];
  }
  out.feasible = out.total_bits <= cap;
  return out;
}

/// Kendall tau-b with tie correction, O(n log n) (sort by a, merge-count inversions in b).
inline double kendall_tau(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "kendall_tau: length mismatch");
  require(a.size() >= 2, "kendall_tau: need at least two observations");
  const std::size_t n = a.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return a[i] < a[j] || (a[i] == a[j] && b[i] < b[j]);
  });

  auto tied_pairs = [](std::uint64_t run) { return run * (run - 1) / 2; };
  std::uint64_t ties_a = 0, ties_joint = 0;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s + 1;
    while (e < n && a[idx[e]] == a[idx[s]]) ++e;
    ties_a += tied_pairs(e - s);
    for (std::size_t t = s; t < e;) {
      std::size_t u = t + 1;
      while (u < e && b[idx[u]] == b[idx[t]]) ++u;
      ties_joint += tied_pairs(u - t);
      t = u;
    }
    s = e;
  }

  std::vector<double> ys(n), buf(n);
  for (std::size_t k = 0; k < n; ++k) ys[k] = b[idx[k]];
  std::uint64_t swaps = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n), hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (ys[j] < ys[i]) {
          swaps += mid - i;
          buf[k++] = ys[j++];
        } else {
          buf[k++] = ys[i++];
        }
      }
      while (i < mid) buf[k++] = ys[i++];
      while (j < hi) buf[k++] = ys[j++];
    }
    ys.swap(buf);
  }

  std::uint64_t ties_b = 0;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s + 1;
    while (e < n && ys[e] == ys[s]) ++e;
    ties_b += tied_pairs(e - s);
    s = e;
  }

  const std::uint64_t total = tied_pairs(n);
  const auto numerator = static_cast<double>(static_cast<std::int64_t>(total - ties_a - ties_b + ties_joint) -
                                             2 * static_cast<std::int64_t>(swaps));
  const double denominator =
      std::sqrt(static_cast<double>(total - ties_a) * static_cast<double>(total - ties_b));
  if (denominator == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return numerator / denominator;
}

}  // namespace shiftadd
