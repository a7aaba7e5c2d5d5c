#pragma once

// Binary-coding quantization: w ~ sum_i alpha_i * b_i with b_i in {-1,+1}.
//
// The vector kernels below operate on one scale group flattened to a vector; the
// grouped matrix types at the bottom reuse them for row, column and block groupings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "shiftadd/bitplane.hpp"
#include "shiftadd/error.hpp"
#include "shiftadd/matrix.hpp"
#include "shiftadd/pot_scale.hpp"

namespace shiftadd {

inline constexpr int kMaxBits = 8;
inline constexpr int kDefaultCycles = 15;

/// Codes of a q-bit fit: codes[i][j] is b_i at element j, always +1 or -1.
using CodePlanes = std::vector<std::vector<std::int8_t>>;

inline std::int8_t sign_of(double v) noexcept { return v < 0.0 ? std::int8_t{-1} : std::int8_t{1}; }

inline double round_to_f32(double v) noexcept { return static_cast<double>(static_cast<float>(v)); }

struct OneBitFit {
  std::vector<std::int8_t> signs;
  double alpha = 0.0;
};

/// b = sign(w) with sign(0) = +1, alpha = w^T b / n = mean |w|.
inline OneBitFit binary_quantize_1bit(std::span<const double> w) {
  require(!w.empty(), "binary_quantize_1bit: empty vector");
  OneBitFit out;
  out.signs.resize(w.size());
  double dot = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    out.signs[j] = sign_of(w[j]);
    dot += w[j] * out.signs[j];
  }
  out.alpha = round_to_f32(dot / static_cast<double>(w.size()));
  return out;
}

inline OneBitFit binary_quantize_1bit(std::span<const float> w) {
  const std::vector<double> wd(w.begin(), w.end());
  return binary_quantize_1bit(std::span<const double>(wd));
}

struct BcqFit {
  std::vector<double> alphas;  // always exactly representable as f32
  CodePlanes codes;

  int bits() const noexcept { return static_cast<int>(alphas.size()); }
  double level(std::size_t j) const noexcept {
    double v = 0.0;
    for (std::size_t i = 0; i < alphas.size(); ++i) v += alphas[i] * codes[i][j];
    return v;
  }
};

inline double residual_norm(std::span<const double> alphas, const CodePlanes& codes,
                            std::span<const double> w) {
  double acc = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    double v = 0.0;
    for (std::size_t i = 0; i < alphas.size(); ++i) v += alphas[i] * codes[i][j];
    const double d = w[j] - v;
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double residual_norm(const BcqFit& fit, std::span<const double> w) {
  return residual_norm(fit.alphas, fit.codes, w);
}

/// Sequential residual binarization: b_i = sign(r_{i-1}), alpha_i = r_{i-1}^T b_i / n.
inline BcqFit greedy_init(std::span<const double> w, int bits) {
  require(bits >= 1 && bits <= kMaxBits, "greedy_init: bits must be in 1..8, got " + std::to_string(bits));
  require(!w.empty(), "greedy_init: empty vector");
  BcqFit fit;
  std::vector<double> r(w.begin(), w.end());
  for (int i = 0; i < bits; ++i) {
    const OneBitFit one = binary_quantize_1bit(std::span<const double>(r));
    for (std::size_t j = 0; j < r.size(); ++j) r[j] -= one.alpha * one.signs[j];
    fit.alphas.push_back(one.alpha);
    fit.codes.push_back(one.signs);
  }
  return fit;
}

inline BcqFit greedy_init(std::span<const float> w, int bits) {
  const std::vector<double> wd(w.begin(), w.end());
  return greedy_init(std::span<const double>(wd), bits);
}

/// Ordinary least squares for the scales given fixed codes: (B^T B + 1e-8 n I)^-1 B^T w.
inline std::vector<double> refit_scales_ls(const CodePlanes& codes, std::span<const double> w) {
  const std::size_t q = codes.size();
  const std::size_t n = w.size();
  require(q >= 1, "refit_scales_ls: no code planes");
  std::vector<double> gram(q * q, 0.0);
  std::vector<double> rhs(q, 0.0);
  for (std::size_t a = 0; a < q; ++a) {
    require(codes[a].size() == n, "refit_scales_ls: code plane length mismatch");
    for (std::size_t j = 0; j < n; ++j) rhs[a] += codes[a][j] * w[j];
    for (std::size_t b = 0; b <= a; ++b) {
      long dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += codes[a][j] * codes[b][j];
      gram[a * q + b] = gram[b * q + a] = static_cast<double>(dot);
    }
    gram[a * q + a] += 1e-8 * static_cast<double>(n);
  }
  // Cholesky in place (lower triangle), then two triangular solves.
  for (std::size_t c = 0; c < q; ++c) {
    double diag = gram[c * q + c];
    for (std::size_t k = 0; k < c; ++k) diag -= gram[c * q + k] * gram[c * q + k];
    if (!(diag > 0.0) || !std::isfinite(diag))
      fail(ErrorKind::Degeneracy, "refit_scales_ls: singular Gram matrix");
    const double l = std::sqrt(diag);
    gram[c * q + c] = l;
    for (std::size_t r = c + 1; r < q; ++r) {
      double v = gram[r * q + c];
      for (std::size_t k = 0; k < c; ++k) v -= gram[r * q + k] * gram[c * q + k];
      gram[r * q + c] = v / l;
    }
  }
  std::vector<double> y(q);
  for (std::size_t r = 0; r < q; ++r) {
    double v = rhs[r];
    for (std::size_t k = 0; k < r; ++k) v -= gram[r * q + k] * y[k];
    y[r] = v / gram[r * q + r];
  }
  std::vector<double> alpha(q);
  for (std::size_t r = q; r-- > 0;) {
    double v = y[r];
    for (std::size_t k = r + 1; k < q; ++k) v -= gram[k * q + r] * alpha[k];
    alpha[r] = round_to_f32(v / gram[r * q + r]);
  }
  return alpha;
}

/// The 2^q representable values sum_i +-alpha_i, deduplicated and sorted.
///
/// Ties in distance resolve to the smaller-magnitude level, and among equal magnitudes
/// to the negative one. Duplicate values keep the lowest code.
class LevelSet {
 public:
  explicit LevelSet(std::span<const double> alphas) : bits_(static_cast<int>(alphas.size())) {
    require(bits_ >= 1 && bits_ <= kMaxBits, "LevelSet: bits must be in 1..8");
    const std::uint32_t count = 1u << bits_;
    std::vector<std::pair<double, std::uint32_t>> all;
    all.reserve(count);
    for (std::uint32_t code = 0; code < count; ++code) {
      double v = 0.0;
      for (int i = 0; i < bits_; ++i) v += ((code >> i) & 1u) ? alphas[i] : -alphas[i];
      all.emplace_back(v, code);
    }
    std::sort(all.begin(), all.end());
    for (const auto& [v, code] : all) {
      if (!values_.empty() && values_.back() == v) continue;
      values_.push_back(v);
      codes_.push_back(code);
    }
  }

  int bits() const noexcept { return bits_; }
  std::span<const double> values() const noexcept { return values_; }

  /// Index into values() of the level nearest to x.
  std::size_t nearest_index(double x) const noexcept {
    const auto it = std::lower_bound(values_.begin(), values_.end(), x);
    const auto hi = static_cast<std::size_t>(it - values_.begin());
    if (hi == 0) return 0;
    if (hi == values_.size()) return hi - 1;
    const std::size_t lo = hi - 1;
    const double dlo = x - values_[lo];
    const double dhi = values_[hi] - x;
    if (dlo < dhi) return lo;
    if (dhi < dlo) return hi;
    const double mlo = std::fabs(values_[lo]);
    const double mhi = std::fabs(values_[hi]);
    if (mlo < mhi) return lo;
    if (mhi < mlo) return hi;
    return lo;  // equal magnitude: lo is the negative level
  }

  std::uint32_t nearest_code(double x) const noexcept { return codes_[nearest_index(x)]; }
  double nearest_value(double x) const noexcept { return values_[nearest_index(x)]; }
  std::uint32_t code_at(std::size_t index) const noexcept { return codes_[index]; }

 private:
  int bits_;
  std::vector<double> values_;
  std::vector<std::uint32_t> codes_;
};

/// Per element, pick the code whose level is nearest (binary search over sorted levels).
inline CodePlanes refit_codes_bs(std::span<const double> alphas, std::span<const double> w) {
  const LevelSet levels(alphas);
  CodePlanes codes(alphas.size(), std::vector<std::int8_t>(w.size()));
  for (std::size_t j = 0; j < w.size(); ++j) {
    const std::uint32_t code = levels.nearest_code(w[j]);
    for (std::size_t i = 0; i < alphas.size(); ++i) codes[i][j] = ((code >> i) & 1u) ? 1 : -1;
  }
  return codes;
}

struct PotConfig {
  bool enabled = false;
  int terms = kDefaultPotTerms;
  bool end_only = false;  // project once after the last cycle instead of every cycle
};

struct AlternatingResult {
  BcqFit fit;
  std::vector<PotScale> pot;          // one per plane when PoT is enabled
  std::vector<double> residual_trace;  // [greedy, after cycle 1, ..., after cycle T]
  double residual = 0.0;
  double greedy_residual = 0.0;
  double projected_greedy_residual = 0.0;  // greedy codes with PoT-projected scales
  std::size_t clamped_exponents = 0;
};

namespace detail {

inline std::vector<double> project_pot(std::span<const double> alphas, int terms, std::vector<PotScale>& pot,
                                       PotStats& stats) {
  pot.clear();
  std::vector<double> out;
  for (double a : alphas) {
    pot.push_back(additive_pot(a, terms, &stats));
    out.push_back(static_cast<double>(pot_value(pot.back())));
  }
  return out;
}

}  // namespace detail

/// Greedy initialization followed by T cycles of (LS scale refit, optional PoT projection,
/// nearest-level code refit).
///
/// A refit that would raise the residual for the current codes is discarded, so without
/// PoT the residual trace is non-increasing. With PoT the best state seen is returned,
/// which is never worse than the projected greedy initialization.
inline AlternatingResult alternating_bcq(std::span<const double> w, int bits, int cycles,
                                         const PotConfig& pot = {}) {
  require(cycles >= 0, "alternating_bcq: cycles must be >= 0");
  AlternatingResult out;
  BcqFit fit = greedy_init(w, bits);
  out.greedy_residual = residual_norm(fit, w);
  out.residual_trace.push_back(out.greedy_residual);

  if (!pot.enabled) {
    double current = out.greedy_residual;
    for (int t = 0; t < cycles; ++t) {
      std::vector<double> alphas = refit_scales_ls(fit.codes, w);
      if (residual_norm(alphas, fit.codes, w) <= current) fit.alphas = std::move(alphas);
      fit.codes = refit_codes_bs(fit.alphas, w);
      current = residual_norm(fit, w);
      out.residual_trace.push_back(current);
    }
    out.fit = std::move(fit);
    out.residual = current;
    out.projected_greedy_residual = current;
    return out;
  }

  PotStats stats;
  std::vector<PotScale> scales;
  fit.alphas = detail::project_pot(fit.alphas, pot.terms, scales, stats);
  double current = residual_norm(fit, w);
  out.projected_greedy_residual = current;
  BcqFit best = fit;
  std::vector<PotScale> best_scales = scales;
  double best_residual = current;

  auto consider = [&](const BcqFit& candidate, const std::vector<PotScale>& candidate_scales, double r) {
    if (r < best_residual) {
      best = candidate;
      best_scales = candidate_scales;
      best_residual = r;
    }
  };

  for (int t = 0; t < cycles; ++t) {
    std::vector<double> alphas = refit_scales_ls(fit.codes, w);
    std::vector<PotScale> projected;
    if (!pot.end_only) alphas = detail::project_pot(alphas, pot.terms, projected, stats);
    if (residual_norm(alphas, fit.codes, w) <= current) {
      fit.alphas = std::move(alphas);
      if (!pot.end_only) scales = std::move(projected);
    }
    fit.codes = refit_codes_bs(fit.alphas, w);
    current = residual_norm(fit, w);
    out.residual_trace.push_back(current);
    if (!pot.end_only) consider(fit, scales, current);
  }

  if (pot.end_only && cycles > 0) {
    fit.alphas = detail::project_pot(fit.alphas, pot.terms, scales, stats);
    fit.codes = refit_codes_bs(fit.alphas, w);
    consider(fit, scales, residual_norm(fit, w));
  }

  out.fit = std::move(best);
  out.pot = std::move(best_scales);
  out.residual = best_residual;
  out.clamped_exponents = stats.clamped;
  return out;
}

inline AlternatingResult alternating_bcq(std::span<const float> w, int bits, int cycles,
                                         const PotConfig& pot = {}) {
  const std::vector<double> wd(w.begin(), w.end());
  return alternating_bcq(std::span<const double>(wd), bits, cycles, pot);
}

// ---------------------------------------------------------------------------
// Grouped matrices
// ---------------------------------------------------------------------------

enum class GroupingKind : std::uint8_t { RowWise = 0, ColumnWise = 1, BlockWise = 2 };

inline const char* to_string(GroupingKind kind) {
  switch (kind) {
    case GroupingKind::RowWise: return "row";
    case GroupingKind::ColumnWise: return "column";
    case GroupingKind::BlockWise: return "block";
  }
  return "unknown";
}

inline GroupingKind parse_grouping(const std::string& s) {
  if (s == "row" || s == "rowwise" || s == "row-wise") return GroupingKind::RowWise;
  if (s == "column" || s == "col" || s == "columnwise" || s == "column-wise") return GroupingKind::ColumnWise;
  if (s == "block" || s == "blockwise" || s == "block-wise") return GroupingKind::BlockWise;
  fail(ErrorKind::Format, "unknown grouping '" + s + "'");
}

struct Grouping {
  GroupingKind kind = GroupingKind::RowWise;
  std::size_t col_group = 8;   // BlockWise only
  std::size_t row_groups = 8;  // BlockWise only

  static Grouping row_wise() { return {GroupingKind::RowWise}; }
  static Grouping column_wise() { return {GroupingKind::ColumnWise}; }
  static Grouping block_wise(std::size_t col_group = 8, std::size_t row_groups = 8) {
    return {GroupingKind::BlockWise, col_group, row_groups};
  }
  friend bool operator==(const Grouping&, const Grouping&) = default;
};

/// Maps matrix elements to scale groups.
///
/// BlockWise: columns are cut into groups of col_group (the last one may be narrower),
/// rows into min(row_groups, m) contiguous groups of floor(m / R) rows with the last
/// group absorbing the remainder. Group index = row_group * col_group_count + col_group.
class GroupLayout {
 public:
  GroupLayout(const Grouping& grouping, std::size_t rows, std::size_t cols)
      : grouping_(grouping), rows_(rows), cols_(cols) {
    if (grouping.kind == GroupingKind::BlockWise) {
      require(grouping.col_group >= 1 && grouping.row_groups >= 1, "block grouping sizes must be positive");
      row_group_count_ = std::min(grouping.row_groups, rows);
      rows_per_group_ = row_group_count_ ? rows / row_group_count_ : 0;
      col_group_count_ = (cols + grouping.col_group - 1) / grouping.col_group;
    }
  }

  const Grouping& grouping() const noexcept { return grouping_; }

  std::size_t count() const noexcept {
    switch (grouping_.kind) {
      case GroupingKind::RowWise: return rows_;
      case GroupingKind::ColumnWise: return cols_;
      case GroupingKind::BlockWise: return row_group_count_ * col_group_count_;
    }
    return 0;
  }

  std::size_t row_group_count() const noexcept { return row_group_count_; }
  std::size_t col_group_count() const noexcept { return col_group_count_; }
  std::size_t row_group_begin(std::size_t k) const noexcept { return k * rows_per_group_; }
  std::size_t row_group_end(std::size_t k) const noexcept {
    return k + 1 == row_group_count_ ? rows_ : (k + 1) * rows_per_group_;
  }
  std::size_t row_group_of(std::size_t r) const noexcept {
    return std::min(r / rows_per_group_, row_group_count_ - 1);
  }
  std::size_t col_group_begin(std::size_t k) const noexcept { return k * grouping_.col_group; }
  std::size_t col_group_end(std::size_t k) const noexcept {
    return std::min(cols_, (k + 1) * grouping_.col_group);
  }

  std::size_t group_of(std::size_t r, std::size_t c) const noexcept {
    switch (grouping_.kind) {
      case GroupingKind::RowWise: return r;
      case GroupingKind::ColumnWise: return c;
      case GroupingKind::BlockWise: return row_group_of(r) * col_group_count_ + c / grouping_.col_group;
    }
    return 0;
  }

  /// Visit the members of group g in the order the group is flattened (row-major).
  template <class F>
  void for_each_member(std::size_t g, F&& f) const {
    switch (grouping_.kind) {
      case GroupingKind::RowWise:
        for (std::size_t c = 0; c < cols_; ++c) f(g, c);
        break;
      case GroupingKind::ColumnWise:
        for (std::size_t r = 0; r < rows_; ++r) f(r, g);
        break;
      case GroupingKind::BlockWise: {
        const std::size_t rg = g / col_group_count_;
        const std::size_t cg = g % col_group_count_;
        for (std::size_t r = row_group_begin(rg); r < row_group_end(rg); ++r)
          for (std::size_t c = col_group_begin(cg); c < col_group_end(cg); ++c) f(r, c);
        break;
      }
    }
  }

 private:
  Grouping grouping_;
  std::size_t rows_;
  std::size_t cols_;
  std::size_t row_group_count_ = 0;
  std::size_t rows_per_group_ = 0;
  std::size_t col_group_count_ = 0;
};

/// Per-group scale vectors [alpha_1..alpha_q], stored group-major at [g * bits + i].
/// When pot_terms > 0 each scale also carries its PoT representation and
/// values[k] == pot_value(pot[k]).
struct ScaleGroup {
  Grouping grouping;
  int bits = 0;
  std::vector<float> values;
  int pot_terms = 0;
  std::vector<PotScale> pot;

  bool is_pot() const noexcept { return pot_terms > 0; }
  float alpha(std::size_t g, int i) const noexcept { return values[g * bits + i]; }
  const PotScale& pot_scale(std::size_t g, int i) const noexcept { return pot[g * bits + i]; }

  friend bool operator==(const ScaleGroup&, const ScaleGroup&) = default;
};

struct BcqWeight {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 0;
  std::vector<BinaryPlane> planes;
  ScaleGroup scales;

  GroupLayout layout() const { return GroupLayout(scales.grouping, rows, cols); }

  /// Throws Integrity when the internal invariants do not hold.
  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::Integrity, "inconsistent BcqWeight: " + what); };
    if (rows == 0 || cols == 0) bad("empty shape");
    if (bits < 1 || bits > kMaxBits) bad("bits out of range");
    if (planes.size() != static_cast<std::size_t>(bits)) bad("plane count != bits");
    for (const auto& p : planes)
      if (p.rows() != rows || p.cols() != cols || !p.padding_clear()) bad("plane shape or padding");
    if (scales.bits != bits) bad("scale bits != bits");
    const std::size_t n = layout().count() * static_cast<std::size_t>(bits);
    if (scales.values.size() != n) bad("scale count");
    if (scales.is_pot()) {
      if (scales.pot.size() != n) bad("pot scale count");
      for (std::size_t k = 0; k < n; ++k) {
        if (scales.pot[k].terms.size() != static_cast<std::size_t>(scales.pot_terms)) bad("pot term count");
        if (pot_value(scales.pot[k]) != scales.values[k]) bad("pot value mismatch");
      }
    } else if (!scales.pot.empty()) {
      bad("pot scales present without pot_terms");
    }
  }

  friend bool operator==(const BcqWeight&, const BcqWeight&) = default;
};

inline BcqWeight make_empty_bcq(std::size_t rows, std::size_t cols, int bits, const Grouping& grouping,
                                int pot_terms) {
  BcqWeight w;
  w.rows = rows;
  w.cols = cols;
  w.bits = bits;
  w.planes.assign(static_cast<std::size_t>(bits), BinaryPlane(rows, cols));
  w.scales.grouping = grouping;
  w.scales.bits = bits;
  const std::size_t n = w.layout().count() * static_cast<std::size_t>(bits);
  w.scales.values.assign(n, 0.0f);
  w.scales.pot_terms = pot_terms;
  if (pot_terms > 0) w.scales.pot.assign(n, PotScale{std::vector<PotTerm>(static_cast<std::size_t>(pot_terms))});
  return w;
}

/// Write one group's fit into a BcqWeight. `members` lists (row, col) in the order the
/// fit's code vectors are indexed.
inline void store_group(BcqWeight& w, std::size_t g, const AlternatingResult& res,
                        std::span<const std::pair<std::size_t, std::size_t>> members) {
  for (int i = 0; i < w.bits; ++i) {
    const std::size_t k = g * static_cast<std::size_t>(w.bits) + static_cast<std::size_t>(i);
    w.scales.values[k] = static_cast<float>(res.fit.alphas[i]);
    if (w.scales.is_pot()) w.scales.pot[k] = res.pot[i];
    for (std::size_t j = 0; j < members.size(); ++j)
      w.planes[i].set(members[j].first, members[j].second, res.fit.codes[i][j] > 0);
  }
}

inline std::vector<std::pair<std::size_t, std::size_t>> group_members(const GroupLayout& layout, std::size_t g) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  layout.for_each_member(g, [&](std::size_t r, std::size_t c) { out.emplace_back(r, c); });
  return out;
}

/// Independent alternating BCQ per scale group, no Hessian involved.
inline BcqWeight quantize_groups(const Matrix& w, int bits, const Grouping& grouping, int cycles,
                                 const PotConfig& pot = {}) {
  require(w.rows() > 0 && w.cols() > 0, "quantize_groups: empty matrix");
  BcqWeight out = make_empty_bcq(w.rows(), w.cols(), bits, grouping, pot.enabled ? pot.terms : 0);
  const GroupLayout layout = out.layout();
  for (std::size_t g = 0; g < layout.count(); ++g) {
    const auto members = group_members(layout, g);
    std::vector<double> v;
    v.reserve(members.size());
    for (const auto& [r, c] : members) v.push_back(w(r, c));
    store_group(out, g, alternating_bcq(std::span<const double>(v), bits, cycles, pot), members);
  }
  return out;
}

/// Entry (r, c) = sum_i alpha_i^{g(r,c)} * b_i(r, c).
inline Matrix dequantize(const BcqWeight& w) {
  Matrix out(w.rows, w.cols);
  const GroupLayout layout = w.layout();
  for (std::size_t r = 0; r < w.rows; ++r) {
    for (std::size_t c = 0; c < w.cols; ++c) {
      const std::size_t g = layout.group_of(r, c);
      double v = 0.0;
      for (int i = 0; i < w.bits; ++i) v += static_cast<double>(w.scales.alpha(g, i)) * w.planes[i].sign(r, c);
      out(r, c) = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace shiftadd
