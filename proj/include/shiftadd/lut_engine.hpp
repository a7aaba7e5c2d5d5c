#pragma once

// Multiplication-free GEMV over packed BCQ weights.
//
// Every 8 consecutive activations get a 256-entry table of signed partial sums; the
// packed byte of a plane row is the key into it. Scales are applied either after the
// query (BlockWiseShared: scale groups span whole LUT groups, tables are shared by all
// rows and planes) or folded into the activations before the tables are built
// (ColumnWisePerPlane: one bank per plane, built from per-column shifted activations).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shiftadd/bcq.hpp"
#include "shiftadd/error.hpp"
#include "shiftadd/matrix.hpp"
#include "shiftadd/pot_scale.hpp"

namespace shiftadd {

inline constexpr std::size_t kLutWidth = 8;
inline constexpr std::size_t kLutEntries = 256;

using LutTable = std::array<float, kLutEntries>;

/// table[key] = sum_k s_k x_k, s_k = +1 if bit k of key is set else -1. Each entry is
/// derived from the entry with its lowest set bit cleared plus 2 x_bit (255 adds).
/// Lanes beyond the segment are zero.
inline LutTable build_lut(std::span<const float> segment) {
  require(segment.size() <= kLutWidth, "build_lut: segment longer than 8");
  std::array<float, kLutWidth> x{};
  for (std::size_t k = 0; k < segment.size(); ++k) x[k] = segment[k];
  LutTable t;
  float base = 0.0f;
  for (float v : x) base -= v;
  t[0] = base;
  std::array<float, kLutWidth> twice{};
  for (std::size_t k = 0; k < kLutWidth; ++k) twice[k] = 2.0f * x[k];
  for (std::size_t key = 1; key < kLutEntries; ++key) {
    const std::size_t low = static_cast<std::size_t>(std::countr_zero(static_cast<unsigned>(key)));
    t[key] = t[key & (key - 1)] + twice[low];
  }
  return t;
}

/// Direct +-sum per key; the reference for build_lut.
inline LutTable build_lut_direct(std::span<const float> segment) {
  require(segment.size() <= kLutWidth, "build_lut_direct: segment longer than 8");
  LutTable t;
  for (std::size_t key = 0; key < kLutEntries; ++key) {
    double acc = 0.0;
    for (std::size_t k = 0; k < segment.size(); ++k) acc += ((key >> k) & 1u) ? segment[k] : -segment[k];
    t[key] = static_cast<float>(acc);
  }
  return t;
}

/// ceil(n / 8) tables over consecutive 8-element segments of x.
struct LutBank {
  std::size_t length = 0;
  std::vector<LutTable> tables;

  const LutTable& operator[](std::size_t g) const noexcept { return tables[g]; }
  std::size_t size() const noexcept { return tables.size(); }
};

inline LutBank build_luts(std::span<const float> x) {
  LutBank bank;
  bank.length = x.size();
  const std::size_t groups = (x.size() + kLutWidth - 1) / kLutWidth;
  bank.tables.reserve(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t begin = g * kLutWidth;
    bank.tables.push_back(build_lut(x.subspan(begin, std::min(kLutWidth, x.size() - begin))));
  }
  return bank;
}

enum class GemvMode { BlockWiseShared, ColumnWisePerPlane };

inline const char* to_string(GemvMode m) {
  return m == GemvMode::BlockWiseShared ? "blockwise-shared" : "columnwise-per-plane";
}

inline GemvMode parse_gemv_mode(const std::string& s) {
  if (s == "blockwise-shared" || s == "block" || s == "shared") return GemvMode::BlockWiseShared;
  if (s == "columnwise-per-plane" || s == "column" || s == "per-plane") return GemvMode::ColumnWisePerPlane;
  fail(ErrorKind::Validation, "unknown GEMV mode '" + s + "'");
}

/// Mode a grouping executes in: column scales must be folded into activations, row and
/// block scales are applied after the query.
inline GemvMode default_mode(const Grouping& g) {
  return g.kind == GroupingKind::ColumnWise ? GemvMode::ColumnWisePerPlane : GemvMode::BlockWiseShared;
}

/// Primitive operation counts of one or more GEMV calls.
struct GemvCounters {
  std::uint64_t lut_tables = 0;
  std::uint64_t lut_build_adds = 0;
  std::uint64_t queries = 0;
  std::uint64_t accumulate_adds = 0;
  std::uint64_t shifts = 0;
  std::uint64_t pot_combine_adds = 0;  // summing the K shifted terms of one scale
  std::uint64_t scale_mults = 0;       // f32-scale reference path only

  friend bool operator==(const GemvCounters&, const GemvCounters&) = default;
};

class PackedGemvPlan {
 public:
  PackedGemvPlan(const BcqWeight& weight, GemvMode mode) : weight_(&weight), mode_(mode) {
    weight.validate();
    const Grouping& g = weight.scales.grouping;
    if (mode == GemvMode::BlockWiseShared) {
      const bool ok = g.kind == GroupingKind::RowWise || (g.kind == GroupingKind::BlockWise && g.col_group == kLutWidth);
      if (!ok)
        fail(ErrorKind::Validation, std::string("BlockWiseShared needs row-wise or 8-column block-wise scales, got ") +
                                        to_string(g.kind));
    } else if (g.kind != GroupingKind::ColumnWise) {
      fail(ErrorKind::Validation, std::string("ColumnWisePerPlane needs column-wise scales, got ") + to_string(g.kind));
    }
  }

  explicit PackedGemvPlan(const BcqWeight& weight) : PackedGemvPlan(weight, default_mode(weight.scales.grouping)) {}

  GemvMode mode() const noexcept { return mode_; }
  const BcqWeight& weight() const noexcept { return *weight_; }

  /// Accumulation order: planes outer, LUT groups inner, rows independent.
  std::vector<float> gemv(std::span<const float> x, GemvCounters* counters = nullptr) const {
    const BcqWeight& w = *weight_;
    require(x.size() == w.cols, "gemv: x has length " + std::to_string(x.size()) + ", expected " + std::to_string(w.cols));
    GemvCounters local;
    std::vector<float> y = mode_ == GemvMode::BlockWiseShared ? shared(x, local) : per_plane(x, local);
    if (counters) {
      counters->lut_tables += local.lut_tables;
      counters->lut_build_adds += local.lut_build_adds;
      counters->queries += local.queries;
      counters->accumulate_adds += local.accumulate_adds;
      counters->shifts += local.shifts;
      counters->pot_combine_adds += local.pot_combine_adds;
      counters->scale_mults += local.scale_mults;
    }
    return y;
  }

 private:
  static void count_bank(const LutBank& bank, GemvCounters& c) {
    c.lut_tables += bank.size();
    c.lut_build_adds += bank.size() * (kLutEntries - 1);
  }

  std::vector<float> shared(std::span<const float> x, GemvCounters& c) const {
    const BcqWeight& w = *weight_;
    const GroupLayout layout = w.layout();
    const LutBank bank = build_luts(x);
    count_bank(bank, c);
    const std::size_t groups = bank.size();
    const bool pot = w.scales.is_pot();
    const auto terms = static_cast<std::uint64_t>(w.scales.pot_terms);
    std::vector<float> y(w.rows, 0.0f);
    for (std::size_t r = 0; r < w.rows; ++r) {
      float total = 0.0f;
      for (int i = 0; i < w.bits; ++i) {
        const BinaryPlane& plane = w.planes[i];
        float partial = 0.0f;
        for (std::size_t g = 0; g < groups; ++g) {
          const float v = bank[g][plane.key(r, g)];
          const std::size_t sg = layout.group_of(r, g * kLutWidth);
          float scaled;
          if (pot) {
            scaled = pot_apply(v, w.scales.pot_scale(sg, i));
            c.shifts += terms;
            c.pot_combine_adds += terms - 1;
          } else {
            scaled = v * w.scales.alpha(sg, i);
            ++c.scale_mults;
          }
          partial = g == 0 ? scaled : partial + scaled;
        }
        c.queries += groups;
        c.accumulate_adds += groups - 1;
        total = i == 0 ? partial : total + partial;
      }
      c.accumulate_adds += static_cast<std::uint64_t>(w.bits - 1);
      y[r] = total;
    }
    return y;
  }

  std::vector<float> per_plane(std::span<const float> x, GemvCounters& c) const {
    const BcqWeight& w = *weight_;
    const bool pot = w.scales.is_pot();
    const auto terms = static_cast<std::uint64_t>(w.scales.pot_terms);
    std::vector<LutBank> banks;
    banks.reserve(static_cast<std::size_t>(w.bits));
    std::vector<float> shifted(w.cols);
    for (int i = 0; i < w.bits; ++i) {
      for (std::size_t j = 0; j < w.cols; ++j) {
        if (pot) {
          shifted[j] = pot_apply(x[j], w.scales.pot_scale(j, i));
          c.shifts += terms;
          c.pot_combine_adds += terms - 1;
        } else {
          shifted[j] = x[j] * w.scales.alpha(j, i);
          ++c.scale_mults;
        }
      }
      banks.push_back(build_luts(shifted));
      count_bank(banks.back(), c);
    }
    const std::size_t groups = banks.front().size();
    std::vector<float> y(w.rows, 0.0f);
    for (std::size_t r = 0; r < w.rows; ++r) {
      float total = 0.0f;
      for (int i = 0; i < w.bits; ++i) {
        const BinaryPlane& plane = w.planes[i];
        float partial = 0.0f;
        for (std::size_t g = 0; g < groups; ++g) {
          const float v = banks[i][g][plane.key(r, g)];
          partial = g == 0 ? v : partial + v;
        }
        c.queries += groups;
        c.accumulate_adds += groups - 1;
        total = i == 0 ? partial : total + partial;
      }
      c.accumulate_adds += static_cast<std::uint64_t>(w.bits - 1);
      y[r] = total;
    }
    return y;
  }

  const BcqWeight* weight_;
  GemvMode mode_;
};

/// Dense y = W x, left-to-right f32 accumulation per row.
inline std::vector<float> gemv_dense_reference(const Matrix& w, std::span<const float> x) {
  require(x.size() == w.cols(), "gemv_dense_reference: shape mismatch");
  std::vector<float> y(w.rows(), 0.0f);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    float acc = 0.0f;
    const auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

/// Largest per-element deviation of y from the dense product W x (evaluated in double),
/// relative to the magnitude of the terms summed for that element:
/// |y_r - ref_r| / sum_c |W_rc x_c|. This equals the plain relative error when the row
/// has no cancellation and stays meaningful when ref_r is close to zero.
inline double max_relative_deviation(const Matrix& w, std::span<const float> x, std::span<const float> y) {
  require(x.size() == w.cols() && y.size() == w.rows(), "max_relative_deviation: shape mismatch");
  double worst = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double ref = 0.0, magnitude = 0.0;
    const auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double t = static_cast<double>(row[c]) * x[c];
      ref += t;
      magnitude += std::fabs(t);
    }
    const double err = std::fabs(static_cast<double>(y[r]) - ref);
    worst = std::max(worst, magnitude > 0.0 ? err / magnitude : err);
  }
  return worst;
}

/// Plain |y_r - ref_r| / |ref_r|; unbounded when a row cancels to near zero.
inline double max_pointwise_relative_deviation(const Matrix& w, std::span<const float> x, std::span<const float> y) {
  require(x.size() == w.cols() && y.size() == w.rows(), "max_pointwise_relative_deviation: shape mismatch");
  double worst = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double ref = 0.0;
    const auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) ref += static_cast<double>(row[c]) * x[c];
    const double err = std::fabs(static_cast<double>(y[r]) - ref);
    worst = std::max(worst, ref != 0.0 ? err / std::fabs(ref) : err);
  }
  return worst;
}

}  // namespace shiftadd
