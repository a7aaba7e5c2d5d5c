#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "shiftadd/cost_model.hpp"
#include "shiftadd/lut_engine.hpp"
#include "shiftadd/synth.hpp"

using namespace shiftadd;

namespace {

std::vector<float> random_vector(std::size_t n, synth::Rng& rng) {
  std::vector<float> x(n);
  for (float& v : x) v = static_cast<float>(rng.normal());
  return x;
}

BcqWeight weight_for(GemvMode mode, std::size_t m, std::size_t n, int q, int k, synth::Rng& rng, bool rows = false) {
  const Grouping g = mode == GemvMode::ColumnWisePerPlane ? Grouping::column_wise()
                     : rows                               ? Grouping::row_wise()
                                                          : Grouping::block_wise();
  return synth::random_bcq(m, n, q, g, k, rng);
}

}  // namespace

TEST(BuildLut, SingleLane) {
  const std::vector<float> x{1, 0, 0, 0, 0, 0, 0, 0};
  const LutTable t = build_lut(x);
  for (std::size_t key = 0; key < kLutEntries; ++key) EXPECT_EQ(t[key], (key & 1u) ? 1.0f : -1.0f);
}

TEST(BuildLut, ZerosAndPadding) {
  const LutTable z = build_lut(std::vector<float>(8, 0.0f));
  for (float v : z) EXPECT_EQ(v, 0.0f);
  // A 3-lane segment: bits 3..7 are padding and must not change the entry.
  const std::vector<float> x{0.5f, -2.0f, 1.25f};
  const LutTable t = build_lut(x);
  for (std::size_t key = 0; key < kLutEntries; ++key) EXPECT_EQ(t[key], t[key & 7u]) << key;
  EXPECT_EQ(t[0b101], 0.5f + 2.0f + 1.25f);
}

TEST(BuildLut, IncrementalMatchesDirectSums) {
  synth::Rng rng(40);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> x(1 + rng.index(8));
    for (float& v : x) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const LutTable inc = build_lut(x), direct = build_lut_direct(x);
    for (std::size_t key = 0; key < kLutEntries; ++key) {
      double ref = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) ref += ((key >> k) & 1u) ? x[k] : -x[k];
      EXPECT_NEAR(inc[key], ref, 1e-6);
      EXPECT_NEAR(direct[key], ref, 1e-6);
    }
  }
  EXPECT_THROW(build_lut(std::vector<float>(9, 1.0f)), Error);
}

TEST(BuildLut, RoundingBoundAtAnyScale) {
  // Each entry is at most 8 f32 additions away from the exact sum.
  synth::Rng rng(50);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::exp2(rng.uniform(-20.0, 20.0));
    std::vector<float> x(8);
    for (float& v : x) v = static_cast<float>(scale * rng.normal());
    double mag = 0.0;
    for (float v : x) mag += std::fabs(v);
    const LutTable inc = build_lut(x);
    for (std::size_t key = 0; key < kLutEntries; ++key) {
      double ref = 0.0;
      for (std::size_t k = 0; k < 8; ++k) ref += ((key >> k) & 1u) ? x[k] : -x[k];
      EXPECT_LE(std::fabs(inc[key] - ref), 16.0 * std::ldexp(1.0, -24) * mag);
    }
  }
}

TEST(BuildLuts, OneTablePerEightColumns) {
  synth::Rng rng(41);
  for (std::size_t n : {1u, 7u, 8u, 9u, 64u, 130u}) {
    const LutBank bank = build_luts(random_vector(n, rng));
    EXPECT_EQ(bank.size(), (n + 7) / 8);
    EXPECT_EQ(bank.length, n);
  }
}

TEST(Gemv, AllOnesPlaneSumsInput) {
  BcqWeight w = make_empty_bcq(5, 19, 1, Grouping::row_wise(), 0);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 19; ++c) w.planes[0].set(r, c, true);
  for (float& a : w.scales.values) a = 1.0f;
  synth::Rng rng(42);
  const std::vector<float> x = random_vector(19, rng);
  double sum = 0.0;
  for (float v : x) sum += v;
  const std::vector<float> y = PackedGemvPlan(w).gemv(x);
  for (float v : y) EXPECT_NEAR(v, sum, 1e-5);
}

TEST(Gemv, BasisVectorSelectsColumn) {
  synth::Rng rng(43);
  for (GemvMode mode : {GemvMode::BlockWiseShared, GemvMode::ColumnWisePerPlane})
    for (int k : {0, 1, 2}) {
      const BcqWeight w = weight_for(mode, 13, 27, 3, k, rng);
      const Matrix d = dequantize(w);
      const PackedGemvPlan plan(w, mode);
      for (std::size_t j = 0; j < 27; ++j) {
        std::vector<float> e(27, 0.0f);
        e[j] = 1.0f;
        const std::vector<float> y = plan.gemv(e);
        for (std::size_t r = 0; r < 13; ++r) EXPECT_NEAR(y[r], d(r, j), 1e-5 * (1.0 + std::fabs(d(r, j))));
      }
    }
}

TEST(Gemv, MatchesDenseGemvInEveryMode) {
  synth::Rng rng(44);
  for (GemvMode mode : {GemvMode::BlockWiseShared, GemvMode::ColumnWisePerPlane})
    for (bool rows : {false, true})
      for (int k : {0, 1, 2, 3}) {
        if (rows && mode == GemvMode::ColumnWisePerPlane) continue;
        const BcqWeight w = weight_for(mode, 64, 128, 3, k, rng, rows);
        const Matrix d = dequantize(w);
        const PackedGemvPlan plan(w, mode);
        for (int t = 0; t < 4; ++t) {
          const std::vector<float> x = random_vector(128, rng);
          const std::vector<float> y = plan.gemv(x);
          EXPECT_LE(max_relative_deviation(d, x, y), 1e-4);
          const std::vector<double> ref = oracle::gemv(d.values(), 64, 128, x);
          for (std::size_t r = 0; r < 64; ++r) {
            double mag = 0.0;
            for (std::size_t c = 0; c < 128; ++c) mag += std::fabs(double(d(r, c)) * x[c]);
            EXPECT_LE(std::fabs(y[r] - ref[r]), 1e-4 * mag);
          }
        }
      }
}

TEST(Gemv, RemainderColumnsAndRows) {
  synth::Rng rng(45);
  for (std::size_t n : {1u, 5u, 13u, 31u})
    for (std::size_t m : {1u, 3u, 11u}) {
      for (GemvMode mode : {GemvMode::BlockWiseShared, GemvMode::ColumnWisePerPlane}) {
        const BcqWeight w = weight_for(mode, m, n, 2, 2, rng);
        const std::vector<float> x = random_vector(n, rng);
        EXPECT_LE(max_relative_deviation(dequantize(w), x, PackedGemvPlan(w, mode).gemv(x)), 1e-4);
      }
    }
}

TEST(Gemv, CountersMatchClosedForm) {
  synth::Rng rng(46);
  for (GemvMode mode : {GemvMode::BlockWiseShared, GemvMode::ColumnWisePerPlane})
    for (int k : {0, 1, 2, 3})
      for (auto [m, n] : {std::pair<std::size_t, std::size_t>{64, 128}, {17, 29}, {1, 1}}) {
        const BcqWeight w = weight_for(mode, m, n, 3, k, rng);
        GemvCounters c;
        PackedGemvPlan(w, mode).gemv(random_vector(n, rng), &c);
        EXPECT_EQ(c, expected_counters(m, n, 3, k, mode)) << to_string(mode) << " k=" << k << " " << m << "x" << n;
      }
  const BcqWeight w = weight_for(GemvMode::BlockWiseShared, 64, 128, 3, 2, rng);
  GemvCounters c;
  PackedGemvPlan(w).gemv(random_vector(128, rng), &c);
  EXPECT_EQ(c.queries, 3u * 64u * 16u);
  EXPECT_EQ(c.lut_tables, 16u);
}

TEST(Gemv, ModeMustMatchGrouping) {
  synth::Rng rng(47);
  const BcqWeight col = synth::random_bcq(8, 16, 2, Grouping::column_wise(), 2, rng);
  const BcqWeight row = synth::random_bcq(8, 16, 2, Grouping::row_wise(), 2, rng);
  const BcqWeight wide = synth::random_bcq(8, 16, 2, Grouping::block_wise(16, 2), 2, rng);
  EXPECT_THROW(PackedGemvPlan(col, GemvMode::BlockWiseShared), Error);
  EXPECT_THROW(PackedGemvPlan(row, GemvMode::ColumnWisePerPlane), Error);
  EXPECT_THROW(PackedGemvPlan(wide, GemvMode::BlockWiseShared), Error);
  EXPECT_EQ(PackedGemvPlan(col).mode(), GemvMode::ColumnWisePerPlane);
  EXPECT_EQ(PackedGemvPlan(row).mode(), GemvMode::BlockWiseShared);
  EXPECT_THROW(PackedGemvPlan(row).gemv(std::vector<float>(15, 1.0f)), Error);
}

TEST(Gemv, DeterministicAcrossCalls) {
  synth::Rng rng(48);
  const BcqWeight w = synth::random_bcq(32, 40, 4, Grouping::block_wise(), 3, rng);
  const std::vector<float> x = random_vector(40, rng);
  const PackedGemvPlan plan(w);
  EXPECT_EQ(plan.gemv(x), plan.gemv(x));
}

TEST(DenseReference, Examples) {
  Matrix eye(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0f;
  const std::vector<float> x{1.5f, -2.0f, 0.25f, 8.0f};
  EXPECT_EQ(gemv_dense_reference(eye, x), x);
  for (float v : gemv_dense_reference(Matrix(3, 4), x)) EXPECT_EQ(v, 0.0f);
  synth::Rng rng(49);
  const Matrix w = synth::gaussian_matrix(20, 50, rng);
  const std::vector<float> xr = random_vector(50, rng);
  const std::vector<float> y = gemv_dense_reference(w, xr);
  for (std::size_t r = 0; r < 20; ++r) {
    double backwards = 0.0;
    for (std::size_t c = 50; c-- > 0;) backwards += double(w(r, c)) * xr[c];
    EXPECT_NEAR(y[r], backwards, 1e-5 * (1.0 + std::fabs(backwards)));
  }
  EXPECT_THROW(gemv_dense_reference(w, x), Error);
}

TEST(Deviation, ComponentwiseIgnoresCancellation) {
  // Row sums to ~0 through cancellation; the pointwise metric explodes, the componentwise one does not.
  Matrix w(1, 2, std::vector<float>{1.0f, -0.99999994f});
  const std::vector<float> x{1.0f, 1.0f};
  const std::vector<float> y{1e-6f};
  EXPECT_LT(max_relative_deviation(w, x, y), 1e-6);
  EXPECT_GT(max_pointwise_relative_deviation(w, x, y), 1.0);
}
