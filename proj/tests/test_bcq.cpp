#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "shiftadd/bcq.hpp"
#include "shiftadd/bitplane.hpp"
#include "shiftadd/synth.hpp"

using namespace shiftadd;

namespace {

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = static_cast<float>(d(rng));
  return v;
}

double sq(double v) { return v * v; }

}  // namespace

TEST(BinaryPlane, PackUnpackAndPadding) {
  std::mt19937_64 rng(1);
  for (std::size_t cols : {1u, 7u, 8u, 9u, 17u, 64u}) {
    std::vector<std::int8_t> signs(5 * cols);
    for (auto& s : signs) s = (rng() & 1) ? 1 : -1;
    const BinaryPlane p = BinaryPlane::from_signs(5, cols, signs);
    EXPECT_EQ(p.unpack(), signs);
    EXPECT_TRUE(p.padding_clear());
    EXPECT_EQ(p.bytes().size(), 5 * ((cols + 7) / 8));
  }
}

TEST(BinaryPlane, KeyIsLsbFirst) {
  BinaryPlane p(1, 8);
  p.set(0, 0, true);
  p.set(0, 3, true);
  EXPECT_EQ(p.key(0, 0), 0b00001001);
  EXPECT_EQ(p.sign(0, 1), -1);
}

TEST(BinaryPlane, RejectsDirtyPaddingAndWrongLength) {
  EXPECT_THROW(BinaryPlane(1, 3, std::vector<std::uint8_t>{0xF0}), Error);
  EXPECT_THROW(BinaryPlane(2, 3, std::vector<std::uint8_t>{0x01}), Error);
  EXPECT_NO_THROW(BinaryPlane(1, 3, std::vector<std::uint8_t>{0x05}));
}

TEST(OneBit, Examples) {
  const std::vector<double> c{0.5, 0.5, 0.5, 0.5};
  auto f = binary_quantize_1bit(std::span<const double>(c));
  EXPECT_EQ(f.alpha, 0.5);
  EXPECT_EQ(f.signs, (std::vector<std::int8_t>{1, 1, 1, 1}));

  const std::vector<double> s{2.0, -2.0};
  f = binary_quantize_1bit(std::span<const double>(s));
  EXPECT_EQ(f.alpha, 2.0);
  EXPECT_EQ(f.signs, (std::vector<std::int8_t>{1, -1}));

  const std::vector<double> w{1.0, 2.0, -3.0, 0.5};
  f = binary_quantize_1bit(std::span<const double>(w));
  EXPECT_EQ(f.alpha, 1.625);
  EXPECT_EQ(f.signs, (std::vector<std::int8_t>{1, 1, -1, 1}));
  const double r = sq(1 - 1.625) + sq(2 - 1.625) + sq(-3 + 1.625) + sq(0.5 - 1.625);
  EXPECT_NEAR(r, oracle::brute_force_1bit(w), 1e-12);
}

TEST(OneBit, SignOfZeroIsPositive) {
  const std::vector<double> w{0.0, -1.0};
  const auto f = binary_quantize_1bit(std::span<const double>(w));
  EXPECT_EQ(f.signs[0], 1);
}

TEST(OneBit, OptimalAgainstBruteForce) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 12;
    const auto w = random_vector(n, rng);
    const auto f = binary_quantize_1bit(std::span<const double>(w));
    double r = 0.0;
    for (std::size_t j = 0; j < n; ++j) r += sq(w[j] - f.alpha * f.signs[j]);
    // alpha is rounded to f32; allow for that rounding.
    EXPECT_NEAR(r, oracle::brute_force_1bit(w), 1e-6 * (1.0 + r));
  }
}

TEST(Greedy, TwoBitHandExample) {
  const std::vector<double> w{1.0, 2.0, -3.0, 0.5};
  const BcqFit fit = greedy_init(std::span<const double>(w), 2);
  EXPECT_EQ(fit.alphas[0], 1.625);
  // r = [-0.625, 0.375, -1.375, -1.125]
  EXPECT_EQ(fit.codes[1], (std::vector<std::int8_t>{-1, 1, -1, -1}));
  EXPECT_EQ(fit.alphas[1], 0.875);
  const double r2 = sq(-0.625 + 0.875) + sq(0.375 - 0.875) + sq(-1.375 + 0.875) + sq(-1.125 + 0.875);
  EXPECT_NEAR(residual_norm(fit, w), std::sqrt(r2), 1e-12);
}

TEST(Greedy, ReducesToOneBitAndZeroInput) {
  std::mt19937_64 rng(3);
  const auto w = random_vector(16, rng);
  const BcqFit g = greedy_init(std::span<const double>(w), 1);
  const auto one = binary_quantize_1bit(std::span<const double>(w));
  EXPECT_EQ(g.alphas[0], one.alpha);
  EXPECT_EQ(g.codes[0], one.signs);

  const std::vector<double> z(8, 0.0);
  const BcqFit gz = greedy_init(std::span<const double>(z), 3);
  for (double a : gz.alphas) EXPECT_EQ(a, 0.0);
  EXPECT_EQ(residual_norm(gz, z), 0.0);
}

TEST(Greedy, ResidualNonIncreasingInBits) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto w = random_vector(32, rng);
    double prev = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    for (int q = 1; q <= 6; ++q) {
      const double r = residual_norm(greedy_init(std::span<const double>(w), q), w);
      EXPECT_LE(r, prev + 1e-9);
      prev = r;
    }
  }
}

TEST(Greedy, RejectsBadBits) {
  const std::vector<double> w{1.0};
  EXPECT_THROW(greedy_init(std::span<const double>(w), 0), Error);
  EXPECT_THROW(greedy_init(std::span<const double>(w), 9), Error);
}

TEST(LeastSquares, ScalarAndOrthogonal) {
  const std::vector<double> w{1.0, 2.0, -3.0, 0.5};
  const CodePlanes one{{1, 1, -1, 1}};
  EXPECT_NEAR(refit_scales_ls(one, w)[0], 6.5 / 4.0, 1e-7);

  const CodePlanes orth{{1, 1, -1, -1}, {1, -1, 1, -1}};
  const auto a = refit_scales_ls(orth, w);
  EXPECT_NEAR(a[0], (1 + 2 + 3 - 0.5) / 4.0, 1e-7);
  EXPECT_NEAR(a[1], (1 - 2 - 3 - 0.5) / 4.0, 1e-7);
}

TEST(LeastSquares, TwoBitMatchesCramer) {
  const std::vector<double> w{1.0, 2.0, -3.0, 0.5};
  const BcqFit g = greedy_init(std::span<const double>(w), 2);
  const auto a = refit_scales_ls(g.codes, w);
  double g00 = 0, g01 = 0, g11 = 0, r0 = 0, r1 = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    g00 += g.codes[0][j] * g.codes[0][j];
    g01 += g.codes[0][j] * g.codes[1][j];
    g11 += g.codes[1][j] * g.codes[1][j];
    r0 += g.codes[0][j] * w[j];
    r1 += g.codes[1][j] * w[j];
  }
  const double reg = 1e-8 * 4;
  const auto ref = oracle::cramer2(g00 + reg, g01, g01, g11 + reg, r0, r1);
  EXPECT_NEAR(a[0], ref[0], 1e-6);
  EXPECT_NEAR(a[1], ref[1], 1e-6);
  EXPECT_LE(residual_norm(a, g.codes, w), residual_norm(g, w) + 1e-9);
}

TEST(LeastSquares, DuplicatePlanesStaySolvable) {
  const std::vector<double> w{1.0, -1.0, 1.0};
  const CodePlanes dup{{1, -1, 1}, {1, -1, 1}};
  const auto a = refit_scales_ls(dup, w);
  EXPECT_NEAR(a[0] + a[1], 1.0, 1e-6);
}

TEST(CodeRefit, Examples) {
  const std::vector<double> a1{2.0};
  const std::vector<double> x{0.3};
  EXPECT_EQ(refit_codes_bs(a1, x)[0][0], 1);

  const std::vector<double> a2{1.0, 0.5};
  const std::vector<double> x2{0.7};
  const auto c = refit_codes_bs(a2, x2);
  EXPECT_EQ(c[0][0], 1);
  EXPECT_EQ(c[1][0], -1);

  const std::vector<double> tie{1.0};
  EXPECT_EQ(LevelSet(a2).nearest_value(1.0), 0.5);
  EXPECT_EQ(LevelSet(a2).nearest_value(0.0), -0.5);  // equal magnitude: negative level
  EXPECT_EQ(refit_codes_bs(a2, tie)[0][0], 1);
}

TEST(CodeRefit, ArgminOverAllLevels) {
  std::mt19937_64 rng(6);
  for (int q = 1; q <= 4; ++q) {
    for (int t = 0; t < 20; ++t) {
      auto alphas = random_vector(static_cast<std::size_t>(q), rng);
      const auto w = random_vector(64, rng, 2.0);
      const auto codes = refit_codes_bs(alphas, w);
      const auto lv = oracle::levels(alphas);
      for (std::size_t j = 0; j < w.size(); ++j) {
        double chosen = 0.0;
        for (int i = 0; i < q; ++i) chosen += alphas[i] * codes[i][j];
        double best = 1e300;
        for (double l : lv) best = std::min(best, std::fabs(w[j] - l));
        EXPECT_NEAR(std::fabs(w[j] - chosen), best, 1e-12);
      }
    }
  }
}

TEST(Alternating, ZeroCyclesIsGreedy) {
  std::mt19937_64 rng(7);
  const auto w = random_vector(40, rng);
  const auto g = greedy_init(std::span<const double>(w), 3);
  const auto r = alternating_bcq(std::span<const double>(w), 3, 0);
  EXPECT_EQ(r.fit.alphas, g.alphas);
  EXPECT_EQ(r.fit.codes, g.codes);
}

TEST(Alternating, MonotoneWithoutPot) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto w = random_vector(64, rng);
    const auto r = alternating_bcq(std::span<const double>(w), 3, 15);
    ASSERT_EQ(r.residual_trace.size(), 16u);
    for (std::size_t k = 1; k < r.residual_trace.size(); ++k)
      EXPECT_LE(r.residual_trace[k], r.residual_trace[k - 1] + 1e-9);
    EXPECT_LE(r.residual, r.greedy_residual + 1e-9);
  }
}

TEST(Alternating, RecoversRepresentableLevels) {
  // Levels of alphas {0.75, 0.25}.
  std::vector<double> w;
  for (int rep = 0; rep < 5; ++rep)
    for (double l : {-1.0, -0.5, 0.5, 1.0}) w.push_back(l);
  const auto r = alternating_bcq(std::span<const double>(w), 2, 15);
  EXPECT_NEAR(r.residual, 0.0, 1e-6);
}

TEST(Alternating, PotNeverWorseThanProjectedGreedy) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 100; ++t) {
    const auto w = random_vector(64, rng);
    for (bool end_only : {false, true}) {
      const auto r = alternating_bcq(std::span<const double>(w), 3, 15, {true, 2, end_only});
      EXPECT_LE(r.residual, r.projected_greedy_residual + 1e-12);
      ASSERT_EQ(r.pot.size(), 3u);
      for (int i = 0; i < 3; ++i) EXPECT_EQ(static_cast<double>(pot_value(r.pot[i])), r.fit.alphas[i]);
      EXPECT_NEAR(residual_norm(r.fit, w), r.residual, 1e-12);
    }
  }
}

TEST(Dequantize, Examples) {
  BcqWeight w = make_empty_bcq(3, 5, 1, Grouping::row_wise(), 0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) w.planes[0].set(r, c, true);
  for (auto& v : w.scales.values) v = 1.0f;
  const Matrix d = dequantize(w);
  for (float v : d.values()) EXPECT_EQ(v, 1.0f);

  BcqWeight p = make_empty_bcq(2, 2, 1, Grouping::row_wise(), 1);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) p.planes[0].set(r, c, true);
  for (std::size_t k = 0; k < p.scales.pot.size(); ++k) {
    p.scales.pot[k].terms[0] = {1, 3};
    p.scales.values[k] = pot_value(p.scales.pot[k]);
  }
  p.validate();
  const Matrix dp = dequantize(p);
  for (float v : dp.values()) EXPECT_EQ(v, 8.0f);
}

TEST(Dequantize, MatchesReportedResidual) {
  synth::Rng rng(10);
  const Matrix m = synth::gaussian_matrix(12, 20, rng);
  for (const Grouping& g : {Grouping::row_wise(), Grouping::column_wise(), Grouping::block_wise()}) {
    const BcqWeight q = quantize_groups(m, 3, g, 15);
    const Matrix d = dequantize(q);
    const GroupLayout layout = q.layout();
    double total = 0.0;
    for (std::size_t gi = 0; gi < layout.count(); ++gi) {
      std::vector<double> v;
      for (const auto& [r, c] : group_members(layout, gi)) v.push_back(m(r, c));
      total += sq(alternating_bcq(std::span<const double>(v), 3, 15).residual);
    }
    double fro = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) fro += sq(static_cast<double>(m.values()[k]) - d.values()[k]);
    EXPECT_NEAR(std::sqrt(fro), std::sqrt(total), 1e-6 * std::sqrt(total));
  }
}

TEST(GroupLayout, BlockRemainders) {
  const GroupLayout l(Grouping::block_wise(), 19, 21);
  EXPECT_EQ(l.row_group_count(), 8u);
  EXPECT_EQ(l.col_group_count(), 3u);
  EXPECT_EQ(l.count(), 24u);
  EXPECT_EQ(l.row_group_end(7), 19u);  // last row group absorbs the remainder
  EXPECT_EQ(l.row_group_begin(7), 14u);
  EXPECT_EQ(l.col_group_end(2), 21u);
  std::vector<int> hits(19 * 21, 0);
  for (std::size_t g = 0; g < l.count(); ++g)
    l.for_each_member(g, [&](std::size_t r, std::size_t c) {
      ++hits[r * 21 + c];
      EXPECT_EQ(l.group_of(r, c), g);
    });
  for (int h : hits) EXPECT_EQ(h, 1);

  const GroupLayout small(Grouping::block_wise(), 3, 8);
  EXPECT_EQ(small.row_group_count(), 3u);
}

TEST(BcqWeight, ValidateCatchesInconsistency) {
  BcqWeight w = make_empty_bcq(2, 3, 2, Grouping::row_wise(), 0);
  EXPECT_NO_THROW(w.validate());
  w.scales.values.pop_back();
  EXPECT_THROW(w.validate(), Error);
}
