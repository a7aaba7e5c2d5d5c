#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <limits>
#include <random>

#include "shiftadd/pot_scale.hpp"

using namespace shiftadd;

namespace {

PotScale scale_of(std::initializer_list<std::pair<int, int>> terms) {
  PotScale s;
  for (auto [sign, p] : terms) s.terms.push_back({static_cast<std::int8_t>(sign), static_cast<std::int8_t>(p)});
  return s;
}

// Scalar greedy evaluated directly on doubles.
std::vector<std::pair<int, int>> greedy_terms(double alpha, int k) {
  std::vector<std::pair<int, int>> out;
  double r = alpha;
  for (int i = 0; i < k && r != 0.0; ++i) {
    const int p = static_cast<int>(std::round(std::log2(std::fabs(r))));
    const int s = r < 0 ? -1 : 1;
    out.emplace_back(s, p);
    r -= s * std::ldexp(1.0, p);
  }
  return out;
}

}  // namespace

TEST(PotRound, ExactPowersAndRounding) {
  auto r = pot_round(4.0);
  EXPECT_EQ(r.sign, 1);
  EXPECT_EQ(r.exponent, 2);
  r = pot_round(3.0);
  EXPECT_EQ(r.sign, 1);
  EXPECT_EQ(r.exponent, 2);
  r = pot_round(-0.25);
  EXPECT_EQ(r.sign, -1);
  EXPECT_EQ(r.exponent, -2);
  EXPECT_FALSE(r.clamped);
}

TEST(PotRound, ZeroTakesZeroPath) {
  const auto r = pot_round(0.0);
  EXPECT_TRUE(r.zero);
  EXPECT_EQ(r.sign, 1);
  const PotScale s = additive_pot(0.0, 2);
  EXPECT_TRUE(s.zero_flag());
  EXPECT_EQ(pot_value(s), 0.0f);
}

TEST(PotRound, ClampsToNormalRange) {
  auto r = pot_round(1e-45);
  EXPECT_EQ(r.exponent, kMinPotExponent);
  EXPECT_TRUE(r.clamped);
  r = pot_round(1e300);
  EXPECT_EQ(r.exponent, kMaxPotExponent);
  EXPECT_TRUE(r.clamped);
  PotStats stats;
  additive_pot(1e-45, 2, &stats);
  EXPECT_GE(stats.clamped, 1u);
}

TEST(PotRound, RejectsNonFinite) {
  EXPECT_THROW(pot_round(std::numeric_limits<double>::infinity()), Error);
  EXPECT_THROW(pot_round(std::nan("")), Error);
  try {
    pot_round(std::nan(""));
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
  }
}

TEST(AdditivePot, Examples) {
  EXPECT_EQ(pot_value(additive_pot(4.0, 1)), 4.0f);
  const PotScale three = additive_pot(3.0, 2);
  ASSERT_EQ(three.terms.size(), 2u);
  EXPECT_EQ(three.terms[0].sign, 1);
  EXPECT_EQ(three.terms[0].exponent, 2);
  EXPECT_EQ(three.terms[1].sign, -1);
  EXPECT_EQ(three.terms[1].exponent, 0);
  EXPECT_EQ(pot_value(three), 3.0f);
}

TEST(AdditivePot, ThreeTermsOfOnePointSixTwoFive) {
  // 1.625 -> 2, then -0.375 -> -0.5, then 0.125 -> +0.125.
  const PotScale s = additive_pot(1.625, 3);
  const auto expected = greedy_terms(1.625, 3);
  ASSERT_EQ(expected.size(), 3u);
  EXPECT_EQ(expected[0], std::make_pair(1, 1));
  EXPECT_EQ(expected[1], std::make_pair(-1, -1));
  EXPECT_EQ(expected[2], std::make_pair(1, -3));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(s.terms[k].sign, expected[k].first);
    EXPECT_EQ(s.terms[k].exponent, expected[k].second);
  }
  EXPECT_EQ(pot_value_exact(s), 1.625);
  double prev = 1.625;
  for (int k = 1; k <= 3; ++k) {
    const double r = std::fabs(1.625 - pot_value_exact(additive_pot(1.625, k)));
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(AdditivePot, MatchesScalarGreedyAndResidualShrinks) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> mag(-12.0, 6.0);
  for (int t = 0; t < 2000; ++t) {
    const double a = (rng() & 1 ? -1.0 : 1.0) * std::exp2(mag(rng));
    double prev = std::fabs(a);
    for (int k = 1; k <= 4; ++k) {
      const PotScale s = additive_pot(a, k);
      const auto ref = greedy_terms(a, k);
      for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_EQ(s.terms[i].sign, ref[i].first);
        EXPECT_EQ(s.terms[i].exponent, ref[i].second);
      }
      const double r = std::fabs(a - pot_value_exact(s));
      EXPECT_LE(r, prev);
      prev = r;
    }
  }
}

TEST(AdditivePot, PowerOfTwoIsOneExactTerm) {
  for (int p = -20; p <= 20; ++p) {
    const double a = -std::ldexp(1.0, p);
    const PotScale s = additive_pot(a, 3);
    EXPECT_EQ(pot_value_exact(s), a);
    EXPECT_EQ(s.terms[1].sign, 0);
    EXPECT_EQ(s.terms[2].sign, 0);
  }
}

TEST(AdditivePot, IdempotentOnItsOwnValue) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 30.0);
  for (int t = 0; t < 500; ++t) {
    const PotScale s = additive_pot(u(rng), 2);
    const PotScale again = additive_pot(pot_value_exact(s), 2);
    EXPECT_EQ(pot_value_exact(again), pot_value_exact(s));
  }
}

TEST(AdditivePot, RejectsBadTermCount) {
  EXPECT_THROW(additive_pot(1.0, 0), Error);
  EXPECT_THROW(additive_pot(1.0, 17), Error);
}

TEST(PotValue, Examples) {
  EXPECT_EQ(pot_value(scale_of({{1, 3}})), 8.0f);
  EXPECT_EQ(pot_value(scale_of({{1, 2}, {-1, 0}})), 3.0f);
  EXPECT_EQ(pot_value(scale_of({{0, 0}, {0, 0}})), 0.0f);
}

TEST(ShiftMultiply, Examples) {
  EXPECT_EQ(shift_multiply(1.5f, 1, 3), 12.0f);
  EXPECT_EQ(shift_multiply(1.5f, -1, 3), -12.0f);
  const float x = 0.123456789f;
  EXPECT_EQ(std::bit_cast<std::uint32_t>(shift_multiply(x, 1, 0)), std::bit_cast<std::uint32_t>(x));
  EXPECT_EQ(shift_multiply(x, 0, 5), 0.0f);
}

TEST(ShiftMultiply, FallbackCases) {
  const float tiny = std::numeric_limits<float>::denorm_min();
  EXPECT_FALSE(shift_fast_path(tiny, 3));
  EXPECT_EQ(shift_multiply(tiny, 1, 3), tiny * 8.0f);
  EXPECT_FALSE(shift_fast_path(0.0f, 1));
  EXPECT_EQ(shift_multiply(0.0f, -1, 4), -0.0f);
  EXPECT_FALSE(shift_fast_path(std::numeric_limits<float>::max(), 1));
  EXPECT_TRUE(std::isinf(shift_multiply(std::numeric_limits<float>::max(), 1, 1)));
  EXPECT_FALSE(shift_fast_path(std::numeric_limits<float>::min(), -1));
  EXPECT_EQ(shift_multiply(std::numeric_limits<float>::min(), 1, -1), std::numeric_limits<float>::min() / 2.0f);
  EXPECT_TRUE(std::isnan(shift_multiply(std::nanf(""), 1, 2)));
}

TEST(ShiftMultiply, RandomizedMatchesProduct) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::uint32_t> bits;
  std::uniform_int_distribution<int> exps(-20, 20);
  for (int t = 0; t < 200000; ++t) {
    const float x = std::bit_cast<float>(bits(rng));
    if (!std::isfinite(x)) continue;
    const int p = exps(rng);
    const int s = (t & 1) ? 1 : -1;
    const float expected = static_cast<float>(static_cast<double>(x) * s * std::ldexp(1.0, p));
    const float got = shift_multiply(x, s, p);
    ASSERT_EQ(std::bit_cast<std::uint32_t>(got), std::bit_cast<std::uint32_t>(expected)) << x << " " << p;
  }
}

TEST(PotApply, SumsShiftedTerms) {
  const PotScale s = scale_of({{1, 2}, {-1, 0}});
  EXPECT_EQ(pot_apply(2.5f, s), 7.5f);
}
