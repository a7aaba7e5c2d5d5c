#pragma once

// Additive power-of-two scaling factors and the exponent-field "shift".

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "shiftadd/error.hpp"

namespace shiftadd {

inline constexpr int kMinPotExponent = -126;
inline constexpr int kMaxPotExponent = 127;
inline constexpr int kDefaultPotTerms = 2;

/// One signed power of two. sign == 0 marks an inactive term (contributes 0); this
/// happens once the greedy residual reaches exactly zero before K terms are used.
struct PotTerm {
  std::int8_t sign = 0;
  std::int8_t exponent = 0;

  double value() const noexcept { return sign == 0 ? 0.0 : sign * std::ldexp(1.0, exponent); }
  friend bool operator==(const PotTerm&, const PotTerm&) = default;
};

/// sum_k sign_k * 2^P_k with a fixed number of terms K.
struct PotScale {
  std::vector<PotTerm> terms;

  bool zero_flag() const noexcept {
    for (const auto& t : terms)
      if (t.sign != 0) return false;
    return true;
  }
  friend bool operator==(const PotScale&, const PotScale&) = default;
};

struct PotRounding {
  int sign = 1;
  int exponent = 0;
  bool zero = false;
  bool clamped = false;
};

/// sign(alpha) * 2^round(log2 |alpha|), exponent clamped to the normal f32 range.
inline PotRounding pot_round(double alpha) {
  if (!std::isfinite(alpha)) fail(ErrorKind::Validation, "pot_round: non-finite scale");
  PotRounding out;
  out.sign = alpha < 0.0 ? -1 : 1;
  if (alpha == 0.0) {
    out.zero = true;
    out.exponent = 0;
    return out;
  }
  double p = std::round(std::log2(std::fabs(alpha)));
  if (p < kMinPotExponent) {
    p = kMinPotExponent;
    out.clamped = true;
  } else if (p > kMaxPotExponent) {
    p = kMaxPotExponent;
    out.clamped = true;
  }
  out.exponent = static_cast<int>(p);
  return out;
}

struct PotStats {
  std::size_t clamped = 0;
};

/// Greedy K-term approximation: each term rounds the residual left by the previous ones.
/// A term that would not shrink the residual (only possible after clamping) stays inactive.
inline PotScale additive_pot(double alpha, int terms, PotStats* stats = nullptr) {
  require(terms >= 1 && terms <= 16, "additive_pot: K must be in 1..16");
  PotScale out;
  out.terms.resize(static_cast<std::size_t>(terms));
  double residual = alpha;
  for (auto& term : out.terms) {
    const PotRounding r = pot_round(residual);
    if (r.zero) break;
    if (r.clamped && stats) ++stats->clamped;
    const double v = r.sign * std::ldexp(1.0, r.exponent);
    if (std::fabs(residual - v) > std::fabs(residual)) break;
    term.sign = static_cast<std::int8_t>(r.sign);
    term.exponent = static_cast<std::int8_t>(r.exponent);
    residual -= v;
  }
  return out;
}

inline double pot_value_exact(const PotScale& s) {
  double v = 0.0;
  for (const auto& t : s.terms) v += t.value();
  return v;
}

inline float pot_value(const PotScale& s) { return static_cast<float>(pot_value_exact(s)); }

/// True when x * 2^P can be computed by adding P to the biased exponent of x.
inline bool shift_fast_path(float x, int exponent) noexcept {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  const int biased = static_cast<int>((bits >> 23) & 0xFFu);
  if (biased == 0 || biased == 0xFF) return false;
  const int shifted = biased + exponent;
  return shifted >= 1 && shifted <= 0xFE;
}

/// sign * x * 2^P. Normal inputs with a normal result are handled by integer addition on
/// the exponent field plus a sign-bit XOR; everything else falls back to multiplication.
inline float shift_multiply(float x, int sign, int exponent) noexcept {
  if (sign == 0) return 0.0f;
  if (shift_fast_path(x, exponent)) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    bits += static_cast<std::uint32_t>(exponent) << 23;
    if (sign < 0) bits ^= 0x80000000u;
    return std::bit_cast<float>(bits);
  }
  const float scaled = static_cast<float>(static_cast<double>(x) * std::ldexp(1.0, exponent));
  return sign < 0 ? -scaled : scaled;
}

/// Applies every term of a PotScale to x and sums: sum_k shift_multiply(x, s_k, P_k).
inline float pot_apply(float x, const PotScale& s) noexcept {
  float acc = 0.0f;
  bool first = true;
  for (const auto& t : s.terms) {
    const float v = shift_multiply(x, t.sign, t.exponent);
    acc = first ? v : acc + v;
    first = false;
  }
  return acc;
}

}  // namespace shiftadd
