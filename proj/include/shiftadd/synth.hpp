#pragma once

// Seeded synthetic layers and calibration data. Everything is driven by mt19937_64 and
// hand-rolled transforms of its raw output, so results do not depend on the standard
// library's distribution implementations.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "shiftadd/bcq.hpp"
#include "shiftadd/matrix.hpp"
#include "shiftadd/pot_scale.hpp"
#include "shiftadd/tensor_store.hpp"

namespace shiftadd::synth {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  int integer(int lo, int hi) { return lo + static_cast<int>(index(static_cast<std::size_t>(hi - lo + 1))); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Student-t with integer degrees of freedom, scaled to unit variance when df > 2.
  double student_t(int df) {
    double chi = 0.0;
    for (int k = 0; k < df; ++k) {
      const double z = normal();
      chi += z * z;
    }
    const double t = normal() / std::sqrt(chi / df);
    return df > 2 ? t * std::sqrt((df - 2.0) / df) : t;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (float& v : m.values()) v = static_cast<float>(scale * rng.normal());
  return m;
}

inline Matrix student_matrix(std::size_t rows, std::size_t cols, int df, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (float& v : m.values()) v = static_cast<float>(scale * rng.student_t(df));
  return m;
}

/// Calibration inputs [n, s] with AR(1) correlation rho between neighbouring channels and
/// log-uniform per-channel magnitudes in [1/spread, spread].
inline Matrix correlated_inputs(std::size_t n, std::size_t s, Rng& rng, double rho = 0.8, double spread = 4.0) {
  std::vector<double> channel(n);
  for (auto& c : channel) c = std::exp(rng.uniform(-std::log(spread), std::log(spread)));
  Matrix x(n, s);
  const double innovation = std::sqrt(1.0 - rho * rho);
  for (std::size_t t = 0; t < s; ++t) {
    double prev = rng.normal();
    for (std::size_t j = 0; j < n; ++j) {
      if (j > 0) prev = rho * prev + innovation * rng.normal();
      x(j, t) = static_cast<float>(channel[j] * prev);
    }
  }
  return x;
}

struct SyntheticLayer {
  std::string name;
  Matrix weight;  // [m, n]
  Matrix inputs;  // [n, s]
};

inline SyntheticLayer correlated_layer(std::string name, std::size_t m, std::size_t n, std::size_t s, Rng& rng) {
  SyntheticLayer layer{std::move(name), gaussian_matrix(m, n, rng, 1.0 / std::sqrt(static_cast<double>(n))), {}};
  layer.inputs = correlated_inputs(n, s, rng);
  return layer;
}

/// Layers whose magnitude and tail weight vary, for checking that the sensitivity
/// criterion ranks layers like their measured reparameterization error.
inline std::vector<SyntheticLayer> sensitivity_suite(std::size_t layers, std::size_t m, std::size_t n, std::size_t s,
                                                     std::uint64_t seed) {
  Rng rng(seed);
  static constexpr int kDf[] = {3, 4, 5, 8, 30};
  std::vector<SyntheticLayer> out;
  out.reserve(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    const double scale = std::exp(rng.uniform(-1.5, 1.5)) / std::sqrt(static_cast<double>(n));
    const int df = kDf[rng.index(std::size(kDf))];
    std::string name = "layer." + std::string(i < 10 ? "0" : "") + std::to_string(i);
    out.push_back({std::move(name), student_matrix(m, n, df, rng, scale), correlated_inputs(n, s, rng)});
  }
  return out;
}

/// Small model used by the CLI smoke and determinism runs. Shapes include an input width
/// that is not a multiple of 8 and a row count that is not a multiple of 8.
inline std::vector<SyntheticLayer> toy_suite(std::uint64_t seed) {
  Rng rng(seed);
  struct Shape {
    const char* name;
    std::size_t m, n;
  };
  static constexpr Shape kShapes[] = {
      {"blocks.0.attn.q_proj", 32, 32}, {"blocks.0.attn.out_proj", 32, 32},
      {"blocks.0.mlp.fc1", 64, 32},     {"blocks.0.mlp.fc2", 32, 64},
      {"blocks.1.attn.q_proj", 36, 44}, {"blocks.1.mlp.fc2", 40, 72},
  };
  std::vector<SyntheticLayer> out;
  for (const auto& s : kShapes) out.push_back(correlated_layer(s.name, s.m, s.n, 64, rng));
  return out;
}

inline TensorFile weights_of(const std::vector<SyntheticLayer>& layers) {
  TensorFile tf;
  for (const auto& l : layers) tf.entries.push_back({l.name, l.weight});
  return tf;
}

inline CalibrationSet calibration_of(const std::vector<SyntheticLayer>& layers) {
  CalibrationSet cs;
  for (const auto& l : layers) cs.layers[l.name].push_back(l.inputs);
  return cs;
}

/// Random packed weight with uniformly random planes; scales are f32 in [0.05, 1.05)
/// or K-term additive PoT of such values.
inline BcqWeight random_bcq(std::size_t rows, std::size_t cols, int bits, const Grouping& grouping, int pot_terms,
                            Rng& rng) {
  BcqWeight w = make_empty_bcq(rows, cols, bits, grouping, pot_terms);
  for (auto& plane : w.planes)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) plane.set(r, c, (rng.bits() >> 63) != 0);
  for (std::size_t k = 0; k < w.scales.values.size(); ++k) {
    const double a = rng.uniform(0.05, 1.05);
    if (pot_terms > 0) {
      w.scales.pot[k] = additive_pot(a, pot_terms);
      w.scales.values[k] = pot_value(w.scales.pot[k]);
    } else {
      w.scales.values[k] = static_cast<float>(a);
    }
  }
  return w;
}

}  // namespace shiftadd::synth
