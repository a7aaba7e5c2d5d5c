#pragma once

// Operation counting and energy/memory accounting for dense vs shift-and-add GEMV.
//
// The default table holds 45nm per-operation energy (pJ) and area (um^2). Counting
// conventions for the shift-and-add path:
//   - LUT construction adds are costed as FP32 adds,
//   - each LUT query is one table entry (it covers 8 weight elements),
//   - partial-sum accumulation and PoT term combination use the activation dtype (FP16),
//   - a shift is an INT16 add on the FP16 exponent field.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "shiftadd/bcq.hpp"
#include "shiftadd/error.hpp"
#include "shiftadd/lut_engine.hpp"
#include "shiftadd/tensor_store.hpp"

namespace shiftadd {

enum class DType { FP32, FP16, INT32, INT16, INT8 };

inline const char* to_string(DType t) {
  switch (t) {
    case DType::FP32: return "fp32";
    case DType::FP16: return "fp16";
    case DType::INT32: return "int32";
    case DType::INT16: return "int16";
    case DType::INT8: return "int8";
  }
  return "unknown";
}

inline DType parse_dtype(const std::string& s) {
  for (DType t : {DType::FP32, DType::FP16, DType::INT32, DType::INT16, DType::INT8})
    if (s == to_string(t)) return t;
  fail(ErrorKind::Validation, "unknown dtype '" + s + "'");
}

inline std::size_t dtype_bytes(DType t) {
  switch (t) {
    case DType::FP32:
    case DType::INT32: return 4;
    case DType::FP16:
    case DType::INT16: return 2;
    case DType::INT8: return 1;
  }
  return 0;
}

struct OpCost {
  double energy_pj = 0.0;
  double area_um2 = 0.0;
};

struct OpCostTable {
  std::map<DType, OpCost> mult;
  std::map<DType, OpCost> add;
  std::map<DType, OpCost> shift;
  OpCost lut_query;  // one 8-bit query, covering 8 operations

  static OpCostTable defaults() {
    OpCostTable t;
    t.mult = {{DType::FP32, {3.7, 7700}}, {DType::FP16, {0.9, 1640}}, {DType::INT32, {3.1, 3495}}, {DType::INT8, {0.2, 282}}};
    t.add = {{DType::FP32, {1.1, 4184}}, {DType::FP16, {0.4, 1360}}, {DType::INT32, {0.1, 137}}, {DType::INT8, {0.03, 36}}};
    t.shift = {{DType::INT32, {0.13, 157}}, {DType::INT16, {0.057, 73}}, {DType::INT8, {0.024, 34}}};
    t.lut_query = {0.37, 787};
    return t;
  }

  void validate() const {
    auto check = [](const OpCost& c, const std::string& what) {
      require(c.energy_pj > 0.0 && c.area_um2 > 0.0, "cost table entry '" + what + "' must be positive");
    };
    for (const auto& [t, c] : mult) check(c, std::string("mult.") + to_string(t));
    for (const auto& [t, c] : add) check(c, std::string("add.") + to_string(t));
    for (const auto& [t, c] : shift) check(c, std::string("shift.") + to_string(t));
    check(lut_query, "lut_query_8bit");
  }
};

inline nlohmann::json to_json(const OpCostTable& t) {
  auto section = [](const std::map<DType, OpCost>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [d, c] : m) j[to_string(d)] = {{"energy_pj", c.energy_pj}, {"area_um2", c.area_um2}};
    return j;
  };
  return {{"mult", section(t.mult)},
          {"add", section(t.add)},
          {"shift", section(t.shift)},
          {"lut_query_8bit", {{"energy_pj", t.lut_query.energy_pj}, {"area_um2", t.lut_query.area_um2}}}};
}

/// Entries present in `j` override the defaults.
inline OpCostTable cost_table_from_json(const nlohmann::json& j) {
  OpCostTable t = OpCostTable::defaults();
  auto cost = [](const nlohmann::json& e, OpCost c) {
    if (e.contains("energy_pj")) c.energy_pj = e.at("energy_pj").get<double>();
    if (e.contains("area_um2")) c.area_um2 = e.at("area_um2").get<double>();
    return c;
  };
  try {
    for (const char* key : {"mult", "add", "shift"}) {
      if (!j.contains(key)) continue;
      auto& section = std::string(key) == "mult" ? t.mult : std::string(key) == "add" ? t.add : t.shift;
      for (const auto& [name, e] : j.at(key).items()) {
        const DType d = parse_dtype(name);
        section[d] = cost(e, section.count(d) ? section[d] : OpCost{});
      }
    }
    if (j.contains("lut_query_8bit")) t.lut_query = cost(j.at("lut_query_8bit"), t.lut_query);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("cost table: ") + e.what());
  }
  t.validate();
  return t;
}

inline OpCostTable load_cost_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open cost table '" + path.string() + "'");
  try {
    return cost_table_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, "cost table '" + path.string() + "': " + e.what());
  }
}

struct WorkloadProfile {
  std::map<DType, std::uint64_t> mults;
  std::map<DType, std::uint64_t> adds;
  std::map<DType, std::uint64_t> shifts;
  std::uint64_t lut_build_adds = 0;
  std::uint64_t lut_queries = 0;
  std::uint64_t weight_bytes = 0;
  std::uint64_t activation_bytes = 0;

  WorkloadProfile& operator+=(const WorkloadProfile& o) {
    for (const auto& [d, v] : o.mults) mults[d] += v;
    for (const auto& [d, v] : o.adds) adds[d] += v;
    for (const auto& [d, v] : o.shifts) shifts[d] += v;
    lut_build_adds += o.lut_build_adds;
    lut_queries += o.lut_queries;
    weight_bytes += o.weight_bytes;
    activation_bytes += o.activation_bytes;
    return *this;
  }
  friend WorkloadProfile operator+(WorkloadProfile a, const WorkloadProfile& b) { return a += b; }
};

struct ShiftAddConventions {
  DType activation = DType::FP16;  // accumulation, PoT combination, f32-scale mults
  DType shift = DType::INT16;
  DType lut_build = DType::FP32;
};

inline WorkloadProfile profile_dense(std::uint64_t m, std::uint64_t n, DType dtype) {
  require(m > 0 && n > 0, "profile_dense: dimensions must be positive");
  WorkloadProfile p;
  p.mults[dtype] = m * n;
  p.adds[dtype] = m * (n - 1);
  p.weight_bytes = m * n * dtype_bytes(dtype);
  p.activation_bytes = n * dtype_bytes(dtype);
  return p;
}

inline std::uint64_t scale_group_count(const Grouping& g, std::uint64_t m, std::uint64_t n) {
  return GroupLayout(g, m, n).count();
}

/// Closed-form GEMV counters for an m x n, q-bit layer with K-term PoT scales (K = 0:
/// f32 scales) in the given mode. BlockWiseShared builds one bank shared by all planes.
inline GemvCounters expected_counters(std::uint64_t m, std::uint64_t n, int q, int k, GemvMode mode) {
  require(m > 0 && n > 0 && q >= 1 && q <= kMaxBits && k >= 0, "expected_counters: bad dimensions");
  const std::uint64_t groups = (n + kLutWidth - 1) / kLutWidth;
  const auto bits = static_cast<std::uint64_t>(q);
  const auto terms = static_cast<std::uint64_t>(k);
  GemvCounters c;
  const std::uint64_t banks = mode == GemvMode::BlockWiseShared ? 1 : bits;
  c.lut_tables = banks * groups;
  c.lut_build_adds = banks * groups * (kLutEntries - 1);
  c.queries = bits * m * groups;
  c.accumulate_adds = bits * m * (groups - 1) + (bits - 1) * m;
  const std::uint64_t scaled = mode == GemvMode::BlockWiseShared ? bits * m * groups : bits * n;
  if (terms > 0) {
    c.shifts = terms * scaled;
    c.pot_combine_adds = (terms - 1) * scaled;
  } else {
    c.scale_mults = scaled;
  }
  return c;
}

inline WorkloadProfile profile_from_counters(const GemvCounters& c, const ShiftAddConventions& conv = {}) {
  WorkloadProfile p;
  p.lut_build_adds = c.lut_build_adds;
  p.lut_queries = c.queries;
  p.adds[conv.activation] = c.accumulate_adds + c.pot_combine_adds;
  if (c.shifts) p.shifts[conv.shift] = c.shifts;
  if (c.scale_mults) p.mults[conv.activation] = c.scale_mults;
  return p;
}

inline std::uint64_t packed_weight_bytes(std::uint64_t m, std::uint64_t n, int q, int k, const Grouping& g) {
  const std::uint64_t scales = scale_group_count(g, m, n) * static_cast<std::uint64_t>(q);
  return packed_plane_bytes(m, n, q) + scales * (k > 0 ? 2 * static_cast<std::uint64_t>(k) : 4);
}

/// Shift-and-add workload. The grouping sets the scale byte count; by default it is the
/// one native to the mode (8-column blocks or columns).
inline WorkloadProfile profile_shiftadd(std::uint64_t m, std::uint64_t n, int q, int k, GemvMode mode,
                                        std::optional<Grouping> grouping = std::nullopt,
                                        const ShiftAddConventions& conv = {}) {
  require(m > 0 && n > 0, "profile_shiftadd: dimensions must be positive");
  require(q >= 1 && q <= kMaxBits, "profile_shiftadd: q must be in 1..8");
  const Grouping g = grouping.value_or(mode == GemvMode::BlockWiseShared ? Grouping::block_wise() : Grouping::column_wise());
  WorkloadProfile p = profile_from_counters(expected_counters(m, n, q, k, mode), conv);
  p.weight_bytes = packed_weight_bytes(m, n, q, k, g);
  p.activation_bytes = n * dtype_bytes(conv.activation);
  return p;
}

struct EnergyReport {
  double total_pj = 0.0;
  std::map<std::string, double> breakdown_pj;

  double joules() const noexcept { return total_pj * 1e-12; }
};

/// Counts dotted with per-op energies; DRAM traffic adds dram_pj_per_byte per weight and
/// activation byte (0 = compute only).
inline EnergyReport energy(const WorkloadProfile& p, const OpCostTable& table, double dram_pj_per_byte = 0.0) {
  EnergyReport r;
  auto lookup = [](const std::map<DType, OpCost>& m, DType d, const char* op) {
    auto it = m.find(d);
    if (it == m.end()) fail(ErrorKind::Validation, std::string("cost table has no ") + op + " entry for " + to_string(d));
    return it->second.energy_pj;
  };
  auto charge = [&](const std::string& key, double pj) {
    if (pj == 0.0) return;
    r.breakdown_pj[key] += pj;
    r.total_pj += pj;
  };
  for (const auto& [d, v] : p.mults)
    if (v) charge(std::string("mult.") + to_string(d), static_cast<double>(v) * lookup(table.mult, d, "mult"));
  for (const auto& [d, v] : p.adds)
    if (v) charge(std::string("add.") + to_string(d), static_cast<double>(v) * lookup(table.add, d, "add"));
  for (const auto& [d, v] : p.shifts)
    if (v) charge(std::string("shift.") + to_string(d), static_cast<double>(v) * lookup(table.shift, d, "shift"));
  if (p.lut_build_adds)
    charge("lut_build.fp32", static_cast<double>(p.lut_build_adds) * lookup(table.add, DType::FP32, "add"));
  charge("lut_query", static_cast<double>(p.lut_queries) * table.lut_query.energy_pj);
  charge("dram", static_cast<double>(p.weight_bytes + p.activation_bytes) * dram_pj_per_byte);
  return r;
}

struct LayerShape {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
};

struct MemoryReport {
  std::uint64_t dense_bytes = 0;   // fp16
  std::uint64_t packed_bytes = 0;
  double savings = 0.0;            // 1 - packed / dense
};

/// Exact byte accounting per the BCQ1 packing rules (payload only). bits == 16 means
/// fp16 passthrough.
inline MemoryReport memory_report(std::span<const LayerShape> shapes, int bits, const Grouping& grouping, int pot_terms) {
  require(bits == 16 || (bits >= 1 && bits <= kMaxBits), "memory_report: bits must be 1..8 or 16");
  MemoryReport r;
  for (const auto& s : shapes) {
    require(s.rows > 0 && s.cols > 0, "memory_report: empty shape for '" + s.name + "'");
    const std::uint64_t dense = s.rows * s.cols * 2;
    r.dense_bytes += dense;
    r.packed_bytes += bits == 16 ? dense : packed_weight_bytes(s.rows, s.cols, bits, pot_terms, grouping);
  }
  r.savings = r.dense_bytes ? 1.0 - static_cast<double>(r.packed_bytes) / static_cast<double>(r.dense_bytes) : 0.0;
  return r;
}

/// Linear layers of a decoder-only transformer: q, k, v, out (hidden x hidden), fc1
/// (ffn x hidden) and fc2 (hidden x ffn) per block, as [outputs, inputs].
inline std::vector<LayerShape> decoder_linear_shapes(std::uint64_t hidden, std::uint64_t ffn, std::size_t blocks) {
  std::vector<LayerShape> out;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    for (const char* name : {"q_proj", "k_proj", "v_proj", "out_proj"}) out.push_back({p + name, hidden, hidden});
    out.push_back({p + "fc1", ffn, hidden});
    out.push_back({p + "fc2", hidden, ffn});
  }
  return out;
}

}  // namespace shiftadd
