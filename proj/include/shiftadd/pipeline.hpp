#pragma once

// End-to-end commands behind the shiftadd tool. Each command reads a RunConfig, writes
// its artifacts and returns a process exit code; module failures surface as Error.
//
// Outputs are deterministic: layers are processed in name order (optionally in
// parallel, results are gathered by index), per-layer randomness is seeded from
// seed ^ fnv1a64(layer name), and wall-clock columns are only filled when `timing` is set.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "shiftadd/bcq.hpp"
#include "shiftadd/bit_alloc.hpp"
#include "shiftadd/cost_model.hpp"
#include "shiftadd/error.hpp"
#include "shiftadd/hessian.hpp"
#include "shiftadd/lut_engine.hpp"
#include "shiftadd/reparam.hpp"
#include "shiftadd/synth.hpp"
#include "shiftadd/tensor_store.hpp"

namespace shiftadd {

inline constexpr const char* kThreadsEnv = "SHIFTADD_THREADS";

struct RunConfig {
  std::string tensors;
  std::string calibration;
  std::string packed;      // input artifact for verify / report
  std::string allocation;  // manifest consumed by quantize
  std::string output;      // packed artifact written by quantize
  std::string csv;         // empty: stdout
  std::string manifest;    // written by allocate
  std::string cost_table;

  ReparamConfig reparam;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: SHIFTADD_THREADS, else 1
  bool timing = false;

  double budget = 3.0;
  std::vector<int> measure_bits{2, 3, 4};
  double row_fraction = 1.0;

  double tolerance = 1e-4;
  std::size_t verify_vectors = 4;
  double dram_pj_per_byte = 0.0;

  std::string suite = "toy";  // synth
  std::size_t suite_layers = 20;

  std::size_t bench_m = 256;
  std::size_t bench_n = 256;
  int bench_q = 3;
  int bench_pot_terms = 2;
  std::string bench_mode = "blockwise-shared";
  int bench_repeats = 20;
};

namespace detail {

template <class T>
T json_get(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Validation, "config key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Applies the keys of `j` to `cfg`. Unknown keys are rejected so typos do not pass
/// silently. Later applications win, which is how command-line flags override a file.
inline void apply_json(RunConfig& cfg, const nlohmann::json& j) {
  require(j.is_object(), "config must be a JSON object");
  using detail::json_get;
  for (const auto& [key, v] : j.items()) {
    if (key == "tensors") cfg.tensors = json_get<std::string>(v, key);
    else if (key == "calibration") cfg.calibration = json_get<std::string>(v, key);
    else if (key == "packed") cfg.packed = json_get<std::string>(v, key);
    else if (key == "allocation") cfg.allocation = json_get<std::string>(v, key);
    else if (key == "output") cfg.output = json_get<std::string>(v, key);
    else if (key == "csv") cfg.csv = json_get<std::string>(v, key);
    else if (key == "manifest") cfg.manifest = json_get<std::string>(v, key);
    else if (key == "cost_table") cfg.cost_table = json_get<std::string>(v, key);
    else if (key == "objective") cfg.reparam.objective = parse_objective(json_get<std::string>(v, key));
    else if (key == "grouping") {
      const auto kind = json_get<std::string>(v, key);
      if (kind != "row" && kind != "column" && kind != "block")
        fail(ErrorKind::Validation, "unknown grouping '" + kind + "'");
      cfg.reparam.grouping.kind = parse_grouping(kind);
    }
    else if (key == "col_group") cfg.reparam.grouping.col_group = json_get<std::size_t>(v, key);
    else if (key == "row_groups") cfg.reparam.grouping.row_groups = json_get<std::size_t>(v, key);
    else if (key == "bits") cfg.reparam.bits = json_get<int>(v, key);
    else if (key == "pot_terms") {
      const int k = json_get<int>(v, key);
      cfg.reparam.pot.enabled = k > 0;
      cfg.reparam.pot.terms = k > 0 ? k : kDefaultPotTerms;
    }
    else if (key == "pot_end_only") cfg.reparam.pot.end_only = json_get<bool>(v, key);
    else if (key == "cycles") cfg.reparam.cycles = json_get<int>(v, key);
    else if (key == "damping") cfg.reparam.damping = json_get<double>(v, key);
    else if (key == "seed") cfg.seed = json_get<std::uint64_t>(v, key);
    else if (key == "threads") cfg.threads = json_get<int>(v, key);
    else if (key == "timing") cfg.timing = json_get<bool>(v, key);
    else if (key == "budget") cfg.budget = json_get<double>(v, key);
    else if (key == "measure_bits") cfg.measure_bits = json_get<std::vector<int>>(v, key);
    else if (key == "row_fraction") cfg.row_fraction = json_get<double>(v, key);
    else if (key == "tolerance") cfg.tolerance = json_get<double>(v, key);
    else if (key == "verify_vectors") cfg.verify_vectors = json_get<std::size_t>(v, key);
    else if (key == "dram_pj_per_byte") cfg.dram_pj_per_byte = json_get<double>(v, key);
    else if (key == "suite") cfg.suite = json_get<std::string>(v, key);
    else if (key == "suite_layers") cfg.suite_layers = json_get<std::size_t>(v, key);
    else if (key == "bench") {
      require(v.is_object(), "config key 'bench' must be an object");
      for (const auto& [bk, bv] : v.items()) {
        if (bk == "m") cfg.bench_m = json_get<std::size_t>(bv, "bench.m");
        else if (bk == "n") cfg.bench_n = json_get<std::size_t>(bv, "bench.n");
        else if (bk == "q") cfg.bench_q = json_get<int>(bv, "bench.q");
        else if (bk == "pot_terms") cfg.bench_pot_terms = json_get<int>(bv, "bench.pot_terms");
        else if (bk == "mode") cfg.bench_mode = json_get<std::string>(bv, "bench.mode");
        else if (bk == "repeats") cfg.bench_repeats = json_get<int>(bv, "bench.repeats");
        else fail(ErrorKind::Validation, "unknown config key 'bench." + bk + "'");
      }
    }
    else fail(ErrorKind::Validation, "unknown config key '" + key + "'");
  }
  // An objective given without a grouping takes the grouping it is defined with.
  if (j.contains("objective") && !j.contains("grouping")) {
    auto& kind = cfg.reparam.grouping.kind;
    if (cfg.reparam.objective != Objective::MultiObjective) kind = GroupingKind::RowWise;
    else if (kind == GroupingKind::RowWise) kind = GroupingKind::ColumnWise;
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config '" + path.string() + "'");
  RunConfig cfg;
  try {
    apply_json(cfg, nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, "config '" + path.string() + "': " + e.what());
  }
  return cfg;
}

inline int resolve_threads(const RunConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  require(cfg.threads == 0, "threads must be >= 0");
  if (const char* env = std::getenv(kThreadsEnv); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 1024)
      fail(ErrorKind::Validation, std::string(kThreadsEnv) + " must be a positive integer, got '" + env + "'");
    return static_cast<int>(v);
  }
  return 1;
}

/// Runs f(0..n-1) on up to `threads` workers. Results keep index order; if several
/// items throw, the lowest index's exception is rethrown.
template <class F>
auto parallel_map(std::size_t n, int threads, F&& f) -> std::vector<decltype(f(std::size_t{}))> {
  using T = decltype(f(std::size_t{}));
  std::vector<std::optional<T>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(f(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(workers, n); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<T> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// --- CSV ---------------------------------------------------------------------

inline std::string fmt_num(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "NA" : (v > 0 ? "inf" : "-inf");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& kind, const std::vector<std::string>& columns) {
    out_ << "# shiftadd-" << kind << " v1\n";
    row(columns);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t k = 0; k < fields.size(); ++k) {
      if (k) out_ << ',';
      const std::string& f = fields[k];
      if (f.find_first_of(",\"\n") == std::string::npos) {
        out_ << f;
      } else {
        out_ << '"';
        for (char c : f) out_ << (c == '"' ? "\"\"" : std::string(1, c));
        out_ << '"';
      }
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

  /// Empty path writes to stdout.
  void write(const std::string& path) const {
    const std::string s = str();
    if (path.empty()) {
      std::cout << s << std::flush;
      return;
    }
    io::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

 private:
  std::ostringstream out_;
};

inline void write_json(const std::string& path, const nlohmann::json& j) {
  const std::string s = j.dump(2) + "\n";
  io::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::uint64_t layer_seed(std::uint64_t seed, const std::string& name) {
  return seed ^ io::fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
}

// --- shared loading ----------------------------------------------------------

namespace detail {

inline std::vector<const TensorEntry*> sorted_entries(const TensorFile& tf) {
  std::vector<const TensorEntry*> out;
  for (const auto& e : tf.entries) out.push_back(&e);
  std::sort(out.begin(), out.end(), [](const TensorEntry* a, const TensorEntry* b) { return a->name < b->name; });
  return out;
}

inline std::span<const Matrix> batches_for(const std::optional<CalibrationSet>& cs, const TensorEntry& e, bool needed) {
  if (!cs) {
    require(!needed, "layer '" + e.name + "' needs calibration data but no calibration file was given");
    return {};
  }
  const auto* b = cs->find(e.name);
  if (!b) {
    require(!needed, "calibration file has no inputs for layer '" + e.name + "'");
    return {};
  }
  for (const auto& x : *b)
    require(x.rows() == e.value.cols(), "calibration width " + std::to_string(x.rows()) + " for layer '" + e.name +
                                             "' does not match its input width " + std::to_string(e.value.cols()));
  return *b;
}

inline std::optional<CalibrationSet> maybe_calibration(const RunConfig& cfg) {
  if (cfg.calibration.empty()) return std::nullopt;
  return load_calibration(cfg.calibration);
}

inline const TensorFile& require_tensors(const RunConfig& cfg, std::optional<TensorFile>& slot) {
  require(!cfg.tensors.empty(), "no tensor file given");
  slot = load_tensors(cfg.tensors);
  return *slot;
}

}  // namespace detail

// --- allocation manifest -------------------------------------------------------

inline std::map<std::string, int> load_allocation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open allocation manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, "allocation manifest '" + path.string() + "': " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "shiftadd-allocation" || !j.contains("layers") || !j["layers"].is_array())
    fail(ErrorKind::Format, "'" + path.string() + "' is not a shiftadd allocation manifest");
  std::map<std::string, int> out;
  for (const auto& l : j["layers"]) {
    if (!l.contains("name") || !l.contains("bits") || !l["name"].is_string() || !l["bits"].is_number_integer())
      fail(ErrorKind::Format, "allocation manifest entry lacks a name or integer bits");
    const int bits = l["bits"].get<int>();
    if (bits < 1 || bits > kMaxBits) fail(ErrorKind::Validation, "allocation bits out of range for '" + l["name"].get<std::string>() + "'");
    if (!out.emplace(l["name"].get<std::string>(), bits).second)
      fail(ErrorKind::Validation, "allocation manifest lists '" + l["name"].get<std::string>() + "' twice");
  }
  return out;
}

// --- quantize ----------------------------------------------------------------

inline int cmd_quantize(const RunConfig& cfg) {
  validate_config(cfg.reparam);
  require(!cfg.output.empty(), "quantize: no output path for the packed artifact");
  std::optional<TensorFile> tf_slot;
  const TensorFile& tf = detail::require_tensors(cfg, tf_slot);
  const auto cs = detail::maybe_calibration(cfg);
  std::map<std::string, int> alloc;
  if (!cfg.allocation.empty()) {
    alloc = load_allocation(cfg.allocation);
    for (const auto& [name, bits] : alloc)
      require(tf.find(name) != nullptr, "allocation manifest names layer '" + name + "' missing from the tensor file");
  }
  const bool needs_calib = cfg.reparam.objective != Objective::WeightOnly;
  const auto entries = detail::sorted_entries(tf);
  std::vector<std::span<const Matrix>> batches;
  for (const auto* e : entries) batches.push_back(detail::batches_for(cs, *e, needs_calib));

  struct Row {
    PackedLayer layer;
    bool has_activation;
    double millis;
  };
  auto rows = parallel_map(entries.size(), resolve_threads(cfg), [&](std::size_t i) {
    const TensorEntry& e = *entries[i];
    ReparamConfig rc = cfg.reparam;
    if (auto it = alloc.find(e.name); it != alloc.end()) rc.bits = it->second;
    const auto t0 = std::chrono::steady_clock::now();
    ReparamResult r = reparameterize(e.value, batches[i], rc);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    std::size_t samples = 0;
    for (const auto& x : batches[i]) samples += x.cols();
    nlohmann::json meta = {{"objective", to_string(rc.objective)},
                           {"weight_error", r.weight_error},
                           {"activation_error", batches[i].empty() ? nlohmann::json() : nlohmann::json(r.activation_error)},
                           {"tracked_loss", r.tracked_loss},
                           {"lambda", r.lambda},
                           {"clamped_exponents", r.clamped_exponents},
                           {"cycles", rc.cycles},
                           {"damping", rc.damping},
                           {"calibration_samples", samples}};
    return Row{PackedLayer{e.name, std::move(r.weight), std::move(meta)}, !batches[i].empty(), ms};
  });

  std::vector<PackedLayer> layers;
  CsvWriter csv("quantize", {"layer", "grouping", "bits", "weight_error", "act_error", "runtime_ms"});
  for (auto& row : rows) {
    const auto& m = row.layer.metadata;
    csv.row({row.layer.name, to_string(row.layer.weight.scales.grouping.kind), std::to_string(row.layer.weight.bits),
             fmt_num(m["weight_error"].get<double>()),
             row.has_activation ? fmt_num(m["activation_error"].get<double>()) : "NA",
             cfg.timing ? fmt_num(row.millis) : "NA"});
    layers.push_back(std::move(row.layer));
  }
  save_packed(layers, cfg.output);
  csv.write(cfg.csv);
  return 0;
}

// --- sensitivity / allocate ------------------------------------------------------

struct SensitivityRow {
  LayerSensitivity layer;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline std::vector<SensitivityRow> compute_sensitivities(const RunConfig& cfg) {
  validate_config(cfg.reparam);
  require(cfg.measure_bits.size() >= 2, "at least two measure_bits are needed to fit the bit curve");
  std::optional<TensorFile> tf_slot;
  const TensorFile& tf = detail::require_tensors(cfg, tf_slot);
  require(!cfg.calibration.empty(), "sensitivity needs a calibration file");
  const auto cs = detail::maybe_calibration(cfg);
  const auto entries = detail::sorted_entries(tf);
  std::vector<std::span<const Matrix>> batches;
  for (const auto* e : entries) batches.push_back(detail::batches_for(cs, *e, true));
  return parallel_map(entries.size(), resolve_threads(cfg), [&](std::size_t i) {
    const TensorEntry& e = *entries[i];
    SensitivityRow row;
    row.rows = e.value.rows();
    row.cols = e.value.cols();
    row.layer.name = e.name;
    const CalibrationHessian h = accumulate_hessian(batches[i], cfg.reparam.damping);
    row.layer.criterion = criterion(importance_score(e.value, h.d));
    row.layer.measured = measure_bit_errors(e.value, batches[i], cfg.measure_bits, cfg.reparam,
                                            {cfg.row_fraction, layer_seed(cfg.seed, e.name)});
    fit_bit_curve(row.layer);
    return row;
  });
}

inline double measured_at(const LayerSensitivity& s, int bits) {
  for (const auto& p : s.measured)
    if (p.bits == bits) return p.error;
  return std::nan("");
}

inline int cmd_sensitivity(const RunConfig& cfg) {
  const auto rows = compute_sensitivities(cfg);
  CsvWriter csv("sensitivity", {"layer", "rows", "cols", "criterion", "err_2", "err_3", "err_4", "c_2", "c_3", "c_4",
                                "row_fraction"});
  std::vector<double> crit, err;
  for (const auto& r : rows) {
    const auto& s = r.layer;
    csv.row({s.name, std::to_string(r.rows), std::to_string(r.cols), fmt_num(s.criterion), fmt_num(measured_at(s, 2)),
             fmt_num(measured_at(s, 3)), fmt_num(measured_at(s, 4)), fmt_num(s.fitted[0]), fmt_num(s.fitted[1]),
             fmt_num(s.fitted[2]), fmt_num(cfg.row_fraction)});
    crit.push_back(s.criterion);
    err.push_back(s.fitted[1]);
  }
  csv.write(cfg.csv);
  if (rows.size() >= 2)
    std::cerr << "kendall_tau(criterion, c_3) = " << fmt_num(kendall_tau(crit, err)) << " over " << rows.size()
              << " layers\n";
  return 0;
}

inline int cmd_allocate(const RunConfig& cfg) {
  require(!cfg.manifest.empty(), "allocate: no manifest output path");
  const auto rows = compute_sensitivities(cfg);
  require(!rows.empty(), "allocate: the tensor file has no layers");
  AllocationProblem problem;
  problem.budget = cfg.budget;
  for (const auto& r : rows) problem.criteria.push_back(r.layer.fitted);
  const Allocation alloc = solve_allocation(problem);

  CsvWriter csv("allocate", {"layer", "criterion", "c_2", "c_3", "c_4", "bits"});
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = rows[i].layer;
    csv.row({s.name, fmt_num(s.criterion), fmt_num(s.fitted[0]), fmt_num(s.fitted[1]), fmt_num(s.fitted[2]),
             std::to_string(alloc.bits[i])});
    nlohmann::json measured = nlohmann::json::array();
    for (const auto& p : s.measured) measured.push_back({{"bits", p.bits}, {"error", p.error}});
    layers.push_back({{"name", s.name},
                      {"bits", alloc.bits[i]},
                      {"criterion", s.criterion},
                      {"fitted", s.fitted},
                      {"measured", measured}});
  }
  const nlohmann::json manifest = {{"format", "shiftadd-allocation"},
                                   {"version", 1},
                                   {"budget", cfg.budget},
                                   {"budget_bits", alloc.budget_bits},
                                   {"total_bits", alloc.total_bits},
                                   {"objective_value", alloc.objective},
                                   {"feasible", alloc.feasible},
                                   {"objective", to_string(cfg.reparam.objective)},
                                   {"grouping", to_string(cfg.reparam.grouping.kind)},
                                   {"row_fraction", cfg.row_fraction},
                                   {"seed", cfg.seed},
                                   {"layers", layers}};
  write_json(cfg.manifest, manifest);
  csv.write(cfg.csv);
  return 0;
}

// --- verify ------------------------------------------------------------------

struct VerifyRow {
  std::string name;
  GemvMode mode = GemvMode::BlockWiseShared;
  double gemv_deviation = 0.0;
  double weight_error = 0.0;
  double recorded_weight_error = std::nan("");
  double activation_error = std::nan("");
  double recorded_activation_error = std::nan("");
  bool pass = true;
  std::string reason;
};

inline bool matches_record(double actual, double recorded, double tolerance) {
  if (std::isnan(recorded)) return true;
  return std::fabs(actual - recorded) <= tolerance * std::max(std::fabs(recorded), 1e-12);
}

inline VerifyRow verify_layer(const PackedLayer& layer, const Matrix& original, std::span<const Matrix> batches,
                              const RunConfig& cfg) {
  VerifyRow row;
  row.name = layer.name;
  const BcqWeight& w = layer.weight;
  require(original.rows() == w.rows && original.cols() == w.cols,
          "layer '" + layer.name + "' has a different shape in the tensor file");
  const PackedGemvPlan plan(w);
  row.mode = plan.mode();
  const Matrix deq = dequantize(w);

  std::vector<std::vector<float>> inputs;
  synth::Rng rng(layer_seed(cfg.seed, layer.name));
  for (std::size_t k = 0; k < cfg.verify_vectors; ++k) {
    std::vector<float> x(w.cols);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    inputs.push_back(std::move(x));
  }
  if (!batches.empty())
    for (std::size_t t = 0; t < std::min(cfg.verify_vectors, batches.front().cols()); ++t)
      inputs.push_back(batches.front().column(t));
  for (const auto& x : inputs) row.gemv_deviation = std::max(row.gemv_deviation, max_relative_deviation(deq, x, plan.gemv(x)));

  row.weight_error = frobenius_error(original, deq);
  const auto& m = layer.metadata;
  if (m.contains("weight_error") && m["weight_error"].is_number()) row.recorded_weight_error = m["weight_error"].get<double>();
  if (!batches.empty()) {
    row.activation_error = output_error(original, deq, batches);
    if (m.contains("activation_error") && m["activation_error"].is_number())
      row.recorded_activation_error = m["activation_error"].get<double>();
  }

  if (row.gemv_deviation > cfg.tolerance) {
    row.pass = false;
    row.reason = "gemv deviation";
  } else if (!matches_record(row.weight_error, row.recorded_weight_error, cfg.tolerance)) {
    row.pass = false;
    row.reason = "weight error differs from the recorded value";
  } else if (!matches_record(row.activation_error, row.recorded_activation_error, cfg.tolerance)) {
    row.pass = false;
    row.reason = "activation error differs from the recorded value";
  }
  return row;
}

/// Exit 0 when every layer passes, 1 otherwise.
inline int cmd_verify(const RunConfig& cfg) {
  require(!cfg.packed.empty(), "verify: no packed artifact given");
  require(cfg.tolerance > 0.0, "verify: tolerance must be positive");
  const auto packed = load_packed(cfg.packed);
  std::optional<TensorFile> tf_slot;
  const TensorFile& tf = detail::require_tensors(cfg, tf_slot);
  const auto cs = detail::maybe_calibration(cfg);
  std::vector<const PackedLayer*> order;
  for (const auto& l : packed) order.push_back(&l);
  std::sort(order.begin(), order.end(), [](const PackedLayer* a, const PackedLayer* b) { return a->name < b->name; });
  std::vector<const TensorEntry*> originals;
  std::vector<std::span<const Matrix>> batches;
  for (const auto* l : order) {
    const TensorEntry* e = tf.find(l->name);
    require(e != nullptr, "packed layer '" + l->name + "' is missing from the tensor file");
    originals.push_back(e);
    batches.push_back(detail::batches_for(cs, *e, false));
  }
  const auto rows = parallel_map(order.size(), resolve_threads(cfg), [&](std::size_t i) {
    return verify_layer(*order[i], originals[i]->value, batches[i], cfg);
  });

  CsvWriter csv("verify", {"layer", "mode", "max_gemv_deviation", "weight_error", "recorded_weight_error", "act_error",
                           "recorded_act_error", "status"});
  std::size_t failures = 0;
  for (const auto& r : rows) {
    csv.row({r.name, to_string(r.mode), fmt_num(r.gemv_deviation), fmt_num(r.weight_error),
             fmt_num(r.recorded_weight_error), fmt_num(r.activation_error), fmt_num(r.recorded_activation_error),
             r.pass ? "pass" : "fail"});
    if (!r.pass) {
      ++failures;
      std::cerr << "verify: layer '" << r.name << "' failed: " << r.reason << "\n";
    }
  }
  csv.write(cfg.csv);
  return failures ? 1 : 0;
}

// --- report ------------------------------------------------------------------

inline int cmd_report(const RunConfig& cfg) {
  require(!cfg.packed.empty(), "report: no packed artifact given");
  const auto packed = load_packed(cfg.packed);
  if (!cfg.tensors.empty()) {
    const TensorFile tf = load_tensors(cfg.tensors);
    for (const auto& l : packed) {
      const TensorEntry* e = tf.find(l.name);
      require(e && e->value.rows() == l.weight.rows && e->value.cols() == l.weight.cols,
              "packed layer '" + l.name + "' does not match the tensor file");
    }
  }
  const OpCostTable table = cfg.cost_table.empty() ? OpCostTable::defaults() : load_cost_table(cfg.cost_table);
  std::vector<const PackedLayer*> order;
  for (const auto& l : packed) order.push_back(&l);
  std::sort(order.begin(), order.end(), [](const PackedLayer* a, const PackedLayer* b) { return a->name < b->name; });

  CsvWriter csv("report", {"layer", "rows", "cols", "bits", "grouping", "pot_terms", "mode", "dense_pj", "shiftadd_pj",
                           "energy_savings_pct", "dense_bytes", "packed_bytes", "memory_savings_pct", "queries",
                           "accumulate_adds", "shifts", "pot_combine_adds", "scale_mults", "lut_build_adds"});
  WorkloadProfile dense_total, sa_total;
  GemvCounters counter_total;
  auto emit = [&](const std::string& name, std::string rows, std::string cols, std::string bits, std::string grouping,
                  std::string pot, std::string mode, const WorkloadProfile& d, const WorkloadProfile& s,
                  const GemvCounters& c) {
    const double ed = energy(d, table, cfg.dram_pj_per_byte).total_pj;
    const double es = energy(s, table, cfg.dram_pj_per_byte).total_pj;
    const std::uint64_t dense_bytes = d.weight_bytes;
    csv.row({name, std::move(rows), std::move(cols), std::move(bits), std::move(grouping), std::move(pot), std::move(mode),
             fmt_num(ed), fmt_num(es), fmt_pct(ed > 0 ? 1.0 - es / ed : 0.0), std::to_string(dense_bytes),
             std::to_string(s.weight_bytes),
             fmt_pct(dense_bytes ? 1.0 - static_cast<double>(s.weight_bytes) / static_cast<double>(dense_bytes) : 0.0),
             std::to_string(c.queries), std::to_string(c.accumulate_adds), std::to_string(c.shifts),
             std::to_string(c.pot_combine_adds), std::to_string(c.scale_mults), std::to_string(c.lut_build_adds)});
  };
  for (const auto* l : order) {
    const BcqWeight& w = l->weight;
    const GemvMode mode = default_mode(w.scales.grouping);
    const GemvCounters c = expected_counters(w.rows, w.cols, w.bits, w.scales.pot_terms, mode);
    const WorkloadProfile d = profile_dense(w.rows, w.cols, DType::FP16);
    WorkloadProfile s = profile_from_counters(c);
    s.weight_bytes = packed_plane_bytes(w.rows, w.cols, w.bits) + packed_scale_bytes(w.scales);
    s.activation_bytes = w.cols * dtype_bytes(DType::FP16);
    emit(l->name, std::to_string(w.rows), std::to_string(w.cols), std::to_string(w.bits), to_string(w.scales.grouping.kind),
         std::to_string(w.scales.pot_terms), to_string(mode), d, s, c);
    dense_total += d;
    sa_total += s;
    counter_total.queries += c.queries;
    counter_total.accumulate_adds += c.accumulate_adds;
    counter_total.shifts += c.shifts;
    counter_total.pot_combine_adds += c.pot_combine_adds;
    counter_total.scale_mults += c.scale_mults;
    counter_total.lut_build_adds += c.lut_build_adds;
  }
  emit("TOTAL", "", "", "", "", "", "", dense_total, sa_total, counter_total);
  csv.write(cfg.csv);
  return 0;
}

// --- gemv-bench ----------------------------------------------------------------

inline int cmd_gemv_bench(const RunConfig& cfg) {
  require(cfg.bench_m > 0 && cfg.bench_n > 0, "gemv-bench: dimensions must be positive");
  require(cfg.bench_q >= 1 && cfg.bench_q <= kMaxBits, "gemv-bench: q must be in 1..8");
  require(cfg.bench_pot_terms >= 0 && cfg.bench_pot_terms <= 16, "gemv-bench: pot_terms must be in 0..16");
  require(cfg.bench_repeats >= 1, "gemv-bench: repeats must be >= 1");
  const GemvMode mode = parse_gemv_mode(cfg.bench_mode);
  const Grouping grouping = mode == GemvMode::BlockWiseShared ? Grouping::block_wise() : Grouping::column_wise();
  synth::Rng rng(cfg.seed);
  const BcqWeight w = synth::random_bcq(cfg.bench_m, cfg.bench_n, cfg.bench_q, grouping, cfg.bench_pot_terms, rng);
  std::vector<float> x(cfg.bench_n);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  const PackedGemvPlan plan(w, mode);
  const Matrix deq = dequantize(w);

  CsvWriter csv("gemv-bench", {"mode", "m", "n", "q", "pot_terms", "repeats", "lut_tables", "lut_build_adds", "queries",
                               "adds", "shifts", "dense_ms", "lut_ms"});
  GemvCounters c;
  std::vector<float> y;
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < cfg.bench_repeats; ++r) y = plan.gemv(x, r == 0 ? &c : nullptr);
  const auto t1 = std::chrono::steady_clock::now();
  for (int r = 0; r < cfg.bench_repeats; ++r) y = gemv_dense_reference(deq, x);
  const auto t2 = std::chrono::steady_clock::now();
  const double per = 1.0 / cfg.bench_repeats;
  csv.row({to_string(mode), std::to_string(cfg.bench_m), std::to_string(cfg.bench_n), std::to_string(cfg.bench_q),
           std::to_string(cfg.bench_pot_terms), std::to_string(cfg.bench_repeats), std::to_string(c.lut_tables),
           std::to_string(c.lut_build_adds), std::to_string(c.queries),
           std::to_string(c.accumulate_adds + c.pot_combine_adds), std::to_string(c.shifts),
           fmt_num(std::chrono::duration<double, std::milli>(t2 - t1).count() * per),
           fmt_num(std::chrono::duration<double, std::milli>(t1 - t0).count() * per)});
  csv.write(cfg.csv);
  return 0;
}

// --- synth -------------------------------------------------------------------

/// Writes a synthetic model (`suite` = toy or sensitivity) to `tensors` and its
/// calibration inputs to `calibration`.
inline int cmd_synth(const RunConfig& cfg) {
  require(!cfg.tensors.empty() && !cfg.calibration.empty(), "synth: tensors and calibration output paths are required");
  std::vector<synth::SyntheticLayer> layers;
  if (cfg.suite == "toy") layers = synth::toy_suite(cfg.seed);
  else if (cfg.suite == "sensitivity") layers = synth::sensitivity_suite(cfg.suite_layers, 64, 64, 128, cfg.seed);
  else fail(ErrorKind::Validation, "unknown synthetic suite '" + cfg.suite + "'");
  save_tensors(synth::weights_of(layers), cfg.tensors);
  save_calibration(synth::calibration_of(layers), cfg.calibration);
  return 0;
}

inline nlohmann::json error_json(const Error& e) {
  return {{"error", {{"kind", to_string(e.kind())}, {"message", e.what()}, {"exit_code", exit_code(e.kind())}}}};
}

}  // namespace shiftadd
