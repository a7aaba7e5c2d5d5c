// shiftadd command-line tool. Every subcommand accepts --config <json> plus flags that
// override the file's keys one-for-one.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "shiftadd/pipeline.hpp"

namespace {

using shiftadd::ErrorKind;

enum class Kind { String, Int, UInt, Double, Bool, IntList };

struct Flag {
  const char* name;  // without leading dashes
  const char* key;   // config key; "bench.x" for nested bench keys
  Kind kind;
  const char* help;
};

const std::vector<Flag> kCommon = {
    {"seed", "seed", Kind::UInt, "Seed for all randomized steps"},
    {"threads", "threads", Kind::Int, "Worker threads (default: SHIFTADD_THREADS or 1)"},
    {"csv", "csv", Kind::String, "CSV output path (default: stdout)"},
};

const std::vector<Flag> kReparam = {
    {"tensors", "tensors", Kind::String, "Input tensor file (SADL)"},
    {"calibration", "calibration", Kind::String, "Calibration file (SADL)"},
    {"objective", "objective", Kind::String, "weight | activation | multi"},
    {"grouping", "grouping", Kind::String, "row | column | block"},
    {"col-group", "col_group", Kind::UInt, "Block-wise column group width"},
    {"row-groups", "row_groups", Kind::UInt, "Block-wise row group count"},
    {"bits", "bits", Kind::Int, "Bits per weight"},
    {"pot-terms", "pot_terms", Kind::Int, "Additive PoT terms per scale (0: f32 scales)"},
    {"pot-end-only", "pot_end_only", Kind::Bool, "Project scales to PoT only after the last cycle"},
    {"cycles", "cycles", Kind::Int, "Alternating refinement cycles"},
    {"damping", "damping", Kind::Double, "Hessian damping as a fraction of its mean diagonal"},
    {"timing", "timing", Kind::Bool, "Fill wall-clock columns (breaks byte-identical output)"},
};

const std::vector<Flag> kQuantize = {
    {"allocation", "allocation", Kind::String, "Allocation manifest with per-layer bits"},
    {"output", "output", Kind::String, "Packed artifact to write (BCQ1)"},
};

const std::vector<Flag> kSensitivity = {
    {"measure-bits", "measure_bits", Kind::IntList, "Bit widths to measure"},
    {"row-fraction", "row_fraction", Kind::Double, "Fraction of rows used for error measurement"},
};

const std::vector<Flag> kAllocate = {
    {"budget", "budget", Kind::Double, "Average bits per layer"},
    {"manifest", "manifest", Kind::String, "Allocation manifest to write"},
};

const std::vector<Flag> kVerify = {
    {"packed", "packed", Kind::String, "Packed artifact (BCQ1)"},
    {"tensors", "tensors", Kind::String, "Original tensor file (SADL)"},
    {"calibration", "calibration", Kind::String, "Calibration file (SADL)"},
    {"tolerance", "tolerance", Kind::Double, "Maximum relative GEMV deviation"},
    {"vectors", "verify_vectors", Kind::UInt, "Random and calibration vectors per layer"},
};

const std::vector<Flag> kReport = {
    {"packed", "packed", Kind::String, "Packed artifact (BCQ1)"},
    {"tensors", "tensors", Kind::String, "Original tensor file, for shape checks"},
    {"cost-table", "cost_table", Kind::String, "JSON cost table overriding the defaults"},
    {"dram-pj-per-byte", "dram_pj_per_byte", Kind::Double, "DRAM energy per weight/activation byte"},
};

const std::vector<Flag> kBench = {
    {"m", "bench.m", Kind::UInt, "Rows"},
    {"n", "bench.n", Kind::UInt, "Columns"},
    {"q", "bench.q", Kind::Int, "Bit planes"},
    {"pot-terms", "bench.pot_terms", Kind::Int, "PoT terms (0: f32 scales)"},
    {"mode", "bench.mode", Kind::String, "blockwise-shared | columnwise-per-plane"},
    {"repeats", "bench.repeats", Kind::Int, "Timed repetitions"},
};

const std::vector<Flag> kSynth = {
    {"suite", "suite", Kind::String, "toy | sensitivity"},
    {"layers", "suite_layers", Kind::UInt, "Layer count for the sensitivity suite"},
    {"tensors", "tensors", Kind::String, "Tensor file to write"},
    {"calibration", "calibration", Kind::String, "Calibration file to write"},
};

struct Command {
  CLI::App* app = nullptr;
  std::string config;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  std::vector<Flag> flags;
};

void add_flags(Command& c, const std::vector<Flag>& flags) {
  for (const auto& f : flags) {
    c.flags.push_back(f);
    const std::string opt = std::string("--") + f.name;
    if (f.kind == Kind::Bool)
      c.app->add_flag(opt, c.switches[f.key], f.help);
    else
      c.app->add_option(opt, c.values[f.key], f.help);
  }
}

nlohmann::json convert(const Flag& f, const std::string& raw) {
  try {
    std::size_t used = 0;
    switch (f.kind) {
      case Kind::String: return raw;
      case Kind::Int: {
        const int v = std::stoi(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::UInt: {
        if (!raw.empty() && raw[0] == '-') break;
        const unsigned long long v = std::stoull(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::Double: {
        const double v = std::stod(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::IntList: {
        nlohmann::json list = nlohmann::json::array();
        std::size_t at = 0;
        while (at <= raw.size()) {
          const std::size_t comma = std::min(raw.find(',', at), raw.size());
          const std::string part = raw.substr(at, comma - at);
          const int v = std::stoi(part, &used);
          if (used != part.size()) throw std::invalid_argument(part);
          list.push_back(v);
          at = comma + 1;
        }
        return list;
      }
      case Kind::Bool: break;
    }
  } catch (const std::logic_error&) {
  }
  shiftadd::fail(ErrorKind::Validation, std::string("--") + f.name + ": cannot parse '" + raw + "'");
}

shiftadd::RunConfig build_config(const Command& c) {
  shiftadd::RunConfig cfg = c.config.empty() ? shiftadd::RunConfig{} : shiftadd::load_run_config(c.config);
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& f : c.flags) {
    const std::string key = f.key;
    nlohmann::json value;
    if (f.kind == Kind::Bool) {
      if (!c.app->count(std::string("--") + f.name)) continue;
      value = true;
    } else {
      if (!c.app->count(std::string("--") + f.name)) continue;
      value = convert(f, c.values.at(key));
    }
    if (key.rfind("bench.", 0) == 0)
      overrides["bench"][key.substr(6)] = value;
    else
      overrides[key] = value;
  }
  shiftadd::apply_json(cfg, overrides);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shift-and-add reparameterization of linear layers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "shiftadd 1.0.0");

  using Runner = int (*)(const shiftadd::RunConfig&);
  struct Entry {
    const char* name;
    const char* help;
    std::vector<const std::vector<Flag>*> groups;
    Runner run;
  };
  const std::vector<Entry> entries = {
      {"quantize", "Reparameterize every layer and write a packed artifact", {&kReparam, &kQuantize},
       shiftadd::cmd_quantize},
      {"sensitivity", "Criteria and measured error per bit width", {&kReparam, &kSensitivity}, shiftadd::cmd_sensitivity},
      {"allocate", "Choose per-layer bits under an average budget", {&kReparam, &kSensitivity, &kAllocate},
       shiftadd::cmd_allocate},
      {"verify", "Check LUT GEMV and recorded errors of a packed artifact", {&kVerify}, shiftadd::cmd_verify},
      {"report", "Energy and memory of a packed artifact", {&kReport}, shiftadd::cmd_report},
      {"gemv-bench", "Time LUT GEMV on a random packed weight", {&kBench}, shiftadd::cmd_gemv_bench},
      {"synth", "Write a synthetic model and calibration set", {&kSynth}, shiftadd::cmd_synth},
  };

  std::vector<Command> commands(entries.size());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Command& c = commands[k];
    c.app = app.add_subcommand(entries[k].name, entries[k].help);
    c.app->add_option("--config", c.config, "JSON config; flags override its keys");
    add_flags(c, kCommon);
    for (const auto* g : entries[k].groups) add_flags(c, *g);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!commands[k].app->parsed()) continue;
    try {
      return entries[k].run(build_config(commands[k]));
    } catch (const shiftadd::Error& e) {
      std::cerr << shiftadd::error_json(e).dump() << "\n";
      return shiftadd::exit_code(e.kind());
    } catch (const std::bad_alloc&) {
      std::cerr << R"({"error":{"exit_code":1,"kind":"internal","message":"out of memory"}})" << "\n";
      return 1;
    } catch (const std::exception& e) {
      nlohmann::json j = {{"error", {{"kind", "internal"}, {"message", e.what()}, {"exit_code", 1}}}};
      std::cerr << j.dump() << "\n";
      return 1;
    }
  }
  return 2;
}
