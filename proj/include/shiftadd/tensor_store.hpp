#pragma once

// File containers.
//
//   SADL  dense f32 tensors (weights, calibration activations)
//   BCQ1  packed quantized layers (bitplanes + scales + grouping metadata)
//
// Both share one framing: 4-byte magic, u32 little-endian header length, UTF-8 JSON
// header, zero padding up to a 64-byte boundary, then the payload. Offsets in the JSON
// header are relative to the payload start. See docs/formats.md for the full layout.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "shiftadd/bcq.hpp"
#include "shiftadd/error.hpp"
#include "shiftadd/matrix.hpp"

namespace shiftadd {

inline constexpr std::uint32_t kSadlVersion = 1;
inline constexpr std::uint32_t kBcqVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

struct TensorEntry {
  std::string name;
  Matrix value;
};

struct TensorFile {
  std::uint32_t version = kSadlVersion;
  std::vector<TensorEntry> entries;

  const TensorEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

struct PackedLayer {
  std::string name;
  BcqWeight weight;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace io {

inline std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::span<const std::uint8_t> in, std::size_t at) { return std::bit_cast<float>(get_u32(in, at)); }

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::Io, "read failure on '" + path.string() + "'");
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) fail(ErrorKind::Io, "write failure on '" + path.string() + "'");
}

/// Frame = magic + header length + JSON + padding. Returns payload start.
inline std::size_t write_frame(std::vector<std::uint8_t>& out, const char (&magic)[5], const nlohmann::json& header) {
  const std::string text = header.dump();
  out.insert(out.end(), magic, magic + 4);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align_up(out.size(), kPayloadAlignment), 0);
  return out.size();
}

struct Frame {
  nlohmann::json header;
  std::span<const std::uint8_t> payload;
};

inline Frame read_frame(std::span<const std::uint8_t> bytes, const char (&magic)[5], const std::string& what) {
  if (bytes.size() < 8 || !std::equal(magic, magic + 4, bytes.begin()))
    fail(ErrorKind::Format, what + ": bad magic, expected '" + std::string(magic, 4) + "'");
  const std::size_t header_len = get_u32(bytes, 4);
  if (8 + header_len > bytes.size())
    fail(ErrorKind::Integrity, what + ": header length " + std::to_string(header_len) + " exceeds file size");
  Frame f;
  try {
    f.header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, what + ": malformed JSON header: " + e.what());
  }
  if (!f.header.is_object()) fail(ErrorKind::Format, what + ": header is not a JSON object");
  const std::size_t start = align_up(8 + header_len, kPayloadAlignment);
  f.payload = start <= bytes.size() ? bytes.subspan(start) : std::span<const std::uint8_t>{};
  return f;
}

template <class T>
T field(const nlohmann::json& obj, const char* key, const std::string& what) {
  if (!obj.is_object() || !obj.contains(key)) fail(ErrorKind::Format, what + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Format, what + ": field '" + key + "' has the wrong type");
  }
}

inline void check_range(std::size_t offset, std::size_t length, std::size_t payload, const std::string& what) {
  if (offset > payload || length > payload - offset)
    fail(ErrorKind::Integrity, what + ": declared range [" + std::to_string(offset) + ", +" +
                                   std::to_string(length) + ") exceeds payload of " + std::to_string(payload) +
                                   " bytes");
}

}  // namespace io

// ---------------------------------------------------------------------------
// SADL
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_tensors(const TensorFile& tf) {
  std::set<std::string> names;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : tf.entries) {
    require(!e.name.empty(), "save_tensors: empty tensor name");
    require(names.insert(e.name).second, "save_tensors: duplicate tensor name '" + e.name + "'");
    require(e.value.rows() > 0 && e.value.cols() > 0,
            "save_tensors: tensor '" + e.name + "' has a zero-sized shape");
    const std::size_t length = e.value.size() * sizeof(float);
    entries.push_back({{"name", e.name},
                       {"dtype", "f32"},
                       {"shape", {e.value.rows(), e.value.cols()}},
                       {"offset", offset},
                       {"length", length}});
    offset = io::align_up(offset + length, kPayloadAlignment);
  }
  const nlohmann::json header = {{"format", "SADL"}, {"version", tf.version}, {"tensors", entries}};
  std::vector<std::uint8_t> out;
  const std::size_t start = io::write_frame(out, "SADL", header);
  for (std::size_t k = 0; k < tf.entries.size(); ++k) {
    out.resize(start + entries[k]["offset"].get<std::size_t>(), 0);
    for (float v : tf.entries[k].value.values()) io::put_f32(out, v);
  }
  return out;
}

inline TensorFile decode_tensors(std::span<const std::uint8_t> bytes, const std::string& what = "SADL") {
  const io::Frame frame = io::read_frame(bytes, "SADL", what);
  TensorFile tf;
  tf.version = io::field<std::uint32_t>(frame.header, "version", what);
  if (tf.version != kSadlVersion) fail(ErrorKind::Format, what + ": unsupported version " + std::to_string(tf.version));
  const auto entries = io::field<nlohmann::json>(frame.header, "tensors", what);
  if (!entries.is_array()) fail(ErrorKind::Format, what + ": 'tensors' is not an array");

  std::set<std::string> names;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& e : entries) {
    TensorEntry t;
    t.name = io::field<std::string>(e, "name", what);
    if (!names.insert(t.name).second) fail(ErrorKind::Validation, what + ": duplicate tensor name '" + t.name + "'");
    const std::string ctx = what + " tensor '" + t.name + "'";
    if (io::field<std::string>(e, "dtype", ctx) != "f32") fail(ErrorKind::Format, ctx + ": unsupported dtype");
    const auto shape = io::field<std::vector<std::size_t>>(e, "shape", ctx);
    if (shape.size() != 2) fail(ErrorKind::Format, ctx + ": shape must have two dimensions");
    if (shape[0] == 0 || shape[1] == 0) fail(ErrorKind::Validation, ctx + ": zero-sized shape");
    const auto offset = io::field<std::size_t>(e, "offset", ctx);
    const auto length = io::field<std::size_t>(e, "length", ctx);
    if (length != shape[0] * shape[1] * sizeof(float))
      fail(ErrorKind::Format, ctx + ": byte length does not match shape");
    io::check_range(offset, length, frame.payload.size(), ctx);
    ranges.emplace_back(offset, length);
    std::vector<float> data(shape[0] * shape[1]);
    for (std::size_t k = 0; k < data.size(); ++k) data[k] = io::get_f32(frame.payload, offset + 4 * k);
    t.value = Matrix(shape[0], shape[1], std::move(data));
    tf.entries.push_back(std::move(t));
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t k = 1; k < ranges.size(); ++k)
    if (ranges[k - 1].first + ranges[k - 1].second > ranges[k].first)
      fail(ErrorKind::Format, what + ": overlapping tensor payloads");
  return tf;
}

inline void save_tensors(const TensorFile& tf, const std::filesystem::path& path) {
  io::write_file(path, encode_tensors(tf));
}

inline TensorFile load_tensors(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_tensors(bytes, "'" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Calibration sets: a SADL file whose tensors are [n, s] input matrices. A layer's
// batches are stored as "<layer>" or "<layer>@<k>"; all batches of a layer are used.
// ---------------------------------------------------------------------------

struct CalibrationSet {
  std::map<std::string, std::vector<Matrix>> layers;

  const std::vector<Matrix>* find(const std::string& layer) const {
    auto it = layers.find(layer);
    return it == layers.end() ? nullptr : &it->second;
  }
};

inline CalibrationSet calibration_from(const TensorFile& tf) {
  CalibrationSet cs;
  std::map<std::string, std::vector<std::pair<std::string, const Matrix*>>> grouped;
  for (const auto& e : tf.entries) {
    const auto at = e.name.rfind('@');
    const std::string layer = at == std::string::npos ? e.name : e.name.substr(0, at);
    grouped[layer].emplace_back(e.name, &e.value);
  }
  for (auto& [layer, batches] : grouped) {
    std::sort(batches.begin(), batches.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [name, m] : batches) {
      if (!cs.layers[layer].empty())
        require(cs.layers[layer].front().rows() == m->rows(),
                "calibration batches of '" + layer + "' disagree on input width");
      cs.layers[layer].push_back(*m);
    }
  }
  return cs;
}

inline TensorFile calibration_to(const CalibrationSet& cs) {
  TensorFile tf;
  for (const auto& [layer, batches] : cs.layers) {
    if (batches.size() == 1) {
      tf.entries.push_back({layer, batches.front()});
      continue;
    }
    for (std::size_t k = 0; k < batches.size(); ++k) {
      char idx[16];
      std::snprintf(idx, sizeof idx, "@%04zu", k);
      tf.entries.push_back({layer + idx, batches[k]});
    }
  }
  return tf;
}

inline CalibrationSet load_calibration(const std::filesystem::path& path) {
  return calibration_from(load_tensors(path));
}

inline void save_calibration(const CalibrationSet& cs, const std::filesystem::path& path) {
  save_tensors(calibration_to(cs), path);
}

// ---------------------------------------------------------------------------
// BCQ1
// ---------------------------------------------------------------------------

inline std::size_t packed_scale_bytes(const ScaleGroup& s) {
  return s.is_pot() ? s.values.size() * static_cast<std::size_t>(s.pot_terms) * 2 : s.values.size() * 4;
}

inline std::size_t packed_plane_bytes(std::size_t rows, std::size_t cols, int bits) {
  return static_cast<std::size_t>(bits) * rows * ((cols + 7) / 8);
}

inline std::vector<std::uint8_t> encode_packed(std::span<const PackedLayer> layers) {
  std::set<std::string> names;
  nlohmann::json entries = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& layer : layers) {
    require(names.insert(layer.name).second, "save_packed: duplicate layer name '" + layer.name + "'");
    const BcqWeight& w = layer.weight;
    w.validate();
    const std::size_t plane_offset = payload.size();
    for (const auto& p : w.planes) payload.insert(payload.end(), p.bytes().begin(), p.bytes().end());
    const std::size_t scale_offset = payload.size();
    if (w.scales.is_pot()) {
      for (const auto& s : w.scales.pot)
        for (const auto& t : s.terms) {
          payload.push_back(static_cast<std::uint8_t>(t.sign));
          payload.push_back(static_cast<std::uint8_t>(t.exponent));
        }
    } else {
      for (float v : w.scales.values) io::put_f32(payload, v);
    }
    const auto& g = w.scales.grouping;
    nlohmann::json grouping = {{"kind", to_string(g.kind)}};
    if (g.kind == GroupingKind::BlockWise) {
      grouping["col_group"] = g.col_group;
      grouping["row_groups"] = g.row_groups;
    }
    entries.push_back({{"name", layer.name},
                       {"rows", w.rows},
                       {"cols", w.cols},
                       {"bits", w.bits},
                       {"grouping", grouping},
                       {"scale_format", w.scales.is_pot() ? "pot" : "f32"},
                       {"pot_terms", w.scales.pot_terms},
                       {"planes", {{"offset", plane_offset}, {"length", scale_offset - plane_offset}}},
                       {"scales", {{"offset", scale_offset}, {"length", payload.size() - scale_offset}}},
                       {"metadata", layer.metadata}});
  }
  const nlohmann::json header = {{"format", "BCQ1"},
                                 {"version", kBcqVersion},
                                 {"checksum", io::hex64(io::fnv1a64(payload))},
                                 {"layers", entries}};
  std::vector<std::uint8_t> out;
  io::write_frame(out, "BCQ1", header);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline std::vector<PackedLayer> decode_packed(std::span<const std::uint8_t> bytes, const std::string& what = "BCQ1") {
  const io::Frame frame = io::read_frame(bytes, "BCQ1", what);
  const auto version = io::field<std::uint32_t>(frame.header, "version", what);
  if (version != kBcqVersion) fail(ErrorKind::Format, what + ": unsupported version " + std::to_string(version));
  const auto layers = io::field<nlohmann::json>(frame.header, "layers", what);
  if (!layers.is_array()) fail(ErrorKind::Format, what + ": 'layers' is not an array");

  std::vector<PackedLayer> out;
  std::set<std::string> names;
  for (const auto& e : layers) {
    PackedLayer layer;
    layer.name = io::field<std::string>(e, "name", what);
    if (!names.insert(layer.name).second) fail(ErrorKind::Validation, what + ": duplicate layer '" + layer.name + "'");
    const std::string ctx = what + " layer '" + layer.name + "'";
    BcqWeight& w = layer.weight;
    w.rows = io::field<std::size_t>(e, "rows", ctx);
    w.cols = io::field<std::size_t>(e, "cols", ctx);
    w.bits = io::field<int>(e, "bits", ctx);
    if (w.rows == 0 || w.cols == 0) fail(ErrorKind::Format, ctx + ": zero-sized shape");
    if (w.bits < 1 || w.bits > kMaxBits) fail(ErrorKind::Format, ctx + ": bits out of range");

    const auto grouping = io::field<nlohmann::json>(e, "grouping", ctx);
    Grouping g;
    g.kind = parse_grouping(io::field<std::string>(grouping, "kind", ctx));
    if (g.kind == GroupingKind::BlockWise) {
      g.col_group = io::field<std::size_t>(grouping, "col_group", ctx);
      g.row_groups = io::field<std::size_t>(grouping, "row_groups", ctx);
      if (g.col_group == 0 || g.row_groups == 0) fail(ErrorKind::Format, ctx + ": zero block size");
    }
    const auto format = io::field<std::string>(e, "scale_format", ctx);
    if (format != "pot" && format != "f32") fail(ErrorKind::Format, ctx + ": unknown scale format '" + format + "'");
    const int pot_terms = format == "pot" ? io::field<int>(e, "pot_terms", ctx) : 0;
    if (format == "pot" && (pot_terms < 1 || pot_terms > 16)) fail(ErrorKind::Format, ctx + ": bad pot_terms");

    BcqWeight shape = make_empty_bcq(w.rows, w.cols, w.bits, g, pot_terms);
    const auto planes = io::field<nlohmann::json>(e, "planes", ctx);
    const auto scales = io::field<nlohmann::json>(e, "scales", ctx);
    const auto plane_offset = io::field<std::size_t>(planes, "offset", ctx);
    const auto plane_length = io::field<std::size_t>(planes, "length", ctx);
    const auto scale_offset = io::field<std::size_t>(scales, "offset", ctx);
    const auto scale_length = io::field<std::size_t>(scales, "length", ctx);
    if (plane_length != packed_plane_bytes(w.rows, w.cols, w.bits))
      fail(ErrorKind::Integrity, ctx + ": plane length " + std::to_string(plane_length) + " does not match shape");
    if (scale_length != packed_scale_bytes(shape.scales))
      fail(ErrorKind::Integrity, ctx + ": scale length " + std::to_string(scale_length) + " does not match grouping");
    io::check_range(plane_offset, plane_length, frame.payload.size(), ctx);
    io::check_range(scale_offset, scale_length, frame.payload.size(), ctx);

    const std::size_t per_plane = plane_length / static_cast<std::size_t>(w.bits);
    for (int i = 0; i < w.bits; ++i) {
      const auto begin = frame.payload.begin() + static_cast<std::ptrdiff_t>(plane_offset + i * per_plane);
      w.planes.emplace_back(w.rows, w.cols, std::vector<std::uint8_t>(begin, begin + static_cast<std::ptrdiff_t>(per_plane)));
    }
    w.scales = std::move(shape.scales);
    if (w.scales.is_pot()) {
      std::size_t at = scale_offset;
      for (std::size_t k = 0; k < w.scales.pot.size(); ++k) {
        for (auto& t : w.scales.pot[k].terms) {
          t.sign = static_cast<std::int8_t>(frame.payload[at++]);
          t.exponent = static_cast<std::int8_t>(frame.payload[at++]);
          if (t.sign < -1 || t.sign > 1) fail(ErrorKind::Integrity, ctx + ": invalid PoT sign byte");
          if (t.sign != 0 && (t.exponent < kMinPotExponent || t.exponent > kMaxPotExponent))
            fail(ErrorKind::Integrity, ctx + ": PoT exponent outside the normal range");
        }
        w.scales.values[k] = pot_value(w.scales.pot[k]);
      }
    } else {
      for (std::size_t k = 0; k < w.scales.values.size(); ++k)
        w.scales.values[k] = io::get_f32(frame.payload, scale_offset + 4 * k);
    }
    if (e.contains("metadata")) layer.metadata = e.at("metadata");
    w.validate();
    out.push_back(std::move(layer));
  }
  if (frame.header.contains("checksum")) {
    const auto expected = io::field<std::string>(frame.header, "checksum", what);
    if (expected != io::hex64(io::fnv1a64(frame.payload)))
      fail(ErrorKind::Integrity, what + ": payload checksum mismatch");
  }
  return out;
}

inline void save_packed(std::span<const PackedLayer> layers, const std::filesystem::path& path) {
  io::write_file(path, encode_packed(layers));
}

inline std::vector<PackedLayer> load_packed(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_packed(bytes, "'" + path.string() + "'");
}

}  // namespace shiftadd
