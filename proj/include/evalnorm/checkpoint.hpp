#pragma once

// Checkpoint container, little-endian throughout:
//
//   "ENCK"  u32 version  u32 entry_count
//   entry:  u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 dims[rank]  payload
//
// dtype 1 = f64, 2 = u8 (text), 3 = u64. Payload holds product(dims) elements
// (1 for rank 0). Entry names are grouped by prefix:
//   spec/...            model structure
//   model/<param>       weights
//   ema/<layer>/...     EMA state
//   en/<layer>/...      EnParams (absent when never estimated)
//   config, step        run configuration echo and step counter

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "evalnorm/config.hpp"
#include "evalnorm/errors.hpp"
#include "evalnorm/model.hpp"

namespace evalnorm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F64 = 1, U8 = 2, U64 = 3 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<CheckpointEntry> entries;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  const CheckpointEntry& at(const std::string& name) const {
    if (const auto* e = find(name)) return *e;
    throw ConfigError("checkpoint has no entry " + name);
  }
};

namespace detail {

inline std::size_t dtype_width(DType t) {
  switch (t) {
    case DType::F64:
    case DType::U64:
      return 8;
    case DType::U8:
      return 1;
  }
  return 0;
}

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (in.size() - pos < sizeof(T) || pos > in.size()) throw FormatError("truncated checkpoint", pos);
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out{'E', 'N', 'C', 'K'};
  detail::put_le<std::uint32_t>(out, ck.version);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_le<std::uint64_t>(out, d);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> in) {
  if (in.size() < 4) throw FormatError("truncated checkpoint header", in.size());
  if (std::memcmp(in.data(), "ENCK", 4) != 0) throw FormatError("bad checkpoint magic", 0);
  std::size_t pos = 4;
  Checkpoint ck;
  ck.version = detail::get_le<std::uint32_t>(in, pos);
  if (ck.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(ck.version), 4);
  }
  const auto count = detail::get_le<std::uint32_t>(in, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = detail::get_le<std::uint32_t>(in, pos);
    if (in.size() - pos < name_len) throw FormatError("truncated entry name", pos);
    e.name.assign(reinterpret_cast<const char*>(in.data() + pos), name_len);
    pos += name_len;
    if (pos >= in.size()) throw FormatError("truncated entry dtype", pos);
    const auto tag = in[pos];
    if (tag < 1 || tag > 3) throw FormatError("unknown dtype tag " + std::to_string(tag), pos);
    e.dtype = static_cast<DType>(tag);
    ++pos;
    const auto rank = detail::get_le<std::uint32_t>(in, pos);
    std::uint64_t elements = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.dims.push_back(detail::get_le<std::uint64_t>(in, pos));
      elements *= e.dims.back();
    }
    const std::uint64_t bytes = elements * detail::dtype_width(e.dtype);
    if (in.size() - pos < bytes) throw FormatError("truncated payload for " + e.name, pos);
    e.payload.assign(in.begin() + static_cast<std::ptrdiff_t>(pos),
                     in.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
    pos += bytes;
    ck.entries.push_back(std::move(e));
  }
  if (pos != in.size()) throw FormatError("trailing bytes after last entry", pos);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " in " + path, e.offset());
  }
}

// ---------------------------------------------------------------------------
// Typed entry helpers
// ---------------------------------------------------------------------------

inline CheckpointEntry f64_entry(std::string name, const Shape& shape, std::span<const double> values) {
  CheckpointEntry e{std::move(name), DType::F64, {shape.begin(), shape.end()}, {}};
  for (double v : values) detail::put_le<double>(e.payload, v);
  return e;
}

inline CheckpointEntry u64_entry(std::string name, std::span<const std::uint64_t> values) {
  CheckpointEntry e{std::move(name), DType::U64, {values.size()}, {}};
  for (auto v : values) detail::put_le<std::uint64_t>(e.payload, v);
  return e;
}

inline CheckpointEntry text_entry(std::string name, const std::string& text) {
  return {std::move(name), DType::U8, {text.size()}, {text.begin(), text.end()}};
}

inline Tensor entry_tensor(const CheckpointEntry& e) {
  if (e.dtype != DType::F64) throw ConfigError("entry " + e.name + " is not f64");
  Shape shape(e.dims.begin(), e.dims.end());
  std::vector<double> v(shape_size(shape));
  std::size_t pos = 0;
  for (auto& x : v) x = detail::get_le<double>(e.payload, pos);
  return Tensor(shape, std::move(v));
}

inline std::vector<std::uint64_t> entry_u64(const CheckpointEntry& e) {
  if (e.dtype != DType::U64) throw ConfigError("entry " + e.name + " is not u64");
  std::vector<std::uint64_t> v(e.payload.size() / 8);
  std::size_t pos = 0;
  for (auto& x : v) x = detail::get_le<std::uint64_t>(e.payload, pos);
  return v;
}

inline std::string entry_text(const CheckpointEntry& e) {
  if (e.dtype != DType::U8) throw ConfigError("entry " + e.name + " is not text");
  return {e.payload.begin(), e.payload.end()};
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

inline Checkpoint make_checkpoint(const Model& model, const RunConfig& cfg, std::uint64_t step) {
  Checkpoint ck;
  auto& E = ck.entries;
  const auto& s = model.spec;
  E.push_back(text_entry("spec/kind", to_string(s.kind)));
  const std::vector<std::uint64_t> in(s.input_shape.begin(), s.input_shape.end());
  const std::vector<std::uint64_t> widths(s.widths.begin(), s.widths.end());
  std::vector<std::uint64_t> flags;
  for (std::size_t i = 0; i < s.widths.size(); ++i) flags.push_back(s.normalized(i) ? 1 : 0);
  const std::vector<std::uint64_t> classes{s.num_classes};
  E.push_back(u64_entry("spec/input_shape", in));
  E.push_back(u64_entry("spec/widths", widths));
  E.push_back(u64_entry("spec/normalize", flags));
  E.push_back(u64_entry("spec/num_classes", classes));
  for (const auto& p : model.params) E.push_back(f64_entry("model/" + p.name, p.value.shape(), p.value.values()));
  for (const auto& n : model.norms) {
    const Shape c{n.ema.channels()};
    E.push_back(f64_entry("ema/" + n.id + "/mean", c, n.ema.mean));
    E.push_back(f64_entry("ema/" + n.id + "/variance", c, n.ema.variance));
    const double decay = n.ema.decay;
    E.push_back(f64_entry("ema/" + n.id + "/decay", {}, std::span<const double>(&decay, 1)));
    const std::uint64_t updates = n.ema.update_count;
    E.push_back(u64_entry("ema/" + n.id + "/update_count", std::span<const std::uint64_t>(&updates, 1)));
  }
  for (const auto& n : model.norms) {
    if (!n.en) continue;
    const double v[4] = {n.en->alpha_hat, n.en->beta_hat, n.en->velocity_alpha, n.en->velocity_beta};
    E.push_back(f64_entry("en/" + n.id + "/alpha_hat", {}, std::span<const double>(v, 1)));
    E.push_back(f64_entry("en/" + n.id + "/beta_hat", {}, std::span<const double>(v + 1, 1)));
    E.push_back(f64_entry("en/" + n.id + "/velocity", {2}, std::span<const double>(v + 2, 2)));
  }
  E.push_back(text_entry("config", serialize_config(cfg)));
  E.push_back(u64_entry("step", std::span<const std::uint64_t>(&step, 1)));
  return ck;
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
  ModelSpec spec;
  spec.kind = parse_model_kind(entry_text(ck.at("spec/kind")));
  const auto in = entry_u64(ck.at("spec/input_shape"));
  spec.input_shape.assign(in.begin(), in.end());
  const auto widths = entry_u64(ck.at("spec/widths"));
  spec.widths.assign(widths.begin(), widths.end());
  spec.normalize.clear();
  for (auto f : entry_u64(ck.at("spec/normalize"))) spec.normalize.push_back(f != 0);
  spec.num_classes = entry_u64(ck.at("spec/num_classes")).at(0);

  Model m = build(spec, 0);
  for (auto& p : m.params) {
    Tensor t = entry_tensor(ck.at("model/" + p.name));
    if (t.shape() != p.value.shape()) throw ConfigError("checkpoint shape mismatch for " + p.name);
    p.value = std::move(t);
  }
  for (auto& n : m.norms) {
    const Tensor mean = entry_tensor(ck.at("ema/" + n.id + "/mean"));
    n.ema.mean.assign(mean.values().begin(), mean.values().end());
    const Tensor var = entry_tensor(ck.at("ema/" + n.id + "/variance"));
    n.ema.variance.assign(var.values().begin(), var.values().end());
    n.ema.decay = entry_tensor(ck.at("ema/" + n.id + "/decay")).item();
    n.ema.update_count = entry_u64(ck.at("ema/" + n.id + "/update_count")).at(0);
    if (ck.find("en/" + n.id + "/alpha_hat")) {
      EnParams p;
      p.layer_id = n.id;
      p.alpha_hat = entry_tensor(ck.at("en/" + n.id + "/alpha_hat")).item();
      p.beta_hat = entry_tensor(ck.at("en/" + n.id + "/beta_hat")).item();
      const Tensor vel = entry_tensor(ck.at("en/" + n.id + "/velocity"));
      p.velocity_alpha = vel[0];
      p.velocity_beta = vel[1];
      n.en = p;
    }
  }
  return m;
}

inline RunConfig config_from_checkpoint(const Checkpoint& ck) { return parse_config(entry_text(ck.at("config"))); }

inline std::uint64_t step_from_checkpoint(const Checkpoint& ck) { return entry_u64(ck.at("step")).at(0); }

}  // namespace evalnorm
