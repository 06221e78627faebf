#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vitad/pnm.hpp"
#include "vitad/scoring.hpp"
#include "vitad/train.hpp"

namespace vitad {

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline constexpr char kArchiveMagic[4] = {'V', 'T', 'A', 'D'};
inline constexpr std::uint16_t kArchiveVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }
  [[noreturn]] void fail(const std::string& m) const {
    throw FormatError(detail::concat("archive: ", m, " at byte offset ", pos_));
  }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n)
      fail(detail::concat("truncated, need ", n, " more bytes, have ", b_.size() - pos_));
  }

 private:
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Weight archive bytes. Layout, little-endian:
///   "VTAD" | u16 version | u32 count |
///   per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 extents[ndim] |
///               u32 payload_bytes | payload
inline std::vector<std::uint8_t> encode_archive(const NamedTensors& tensors) {
  std::set<std::string> seen;
  detail::ByteWriter w;
  w.bytes(kArchiveMagic, 4);
  w.u16(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw ContractError("archive: duplicate tensor name " + name);
    if (name.size() > 0xffff) throw ContractError("archive: tensor name too long");
    if (t.rank() == 0 || t.rank() > 255) throw ContractError("archive: unsupported rank for " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    w.u32(static_cast<std::uint32_t>(t.numel() * 4));
    for (float v : t.data()) w.f32(v);
  }
  return std::move(w.buffer());
}

inline NamedTensors decode_archive(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != std::string(kArchiveMagic, 4)) {
    throw FormatError("archive: bad magic at byte offset 0");
  }
  const auto version = r.u16();
  if (version != kArchiveVersion) r.fail(detail::concat("unsupported version ", version));
  const auto count = r.u32();
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.u16();
    std::string name = r.str(len);
    if (!seen.insert(name).second) r.fail("duplicate tensor name " + name);
    const auto dtype = r.u8();
    if (dtype != kDtypeF32) r.fail(detail::concat("unknown dtype tag ", static_cast<int>(dtype)));
    const auto ndim = r.u8();
    if (ndim == 0) r.fail("tensor " + name + " has rank 0");
    Shape shape;
    std::size_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto e = r.u32();
      if (e == 0) r.fail("tensor " + name + " has a zero extent");
      shape.push_back(e);
      numel *= e;
    }
    const auto payload = r.u32();
    if (payload != numel * 4) r.fail(detail::concat("payload size ", payload, " does not match shape of ", name));
    r.need(payload);
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = r.f32();
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");
  return out;
}

inline void save_archive(const NamedTensors& tensors, const fs::path& path) {
  write_file_bytes(path, encode_archive(tensors));
}

inline NamedTensors load_archive(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_archive(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Every parameter of the model (encoder included) in store order.
template <typename T>
NamedTensors model_tensors(const ParamStore<T>& store) {
  NamedTensors out;
  for (const auto& e : store.entries()) out.emplace_back(e.param->name, e.param->value.template cast<float>());
  return out;
}

/// Overwrites model parameters from an archive. Every model parameter must be
/// present with a matching shape; unknown archive entries are rejected.
template <typename T>
void load_into(ParamStore<T>& store, const NamedTensors& tensors) {
  std::set<std::string> seen;
  for (const auto& [name, t] : tensors) {
    if (!store.contains(name)) throw FormatError("archive tensor " + name + " is not a model parameter");
    auto& p = store.get(name);
    if (p.value.shape() != t.shape())
      throw FormatError("archive tensor " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                        shape_str(p.value.shape()));
    p.value = t.template cast<T>();
    seen.insert(name);
  }
  for (const auto& e : store.entries())
    if (!seen.contains(e.param->name)) throw FormatError("archive lacks model parameter " + e.param->name);
}

/// Copies the `encoder.*` tensors of an archive into the store (for
/// externally converted pretrained weights). Other entries are ignored.
template <typename T>
std::size_t load_encoder_weights(ParamStore<T>& store, const NamedTensors& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) {
    if (name.rfind("encoder.", 0) != 0) continue;
    if (!store.contains(name)) throw FormatError("encoder weight " + name + " is not a model parameter");
    auto& p = store.get(name);
    if (p.value.shape() != t.shape())
      throw FormatError("encoder weight " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                        shape_str(p.value.shape()));
    p.value = t.template cast<T>();
    ++n;
  }
  if (n != store.group(ParamGroup::encoder).size())
    throw FormatError(detail::concat("encoder weights cover ", n, " of ", store.group(ParamGroup::encoder).size(),
                                     " encoder tensors"));
  return n;
}

/// P5 export of a map, min-max scaled per image, plus a text sidecar holding
/// the scale and the raw values.
struct MapExport {
  double min = 0;
  double max = 0;
  double image_score = 0;
};

inline MapExport export_anomaly_map(const AnomalyMap<float>& map, const fs::path& pgm_path) {
  const auto& m = map.pixel_map;
  if (m.rank() != 2) throw DimensionError("export_anomaly_map expects an [H,W] map");
  if (!m.all_finite()) throw NumericalError("export_anomaly_map: map is not finite");
  MapExport ex{m.min(), m.max(), map.image_score};
  const double range = ex.max - ex.min;
  std::vector<std::uint8_t> px(m.numel());
  for (std::size_t i = 0; i < m.numel(); ++i)
    px[i] = range > 0 ? to_byte((m[i] - ex.min) / range) : 0;
  write_file_bytes(pgm_path, encode_pgm_bytes(px, m.dim(0), m.dim(1)));
  std::ostringstream side;
  side << std::setprecision(17);
  side << "min=" << ex.min << "\nmax=" << ex.max << "\nscale=" << (range > 0 ? 255.0 / range : 0.0)
       << "\nimage_score=" << ex.image_score << "\n";
  const std::string s = side.str();
  fs::path side_path = pgm_path;
  side_path += ".txt";
  write_file_bytes(side_path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  return ex;
}

/// One-decimal percentage, empty for an absent value.
inline std::string format_percent(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", *v * 100.0 + 0.0);
  return buf;
}

inline std::string report_csv(const std::vector<std::string>& classes,
                              const std::vector<metrics::MetricReport>& per_class,
                              const metrics::MetricReport& mean) {
  std::ostringstream out;
  out << "class";
  for (const char* n : metrics::kMetricNames) out << "," << n;
  out << ",mad\n";
  auto row = [&](const std::string& name, const metrics::MetricReport& r) {
    out << name;
    for (const auto& v : r.values) out << "," << format_percent(v);
    out << "," << format_percent(r.mad()) << "\n";
  };
  for (std::size_t i = 0; i < classes.size(); ++i) row(classes[i], per_class[i]);
  row("mean", mean);
  return out.str();
}

inline nlohmann::json report_json(const metrics::MetricReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t f = 0; f < 7; ++f)
    j[metrics::kMetricNames[f]] = r.values[f] ? nlohmann::json(*r.values[f]) : nlohmann::json(nullptr);
  const auto mad = r.mad();
  j["mad"] = mad ? nlohmann::json(*mad) : nlohmann::json(nullptr);
  return j;
}

/// Writes `<path>` (CSV, x100 with one decimal) and `<path>.json` (full precision).
inline void write_report(const std::vector<std::string>& classes,
                         const std::vector<metrics::MetricReport>& per_class,
                         const metrics::MetricReport& mean, const fs::path& path) {
  if (classes.size() != per_class.size()) throw ContractError("write_report: class/report count mismatch");
  const auto csv = report_csv(classes, per_class, mean);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  nlohmann::json j;
  j["classes"] = nlohmann::json::object();
  for (std::size_t i = 0; i < classes.size(); ++i) j["classes"][classes[i]] = report_json(per_class[i]);
  j["mean"] = report_json(mean);
  const auto s = j.dump(2) + "\n";
  fs::path side = path;
  side += ".json";
  write_file_bytes(side, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline void write_report(const EvalResult& r, const fs::path& path) {
  write_report(r.classes, r.per_class, r.mean, path);
}

inline nlohmann::json manifest_json(const RunManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["config"] = nlohmann::json::object();
  for (const auto& [k, v] : m.resolved_config) j["config"][k] = v;
  char fp[32];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(m.dataset_fingerprint));
  j["dataset_fingerprint"] = fp;
  j["wall_seconds"] = m.wall_seconds;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : m.epochs)
    j["epochs"].push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"mean_loss", e.mean_loss}, {"steps", e.steps}});
  j["step_losses"] = m.step_losses;
  j["evals"] = nlohmann::json::array();
  for (const auto& e : m.evals) {
    nlohmann::json ej{{"epoch", e.epoch}, {"mean", report_json(e.mean)}};
    ej["per_class"] = nlohmann::json::array();
    for (const auto& r : e.per_class) ej["per_class"].push_back(report_json(r));
    j["evals"].push_back(ej);
  }
  j["best_epoch"] = m.best_epoch;
  char h[2][32];
  std::snprintf(h[0], sizeof h[0], "%016llx", static_cast<unsigned long long>(m.encoder_hash_before));
  std::snprintf(h[1], sizeof h[1], "%016llx", static_cast<unsigned long long>(m.encoder_hash_after));
  j["encoder_hash_before"] = h[0];
  j["encoder_hash_after"] = h[1];
  return j;
}

inline void write_manifest(const RunManifest& m, const fs::path& path) {
  const auto s = manifest_json(m).dump(2) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace vitad
