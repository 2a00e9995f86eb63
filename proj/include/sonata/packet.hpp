#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/value.hpp"

namespace sonata {

// Built-in packet-tuple fields. Order is the canonical trace column order.
enum class Field : std::uint8_t {
  ts,
  size,
  locationID,
  srcIP,
  dstIP,
  srcPort,
  dstPort,
  proto,
  srcMac,
  dstMac,
  dns_qname,
  dns_rr_type,
  dns_ttl,
  dns_aIP,
  payload_len,
  sessionID,
  userAgent,
};

inline constexpr std::size_t kFieldCount = 17;

struct FieldInfo {
  std::string_view name;
  FieldType type;
  bool optional;      // absent when the packet lacks the protocol layer
  bool hierarchical;  // usable as a refinement key
  bool in_plane;      // extractable by a switch parser
};

inline constexpr std::array<FieldInfo, kFieldCount> kFields{{
    {"ts", FieldType::Float, false, false, true},
    {"size", FieldType::U32, false, false, true},
    {"locationID", FieldType::U32, false, false, true},
    {"srcIP", FieldType::Ipv4, false, true, true},
    {"dstIP", FieldType::Ipv4, false, true, true},
    {"srcPort", FieldType::U16, false, false, true},
    {"dstPort", FieldType::U16, false, false, true},
    {"proto", FieldType::U8, false, false, true},
    {"srcMac", FieldType::Mac, true, false, true},
    {"dstMac", FieldType::Mac, true, false, true},
    {"dns_qname", FieldType::Str, true, true, true},
    {"dns_rr_type", FieldType::U16, true, false, true},
    {"dns_ttl", FieldType::U32, true, false, true},
    {"dns_aIP", FieldType::Ipv4, true, true, true},
    {"payload_len", FieldType::U32, true, false, true},
    {"sessionID", FieldType::Str, true, false, false},
    {"userAgent", FieldType::Str, true, false, false},
}};

inline const FieldInfo& info(Field f) { return kFields[static_cast<std::size_t>(f)]; }

inline std::optional<Field> find_field(std::string_view name) {
  for (std::size_t i = 0; i < kFieldCount; ++i)
    if (kFields[i].name == name) return static_cast<Field>(i);
  return std::nullopt;
}

// Extension columns carry this prefix in traces and queries.
inline constexpr std::string_view kExtensionPrefix = "ext_";

inline bool is_extension_name(std::string_view name) {
  return name.size() > kExtensionPrefix.size() && name.substr(0, kExtensionPrefix.size()) == kExtensionPrefix;
}

// One packet as a flat field map. Built-in fields live in a fixed array indexed by Field;
// extensions keep their declaration order.
class PacketTuple {
 public:
  PacketTuple() {
    values_[static_cast<std::size_t>(Field::ts)] = 0.0;
    values_[static_cast<std::size_t>(Field::size)] = std::int64_t{1};
    for (auto f : {Field::locationID, Field::srcIP, Field::dstIP, Field::srcPort, Field::dstPort, Field::proto})
      values_[static_cast<std::size_t>(f)] = std::int64_t{0};
  }

  const Value& get(Field f) const { return values_[static_cast<std::size_t>(f)]; }

  // Extension lookup; returns an absent value when not present.
  const Value& get(std::string_view ext_name) const {
    static const Value absent{};
    for (const auto& [name, v] : extensions_)
      if (name == ext_name) return v;
    return absent;
  }

  void set(Field f, Value v) { values_[static_cast<std::size_t>(f)] = std::move(v); }

  void set_extension(std::string name, Value v) {
    for (auto& [n, old] : extensions_) {
      if (n == name) {
        old = std::move(v);
        return;
      }
    }
    extensions_.emplace_back(std::move(name), std::move(v));
  }

  const std::vector<std::pair<std::string, Value>>& extensions() const { return extensions_; }

  double ts() const { return std::get<double>(get(Field::ts)); }
  std::uint32_t size() const { return static_cast<std::uint32_t>(std::get<std::int64_t>(get(Field::size))); }

  PacketTuple& with(Field f, Value v) {
    set(f, std::move(v));
    return *this;
  }

 private:
  std::array<Value, kFieldCount> values_{};
  std::vector<std::pair<std::string, Value>> extensions_;
};

// A trace column: built-in field or extension.
struct ColumnSpec {
  std::string name;
  FieldType type;
  std::optional<Field> field;  // nullopt for extensions
};

using TraceSchema = std::vector<ColumnSpec>;

// Typed name list used for validation and stage schemas.
struct FieldDesc {
  std::string name;
  FieldType type;
  friend bool operator==(const FieldDesc&, const FieldDesc&) = default;
};

using Schema = std::vector<FieldDesc>;

inline Schema default_packet_schema() {
  Schema s;
  for (const auto& f : kFields) s.push_back({std::string(f.name), f.type});
  return s;
}

inline Schema to_schema(const TraceSchema& ts) {
  Schema s;
  for (const auto& c : ts) s.push_back({c.name, c.type});
  return s;
}

inline std::optional<std::size_t> find_column(const Schema& s, std::string_view name) {
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].name == name) return i;
  return std::nullopt;
}

inline bool is_hierarchical(std::string_view name, FieldType type) {
  if (auto f = find_field(name)) return info(*f).hierarchical;
  return type == FieldType::Ipv4;
}

// ---------------------------------------------------------------------------
// Trace files: header of `name[:type]` columns, then one CSV record per packet.

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t end = line.find(',', pos);
    if (end == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline TraceSchema parse_trace_header(std::string_view line) {
  TraceSchema schema;
  std::size_t col = 1;
  for (auto raw : detail::split_csv(line)) {
    auto cell = detail::trim(raw);
    std::string_view name = cell, type_text;
    if (auto colon = cell.find(':'); colon != std::string_view::npos) {
      name = cell.substr(0, colon);
      type_text = cell.substr(colon + 1);
    }
    if (name.empty()) throw ParseError("empty column name", 1, col);
    ColumnSpec spec{std::string(name), FieldType::Str, find_field(name)};
    if (spec.field) {
      spec.type = info(*spec.field).type;
      if (!type_text.empty()) {
        auto t = parse_type_name(type_text);
        if (!t || *t != spec.type)
          throw ParseError("column '" + spec.name + "' must have type " + std::string(type_name(spec.type)), 1,
                           col);
      }
    } else if (is_extension_name(name)) {
      if (type_text.empty()) throw ParseError("extension column '" + spec.name + "' needs a type", 1, col);
      auto t = parse_type_name(type_text);
      if (!t) throw ParseError("unknown type '" + std::string(type_text) + "'", 1, col);
      spec.type = *t;
    } else {
      throw ParseError("unknown column '" + spec.name + "'", 1, col);
    }
    for (const auto& prev : schema)
      if (prev.name == spec.name) throw ParseError("duplicate column '" + spec.name + "'", 1, col);
    schema.push_back(std::move(spec));
    ++col;
  }
  return schema;
}

struct Trace {
  TraceSchema schema;
  std::vector<PacketTuple> packets;
};

// Parse a whole trace. Throws ParseError on malformed lines and OrderingError on
// decreasing timestamps.
inline Trace parse_trace(std::istream& in) {
  Trace trace;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  trace.schema = parse_trace_header(detail::trim(line));
  bool has_ts = false;
  for (const auto& c : trace.schema) has_ts |= (c.field == Field::ts);
  if (!has_ts) throw ParseError("trace needs a 'ts' column", 1);

  std::size_t lineno = 1;
  double last_ts = 0.0;
  while (std::getline(in, line)) {
    ++lineno;
    auto text = detail::trim(line);
    if (text.empty()) continue;
    auto cells = detail::split_csv(text);
    if (cells.size() != trace.schema.size())
      throw ParseError("expected " + std::to_string(trace.schema.size()) + " values, got " +
                           std::to_string(cells.size()),
                       lineno);
    PacketTuple pkt;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto& col = trace.schema[i];
      auto v = parse_value(cells[i], col.type);
      if (!v) throw ParseError("bad " + std::string(type_name(col.type)) + " value for '" + col.name + "'", lineno, i + 1);
      if (col.field) {
        const auto& fi = info(*col.field);
        if (is_absent(*v) && !fi.optional) throw ParseError("missing value for '" + col.name + "'", lineno, i + 1);
        pkt.set(*col.field, std::move(*v));
      } else if (!is_absent(*v)) {
        pkt.set_extension(col.name, std::move(*v));
      }
    }
    if (pkt.ts() < 0) throw ParseError("negative timestamp", lineno);
    if (pkt.size() < 1) throw ParseError("packet size must be at least 1", lineno);
    if (!trace.packets.empty() && pkt.ts() < last_ts)
      throw OrderingError("line " + std::to_string(lineno) + ": timestamp goes backwards");
    last_ts = pkt.ts();
    trace.packets.push_back(std::move(pkt));
  }
  return trace;
}

inline Trace parse_trace(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_trace(in);
}

inline void write_trace(std::ostream& out, const Trace& trace) {
  for (std::size_t i = 0; i < trace.schema.size(); ++i) {
    if (i) out << ',';
    out << trace.schema[i].name << ':' << type_name(trace.schema[i].type);
  }
  out << '\n';
  for (const auto& pkt : trace.packets) {
    for (std::size_t i = 0; i < trace.schema.size(); ++i) {
      if (i) out << ',';
      const auto& col = trace.schema[i];
      out << format_value(col.field ? pkt.get(*col.field) : pkt.get(col.name), col.type);
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Tumbling windows

struct TraceWindow {
  std::size_t index = 0;
  double start_ts = 0.0;
  double end_ts = 0.0;
  std::vector<PacketTuple> packets;
};

inline double default_origin(const std::vector<PacketTuple>& packets, double width) {
  if (packets.empty()) return 0.0;
  return std::floor(packets.front().ts() / width) * width;
}

// Split packets into consecutive [origin + kW, origin + (k+1)W) windows, emitting empty
// windows between occupied ones.
inline std::vector<TraceWindow> window_partition(const std::vector<PacketTuple>& packets, double width,
                                                 double origin) {
  if (!(width > 0)) throw ArgumentError("window width must be positive");
  std::vector<TraceWindow> windows;
  for (const auto& pkt : packets) {
    if (pkt.ts() < origin) throw ArgumentError("packet precedes window origin");
    auto k = static_cast<std::size_t>(std::floor((pkt.ts() - origin) / width));
    // guard against floating-point edge effects at boundaries
    while (origin + static_cast<double>(k) * width > pkt.ts() && k > 0) --k;
    while (origin + static_cast<double>(k + 1) * width <= pkt.ts()) ++k;
    if (!windows.empty() && k < windows.back().index) throw OrderingError("packets not ordered by ts");
    while (windows.size() <= k) {
      TraceWindow w;
      w.index = windows.size();
      w.start_ts = origin + static_cast<double>(w.index) * width;
      w.end_ts = w.start_ts + width;
      windows.push_back(std::move(w));
    }
    windows[k].packets.push_back(pkt);
  }
  return windows;
}

inline std::vector<TraceWindow> window_partition(const std::vector<PacketTuple>& packets, double width) {
  return window_partition(packets, width, default_origin(packets, width));
}

// Mask a hierarchical field value to `level`.
inline Value mask_field(const Value& v, std::string_view field, int level) {
  auto f = find_field(field);
  if (!f || !info(*f).hierarchical) throw ArgumentError("field '" + std::string(field) + "' is not hierarchical");
  return mask_value(v, info(*f).type, level);
}

}  // namespace sonata
