#pragma once

#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sonata/error.hpp"

namespace sonata {

enum class FieldType { Float, U8, U16, U32, U64, Ipv4, Mac, Str };

inline std::string_view type_name(FieldType t) {
  switch (t) {
    case FieldType::Float: return "float";
    case FieldType::U8: return "u8";
    case FieldType::U16: return "u16";
    case FieldType::U32: return "u32";
    case FieldType::U64: return "u64";
    case FieldType::Ipv4: return "ipv4";
    case FieldType::Mac: return "mac";
    case FieldType::Str: return "str";
  }
  return "?";
}

inline std::optional<FieldType> parse_type_name(std::string_view s) {
  if (s == "float") return FieldType::Float;
  if (s == "u8") return FieldType::U8;
  if (s == "u16") return FieldType::U16;
  if (s == "u32") return FieldType::U32;
  if (s == "u64") return FieldType::U64;
  if (s == "ipv4") return FieldType::Ipv4;
  if (s == "mac") return FieldType::Mac;
  if (s == "str") return FieldType::Str;
  return std::nullopt;
}

inline bool is_integral(FieldType t) {
  return t != FieldType::Float && t != FieldType::Str;
}

inline bool is_numeric(FieldType t) { return t != FieldType::Str; }

// Bit width charged for one stored value of this type; strings are charged per byte at use.
inline unsigned type_bits(FieldType t) {
  switch (t) {
    case FieldType::U8: return 8;
    case FieldType::U16: return 16;
    case FieldType::U32: return 32;
    case FieldType::Ipv4: return 32;
    case FieldType::Mac: return 48;
    case FieldType::Float:
    case FieldType::U64: return 64;
    case FieldType::Str: return 0;
  }
  return 0;
}

// A single typed cell. std::monostate marks an absent optional field.
using Value = std::variant<std::monostate, std::int64_t, double, std::string>;

inline bool is_absent(const Value& v) { return std::holds_alternative<std::monostate>(v); }

// Total order used for sorting outputs and keys: absent < numbers < strings.
// Integers and doubles compare numerically.
inline std::strong_ordering compare_values(const Value& a, const Value& b) {
  auto rank = [](const Value& v) {
    if (is_absent(v)) return 0;
    if (std::holds_alternative<std::string>(v)) return 2;
    return 1;
  };
  int ra = rank(a), rb = rank(b);
  if (ra != rb) return ra <=> rb;
  if (ra == 0) return std::strong_ordering::equal;
  if (ra == 2) return std::get<std::string>(a).compare(std::get<std::string>(b)) <=> 0;
  if (std::holds_alternative<std::int64_t>(a) && std::holds_alternative<std::int64_t>(b))
    return std::get<std::int64_t>(a) <=> std::get<std::int64_t>(b);
  double da = std::holds_alternative<double>(a) ? std::get<double>(a)
                                                : static_cast<double>(std::get<std::int64_t>(a));
  double db = std::holds_alternative<double>(b) ? std::get<double>(b)
                                                : static_cast<double>(std::get<std::int64_t>(b));
  if (da < db) return std::strong_ordering::less;
  if (da > db) return std::strong_ordering::greater;
  if (da == db) {
    // keep int 3 and double 3.0 distinguishable but adjacent
    bool ia = std::holds_alternative<std::int64_t>(a), ib = std::holds_alternative<std::int64_t>(b);
    return ib <=> ia;
  }
  return std::strong_ordering::equal;  // NaN
}

inline double as_double(const Value& v) {
  if (auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  if (auto* d = std::get_if<double>(&v)) return *d;
  return 0.0;
}

using Record = std::vector<Value>;

struct RecordLess {
  bool operator()(const Record& a, const Record& b) const {
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
      auto c = compare_values(a[i], b[i]);
      if (c != 0) return c < 0;
    }
    return a.size() < b.size();
  }
};

struct ValueLess {
  bool operator()(const Value& a, const Value& b) const { return compare_values(a, b) < 0; }
};

// ---------------------------------------------------------------------------
// IPv4 / MAC text forms

inline std::optional<std::uint32_t> parse_ipv4(std::string_view s) {
  std::uint32_t out = 0;
  int parts = 0;
  std::size_t pos = 0;
  while (true) {
    std::size_t end = s.find('.', pos);
    std::string_view part = s.substr(pos, end == std::string_view::npos ? s.size() - pos : end - pos);
    unsigned octet = 0;
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), octet);
    if (part.empty() || part.size() > 3 || ec != std::errc{} || p != part.data() + part.size() ||
        octet > 255 || ++parts > 4)
      return std::nullopt;
    out = (out << 8) | octet;
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  if (parts != 4) return std::nullopt;
  return out;
}

inline std::string format_ipv4(std::uint32_t ip) {
  return std::to_string(ip >> 24) + "." + std::to_string((ip >> 16) & 0xff) + "." +
         std::to_string((ip >> 8) & 0xff) + "." + std::to_string(ip & 0xff);
}

inline std::optional<std::uint64_t> parse_mac(std::string_view s) {
  if (s.size() != 17) return std::nullopt;
  std::uint64_t out = 0;
  for (int i = 0; i < 6; ++i) {
    if (i > 0 && s[i * 3 - 1] != ':') return std::nullopt;
    unsigned byte = 0;
    auto [p, ec] = std::from_chars(s.data() + i * 3, s.data() + i * 3 + 2, byte, 16);
    if (ec != std::errc{} || p != s.data() + i * 3 + 2) return std::nullopt;
    out = (out << 8) | byte;
  }
  return out;
}

inline std::string format_mac(std::uint64_t mac) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (int i = 5; i >= 0; --i) {
    unsigned byte = (mac >> (i * 8)) & 0xff;
    out += hex[byte >> 4];
    out += hex[byte & 0xf];
    if (i > 0) out += ':';
  }
  return out;
}

inline std::string format_double(double d) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, p);
}

// Render a value for CSV/debug output according to its column type.
inline std::string format_value(const Value& v, FieldType t) {
  if (is_absent(v)) return "";
  if (auto* s = std::get_if<std::string>(&v)) return *s;
  if (auto* d = std::get_if<double>(&v)) return format_double(*d);
  auto i = std::get<std::int64_t>(v);
  if (t == FieldType::Ipv4) return format_ipv4(static_cast<std::uint32_t>(i));
  if (t == FieldType::Mac) return format_mac(static_cast<std::uint64_t>(i));
  return std::to_string(i);
}

// Parse a CSV cell. Empty text yields an absent value; returns nullopt on type violation.
inline std::optional<Value> parse_value(std::string_view s, FieldType t) {
  if (s.empty()) return Value{};
  auto parse_uint = [&](std::uint64_t max) -> std::optional<Value> {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc{} || p != s.data() + s.size() || x > max) return std::nullopt;
    return Value{static_cast<std::int64_t>(x)};
  };
  switch (t) {
    case FieldType::Float: {
      double d = 0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), d);
      if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(d)) return std::nullopt;
      return Value{d};
    }
    case FieldType::U8: return parse_uint(0xff);
    case FieldType::U16: return parse_uint(0xffff);
    case FieldType::U32: return parse_uint(0xffffffffULL);
    case FieldType::U64: return parse_uint(static_cast<std::uint64_t>(INT64_MAX));
    case FieldType::Ipv4: {
      auto ip = parse_ipv4(s);
      if (!ip) return std::nullopt;
      return Value{static_cast<std::int64_t>(*ip)};
    }
    case FieldType::Mac: {
      auto m = parse_mac(s);
      if (!m) return std::nullopt;
      return Value{static_cast<std::int64_t>(*m)};
    }
    case FieldType::Str: return Value{std::string(s)};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Hierarchical masking

inline constexpr int kIpv4FinestLevel = 32;
// Domain names: level L keeps the last L labels; this level keeps the whole name.
inline constexpr int kDomainFinestLevel = 127;

inline std::uint32_t mask_ipv4(std::uint32_t ip, int level) {
  if (level < 0 || level > kIpv4FinestLevel)
    throw ArgumentError("IPv4 refinement level out of range: " + std::to_string(level));
  if (level == 0) return 0;
  return ip & (~std::uint32_t{0} << (32 - level));
}

inline std::string mask_domain(std::string_view name, int level) {
  if (level < 0 || level > kDomainFinestLevel)
    throw ArgumentError("domain refinement level out of range: " + std::to_string(level));
  while (!name.empty() && name.back() == '.') name.remove_suffix(1);
  if (level == 0 || name.empty()) return ".";
  std::size_t pos = name.size();
  for (int kept = 0; kept < level; ++kept) {
    std::size_t dot = name.rfind('.', pos == 0 ? 0 : pos - 1);
    if (pos == 0 || dot == std::string_view::npos) return std::string(name);
    pos = dot;
    if (kept + 1 == level) return std::string(name.substr(pos + 1));
  }
  return std::string(name);
}

inline int finest_level(FieldType t) {
  return t == FieldType::Ipv4 ? kIpv4FinestLevel : kDomainFinestLevel;
}

// Mask a typed value to a refinement level. Absent values stay absent.
inline Value mask_value(const Value& v, FieldType t, int level) {
  if (is_absent(v)) return v;
  if (t == FieldType::Ipv4) {
    auto ip = static_cast<std::uint32_t>(std::get<std::int64_t>(v));
    return Value{static_cast<std::int64_t>(mask_ipv4(ip, level))};
  }
  if (t == FieldType::Str) return Value{mask_domain(std::get<std::string>(v), level)};
  throw ArgumentError("field type " + std::string(type_name(t)) + " is not hierarchical");
}

// ---------------------------------------------------------------------------
// Canonical byte encoding for hashing keys.

inline void append_key_bytes(std::string& out, const Value& v) {
  if (is_absent(v)) {
    out.push_back('\0');
  } else if (auto* i = std::get_if<std::int64_t>(&v)) {
    out.push_back('\1');
    char buf[8];
    std::memcpy(buf, i, 8);
    out.append(buf, 8);
  } else if (auto* d = std::get_if<double>(&v)) {
    out.push_back('\2');
    char buf[8];
    std::memcpy(buf, d, 8);
    out.append(buf, 8);
  } else {
    const auto& s = std::get<std::string>(v);
    out.push_back('\3');
    auto len = static_cast<std::uint32_t>(s.size());
    char buf[4];
    std::memcpy(buf, &len, 4);
    out.append(buf, 4);
    out.append(s);
  }
}

inline std::string key_bytes(const Record& r) {
  std::string out;
  for (const auto& v : r) append_key_bytes(out, v);
  return out;
}

struct RecordHash {
  std::size_t operator()(const Record& r) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& v : r) {
      if (auto* i = std::get_if<std::int64_t>(&v)) {
        h ^= static_cast<std::uint64_t>(*i) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      } else if (auto* d = std::get_if<double>(&v)) {
        std::uint64_t bits;
        std::memcpy(&bits, d, 8);
        h ^= bits + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      } else if (auto* s = std::get_if<std::string>(&v)) {
        h ^= std::hash<std::string>{}(*s) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      } else {
        h ^= 0x51ed270b27ULL + (h << 6) + (h >> 2);
      }
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace sonata
