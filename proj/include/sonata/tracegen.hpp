#pragma once

// Synthetic packet traces: skewed background traffic plus planted anomalies, with the
// planted keys written to a ground-truth list.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/packet.hpp"
#include "sonata/toml.hpp"

namespace sonata {

enum class AnomalyKind { Reflection, Ddos, Superspreader, Portscan };

inline std::string_view anomaly_kind_name(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::Reflection: return "reflection";
    case AnomalyKind::Ddos: return "ddos";
    case AnomalyKind::Superspreader: return "superspreader";
    case AnomalyKind::Portscan: return "portscan";
  }
  return "?";
}

struct AnomalySpec {
  AnomalyKind kind = AnomalyKind::Reflection;
  std::int64_t key = 0;  // victim dstIP, or the offending srcIP for spreaders and scans
  double start = 0;
  double duration = 0;
  double rate = 0;            // packets per second
  std::size_t sources = 100;  // distinct peers (senders, destinations or ports)
};

struct TraceGenSpec {
  std::uint64_t seed = 1;
  double duration = 60;
  double rate = 1000;  // background packets per second
  std::size_t clients = 5000;
  std::size_t servers = 500;
  std::size_t resolvers = 16;
  double skew = 1.1;        // Zipf exponent over servers
  double dns_share = 0.2;   // background DNS responses
  double udp_share = 0.3;   // other background UDP
  std::vector<AnomalySpec> anomalies;
};

struct TruthEntry {
  AnomalyKind kind;
  std::string field;
  std::int64_t key;
  double start, end;
};

namespace detail {

inline AnomalyKind parse_kind(const std::string& s, std::size_t line) {
  for (auto k : {AnomalyKind::Reflection, AnomalyKind::Ddos, AnomalyKind::Superspreader, AnomalyKind::Portscan})
    if (anomaly_kind_name(k) == s) return k;
  throw ParseError("unknown anomaly kind '" + s + "'", line);
}

}  // namespace detail

inline TraceGenSpec parse_tracegen_spec(std::string_view text) {
  auto root = toml::parse(text);
  TraceGenSpec spec;
  spec.seed = static_cast<std::uint64_t>(root.integer("seed", 1));
  spec.duration = root.number("duration", spec.duration);
  spec.rate = root.number("rate", spec.rate);
  if (const auto* bg = root.table("background")) {
    spec.clients = static_cast<std::size_t>(bg->integer("clients", static_cast<std::int64_t>(spec.clients)));
    spec.servers = static_cast<std::size_t>(bg->integer("servers", static_cast<std::int64_t>(spec.servers)));
    spec.resolvers = static_cast<std::size_t>(bg->integer("resolvers", static_cast<std::int64_t>(spec.resolvers)));
    spec.skew = bg->number("skew", spec.skew);
    spec.dns_share = bg->number("dns_share", spec.dns_share);
    spec.udp_share = bg->number("udp_share", spec.udp_share);
  }
  if (const auto* list = root.array("anomaly")) {
    for (const auto& t : *list) {
      AnomalySpec a;
      a.kind = detail::parse_kind(t.string("kind").value_or("reflection"), t.line_of("kind"));
      auto key = t.string("key");
      if (!key) throw ParseError("anomaly needs a key address", 0);
      auto ip = parse_ipv4(*key);
      if (!ip) throw ParseError("bad anomaly key '" + *key + "'", t.line_of("key"));
      a.key = static_cast<std::int64_t>(*ip);
      a.start = t.number("start", 0);
      a.duration = t.number("duration", 0);
      a.rate = t.number("rate", 0);
      a.sources = static_cast<std::size_t>(t.integer("sources", 100));
      spec.anomalies.push_back(a);
    }
  }
  if (!(spec.duration > 0) || spec.rate < 0) throw ValidationError("trace spec needs a positive duration");
  if (spec.clients == 0 || spec.servers == 0 || spec.resolvers == 0)
    throw ValidationError("trace spec pools must be non-empty");
  if (spec.dns_share < 0 || spec.udp_share < 0 || spec.dns_share + spec.udp_share > 1)
    throw ValidationError("traffic shares must lie in [0, 1] and sum to at most 1");
  for (const auto& a : spec.anomalies)
    if (a.start < 0 || a.duration < 0 || a.rate < 0 || a.sources == 0 || a.start + a.duration > spec.duration)
      throw ValidationError("anomaly must lie inside the trace and have positive sources");
  return spec;
}

inline TraceSchema generated_trace_schema() {
  return parse_trace_header("ts:float,size:u32,srcIP:ipv4,dstIP:ipv4,srcPort:u16,dstPort:u16,proto:u8,dns_rr_type:u16");
}

struct GeneratedTrace {
  Trace trace;
  std::vector<TruthEntry> truth;
};

// Address pools live in disjoint /8s so anomaly keys never collide with background.
inline GeneratedTrace generate_trace(const TraceGenSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  auto addr = [](std::uint32_t net, std::uint64_t i) {
    return static_cast<std::int64_t>((net << 24) | static_cast<std::uint32_t>((i * 2654435761u) & 0xffffffu));
  };
  std::vector<double> weights(spec.servers);
  for (std::size_t i = 0; i < spec.servers; ++i) weights[i] = 1.0 / std::pow(static_cast<double>(i + 1), spec.skew);
  std::discrete_distribution<std::size_t> server(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> client(0, spec.clients - 1), resolver(0, spec.resolvers - 1);
  std::uniform_int_distribution<std::int64_t> eph(1024, 65535), size(64, 1500);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  struct Timed {
    double ts;
    std::uint64_t order;
    PacketTuple pkt;
  };
  std::vector<Timed> out;
  std::uint64_t order = 0;
  auto base = [&](double ts) {
    PacketTuple p;
    p.set(Field::ts, ts);
    p.set(Field::size, size(rng));
    return p;
  };

  const auto n_bg = static_cast<std::size_t>(std::llround(spec.duration * spec.rate));
  for (std::size_t i = 0; i < n_bg; ++i) {
    double ts = (static_cast<double>(i) + u(rng)) / spec.rate;
    PacketTuple p = base(ts);
    double kind = u(rng);
    if (kind < spec.dns_share) {
      // responses from a small resolver pool back to clients
      p.set(Field::srcIP, addr(53, resolver(rng)));
      p.set(Field::dstIP, addr(10, client(rng)));
      p.set(Field::srcPort, std::int64_t{53});
      p.set(Field::dstPort, eph(rng));
      p.set(Field::proto, std::int64_t{17});
      p.set(Field::dns_rr_type, std::int64_t{u(rng) < 0.8 ? 1 : 28});
    } else {
      bool udp = kind < spec.dns_share + spec.udp_share;
      p.set(Field::srcIP, addr(10, client(rng)));
      p.set(Field::dstIP, addr(20, server(rng)));
      p.set(Field::srcPort, eph(rng));
      p.set(Field::dstPort, std::int64_t{udp ? 443 : (u(rng) < 0.7 ? 443 : 80)});
      p.set(Field::proto, std::int64_t{udp ? 17 : 6});
    }
    out.push_back({ts, order++, std::move(p)});
  }

  GeneratedTrace g;
  for (std::size_t a = 0; a < spec.anomalies.size(); ++a) {
    const auto& an = spec.anomalies[a];
    const char* field = (an.kind == AnomalyKind::Superspreader || an.kind == AnomalyKind::Portscan) ? "srcIP" : "dstIP";
    g.truth.push_back({an.kind, field, an.key, an.start, an.start + an.duration});
    const auto n = static_cast<std::size_t>(std::llround(an.duration * an.rate));
    std::uniform_int_distribution<std::size_t> peer(0, an.sources - 1);
    const auto peer_net = static_cast<std::uint32_t>(100 + a % 100);
    for (std::size_t i = 0; i < n; ++i) {
      double ts = an.start + (static_cast<double>(i) + u(rng)) / an.rate;
      PacketTuple p = base(ts);
      std::size_t k = peer(rng);
      switch (an.kind) {
        case AnomalyKind::Reflection:
          p.set(Field::srcIP, addr(peer_net, k));
          p.set(Field::dstIP, an.key);
          p.set(Field::srcPort, std::int64_t{53});
          p.set(Field::dstPort, eph(rng));
          p.set(Field::proto, std::int64_t{17});
          p.set(Field::dns_rr_type, std::int64_t{46});
          break;
        case AnomalyKind::Ddos:
          p.set(Field::srcIP, addr(peer_net, k));
          p.set(Field::dstIP, an.key);
          p.set(Field::srcPort, eph(rng));
          p.set(Field::dstPort, std::int64_t{80});
          p.set(Field::proto, std::int64_t{17});
          break;
        case AnomalyKind::Superspreader:
          p.set(Field::srcIP, an.key);
          p.set(Field::dstIP, addr(peer_net, k));
          p.set(Field::srcPort, eph(rng));
          p.set(Field::dstPort, std::int64_t{443});
          p.set(Field::proto, std::int64_t{6});
          break;
        case AnomalyKind::Portscan:
          p.set(Field::srcIP, an.key);
          p.set(Field::dstIP, addr(20, 0));
          p.set(Field::srcPort, eph(rng));
          p.set(Field::dstPort, static_cast<std::int64_t>(1 + k % 65535));
          p.set(Field::proto, std::int64_t{6});
          break;
      }
      out.push_back({ts, order++, std::move(p)});
    }
  }
  std::sort(out.begin(), out.end(), [](const Timed& a, const Timed& b) {
    return a.ts != b.ts ? a.ts < b.ts : a.order < b.order;
  });
  g.trace.schema = generated_trace_schema();
  g.trace.packets.reserve(out.size());
  for (auto& t : out) g.trace.packets.push_back(std::move(t.pkt));
  return g;
}

inline void write_truth(std::ostream& os, const std::vector<TruthEntry>& truth) {
  os << "kind,field,key,start,end\n";
  for (const auto& t : truth)
    os << anomaly_kind_name(t.kind) << ',' << t.field << ',' << format_value(Value{t.key}, FieldType::Ipv4) << ','
       << format_value(Value{t.start}, FieldType::Float) << ',' << format_value(Value{t.end}, FieldType::Float) << '\n';
}

inline std::vector<TruthEntry> parse_truth(std::string_view text) {
  std::vector<TruthEntry> out;
  std::size_t line = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view row = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line;
    row = detail::trim(row);
    if (row.empty() || line == 1) continue;
    auto cells = detail::split_csv(row);
    if (cells.size() != 5) throw ParseError("truth rows need 5 columns", line);
    auto key = parse_ipv4(cells[2]);
    auto start = parse_value(cells[3], FieldType::Float);
    auto end = parse_value(cells[4], FieldType::Float);
    if (!key || !start || !end) throw ParseError("bad truth row", line);
    out.push_back({detail::parse_kind(std::string(cells[0]), line), std::string(cells[1]),
                   static_cast<std::int64_t>(*key), std::get<double>(*start), std::get<double>(*end)});
  }
  return out;
}

}  // namespace sonata
