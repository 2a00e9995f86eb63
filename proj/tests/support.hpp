#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sonata/packet.hpp"
#include "sonata/query.hpp"
#include "sonata/validate.hpp"

namespace sonata::testing {

inline std::string query1_text(int th = 2) {
  return "pVictimIPs = pktStream(1)\n"
         "    .filter(srcPort == 53)\n"
         "    .map(dstIP, srcIP)\n"
         "    .distinct(key=(dstIP, srcIP))\n"
         "    .map(dstIP, 1)\n"
         "    .reduce(key=(dstIP), func=sum)\n"
         "    .filter(count > " + std::to_string(th) + ")\n"
         "    .map(dstIP)\n";
}

inline std::string query2_text(int th = 2) {
  return "victimIPs = pktStream(1)\n"
         "    .filter(srcPort == 53)\n"
         "    .filter(dstIP in pVictimIPs)\n"
         "    .filter(dns_rr_type == 46)\n"
         "    .map(dstIP, 1)\n"
         "    .reduce(key=(dstIP), func=sum)\n"
         "    .filter(count > " + std::to_string(th) + ")\n"
         "    .map(dstIP)\n";
}

// The evaluation set. Reflection is the Query 1 / Query 2 pair.
inline std::string evaluation_queries(int th = 8) {
  const std::string t = std::to_string(th);
  return "ddos_udp = pktStream(1)\n"
         "    .filter(proto == 17)\n"
         "    .map(dstIP, srcIP)\n"
         "    .distinct(key=(dstIP, srcIP))\n"
         "    .map(dstIP, 1)\n"
         "    .reduce(key=(dstIP), func=sum)\n"
         "    .filter(count > " + t + ")\n"
         "    .map(dstIP)\n"
         "sspreader = pktStream(1)\n"
         "    .map(srcIP, dstIP)\n"
         "    .distinct(key=(srcIP, dstIP))\n"
         "    .map(srcIP, 1)\n"
         "    .reduce(key=(srcIP), func=sum)\n"
         "    .filter(count > " + t + ")\n"
         "    .map(srcIP)\n"
         "portscan = pktStream(1)\n"
         "    .map(srcIP, dstPort)\n"
         "    .distinct(key=(srcIP, dstPort))\n"
         "    .map(srcIP, 1)\n"
         "    .reduce(key=(srcIP), func=sum)\n"
         "    .filter(count > " + t + ")\n"
         "    .map(srcIP)\n" +
         query1_text(th) + query2_text(th / 2);
}

inline std::shared_ptr<const ValidatedQuery> make_query(const std::string& text) {
  return std::make_shared<const ValidatedQuery>(validate(parse_query(text), default_packet_schema()));
}

inline std::vector<std::shared_ptr<const ValidatedQuery>> make_queries(const std::string& text) {
  return validate_all(parse_query_file(text), default_packet_schema());
}

inline std::int64_t ip(const char* dotted) { return static_cast<std::int64_t>(*parse_ipv4(dotted)); }

inline PacketTuple packet(std::int64_t dst, std::int64_t src, std::int64_t src_port = 53, std::int64_t proto = 17,
                          double ts = 0.0) {
  PacketTuple p;
  p.set(Field::ts, ts);
  p.set(Field::dstIP, dst);
  p.set(Field::srcIP, src);
  p.set(Field::srcPort, src_port);
  p.set(Field::proto, proto);
  return p;
}

// Random window with a heavy-tailed mix: a few hot destinations receive from many
// sources, the rest is background spread over the address space.
inline std::vector<PacketTuple> random_window(std::mt19937_64& rng, std::size_t n, double ts0 = 0.0) {
  std::uniform_int_distribution<std::int64_t> any_ip(0, 0xFFFFFFFFLL);
  std::uniform_int_distribution<int> pct(0, 99);
  std::vector<std::int64_t> hot;
  for (int i = 0; i < 4; ++i) hot.push_back(any_ip(rng));
  std::vector<std::int64_t> hot_src;
  for (int i = 0; i < 6; ++i) hot_src.push_back(any_ip(rng));
  std::vector<PacketTuple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PacketTuple p;
    int r = pct(rng);
    std::int64_t dst = r < 20 ? hot[rng() % hot.size()] : any_ip(rng);
    std::int64_t src = r >= 20 && r < 35 ? hot_src[rng() % hot_src.size()] : any_ip(rng) % (r < 10 ? 64 : 1 << 30);
    p.set(Field::ts, ts0 + static_cast<double>(i) / static_cast<double>(n + 1));
    p.set(Field::dstIP, dst);
    p.set(Field::srcIP, src);
    p.set(Field::srcPort, pct(rng) < 50 ? std::int64_t{53} : static_cast<std::int64_t>(rng() % 65536));
    p.set(Field::dstPort, static_cast<std::int64_t>(rng() % (r >= 20 && r < 35 ? 4096 : 64)));
    p.set(Field::proto, pct(rng) < 70 ? std::int64_t{17} : std::int64_t{6});
    if (pct(rng) < 60) p.set(Field::dns_rr_type, pct(rng) < 50 ? std::int64_t{46} : std::int64_t{1});
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace sonata::testing
