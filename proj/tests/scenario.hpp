#pragma once

// Shared synthetic workloads: skewed background with a DNS reflection victim.

#include <string>

#include "sonata/runtime.hpp"
#include "sonata/tracegen.hpp"

namespace sonata::testing {

inline std::string reflection_queries(int th1 = 20, int th2 = 10) {
  return "pVictimIPs = pktStream(1)\n"
         "    .filter(srcPort == 53)\n"
         "    .map(dstIP, srcIP)\n"
         "    .distinct(key=(dstIP, srcIP))\n"
         "    .map(dstIP, 1)\n"
         "    .reduce(key=(dstIP), func=sum)\n"
         "    .filter(count > " + std::to_string(th1) + ")\n"
         "    .map(dstIP)\n"
         "victimIPs = pktStream(1)\n"
         "    .filter(srcPort == 53)\n"
         "    .filter(dstIP in pVictimIPs)\n"
         "    .filter(dns_rr_type == 46)\n"
         "    .map(dstIP, 1)\n"
         "    .reduce(key=(dstIP), func=sum)\n"
         "    .filter(count > " + std::to_string(th2) + ")\n"
         "    .map(dstIP)\n";
}

// About 1% of the packets belong to the victim.
inline TraceGenSpec reflection_spec(std::uint64_t seed, double duration = 40, double rate = 2000,
                                    double attack_rate = 25) {
  TraceGenSpec s;
  s.seed = seed;
  s.duration = duration;
  s.rate = rate;
  if (attack_rate > 0) {
    AnomalySpec a;
    a.kind = AnomalyKind::Reflection;
    a.key = static_cast<std::int64_t>(*parse_ipv4("66.1.2.3"));
    a.start = 0;
    a.duration = duration;
    a.rate = attack_rate;
    a.sources = 100000;
    s.anomalies.push_back(a);
  }
  return s;
}

inline Config reflection_config(std::uint64_t seed = 7) {
  Config c;
  c.window = 1.0;
  c.training_windows = 20;
  c.n_max = 400;
  c.b_max = 400000;
  c.seed = seed;
  c.levels = {8, 16, 24, 32};
  return c;
}

inline QueryWorkload workload(const std::string& queries, const Trace& trace, const Config& c) {
  std::ostringstream os;
  write_trace(os, trace);
  // round-trip through the file format so the workload sees what the CLI sees
  return load_workload(queries, parse_trace(os.str()), c.window);
}

}  // namespace sonata::testing
