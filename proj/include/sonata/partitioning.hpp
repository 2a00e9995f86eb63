#pragma once

#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/pisa.hpp"
#include "sonata/stream_engine.hpp"
#include "sonata/validate.hpp"

namespace sonata {

struct PartitionPlan {
  std::size_t p = 0;
  bool sketch = false;
  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
  friend auto operator<=>(const PartitionPlan&, const PartitionPlan&) = default;
};

struct CostPair {
  double n = 0;  // tuples / n_max
  double b = 0;  // bits / b_max
  std::uint64_t n_raw = 0;
  std::uint64_t b_raw = 0;
  bool feasible() const { return n <= 1.0 && b <= 1.0; }
};

inline bool prefix_has_stateful(const ValidatedQuery& q, std::size_t p) {
  for (auto i : q.stateful_indices)
    if (i < p) return true;
  return false;
}

// All P+1 split points; a sketch variant accompanies every prefix holding a stateful op.
inline std::vector<PartitionPlan> enumerate_partitions(const ValidatedQuery& q) {
  std::vector<PartitionPlan> out;
  for (std::size_t p = 0; p <= q.operator_count(); ++p) {
    out.push_back({p, false});
    if (prefix_has_stateful(q, p)) out.push_back({p, true});
  }
  return out;
}

inline bool is_supported(const ValidatedQuery& q, const PartitionPlan& plan) {
  return !prefix_unsupported_reason(q, plan.p, plan.sketch).has_value();
}

inline bool prefix_has_reduce(const ValidatedQuery& q, std::size_t p) {
  for (std::size_t i = 0; i < p && i < q.ops.size(); ++i)
    if (q.ops[i].kind == OpKind::Reduce) return true;
  return false;
}

// Turn one query's report stream into the suffix's input. After an in-switch reduce the
// switch reports running aggregates, so only the last report per reduce key counts, and
// keys come out in the order the stream-side reduce would emit them.
inline std::vector<Record> collapse_reports(const ValidatedQuery& q, std::size_t p, std::vector<QueryReport> reports) {
  std::vector<Record> out;
  if (!prefix_has_reduce(q, p)) {
    out.reserve(reports.size());
    for (auto& r : reports) out.push_back(std::move(r.record));
    return out;
  }
  std::map<Record, Record, RecordLess> last;
  for (auto& r : reports) {
    if (!r.group) throw ArgumentError(q.name() + ": report after a reduce lacks its group key");
    last[*r.group] = std::move(r.record);
  }
  out.reserve(last.size());
  for (auto& [_, rec] : last) out.push_back(std::move(rec));
  return out;
}

inline std::vector<Record> run_suffix(const ValidatedQuery& q, std::size_t p, std::vector<Record> records,
                                      const SetBindings& sets) {
  auto out = execute_ops(q, p, q.operator_count(), std::move(records), sets);
  sort_outputs(out);
  return out;
}

struct PartitionedQuery {
  std::shared_ptr<const ValidatedQuery> query;
  PartitionPlan plan;
};

struct QueryWindowResult {
  std::vector<Record> outputs;
  std::uint64_t tuples = 0;      // reports reaching the stream processor
  std::uint64_t state_bits = 0;  // this query's switch state
};

struct PartitionedWindowResult {
  std::vector<QueryWindowResult> queries;  // request order
  std::uint64_t report_tuples = 0;         // union of report bits
  std::uint64_t total_bits = 0;
};

// Run one window through a switch holding every query's prefix and the stream processor
// running the suffixes. `bindings` supplies each query's membership sets.
inline PartitionedWindowResult run_partitioned_window(const std::vector<PartitionedQuery>& queries,
                                                      const std::vector<PacketTuple>& packets,
                                                      const std::map<std::string, SetBindings, std::less<>>& bindings = {},
                                                      std::uint64_t seed = 0, std::size_t window_index = 0) {
  std::vector<CompileRequest> reqs;
  for (const auto& pq : queries) reqs.push_back({pq.query, pq.plan.p, pq.plan.sketch});
  Pipeline pipe(reqs, PipelineOptions{seed, std::nullopt});
  pipe.begin_window(window_index);
  static const SetBindings kNone;
  auto sets_for = [&](const std::string& name) -> const SetBindings& {
    auto it = bindings.find(name);
    return it == bindings.end() ? kNone : it->second;
  };
  for (const auto& pq : queries)
    for (const auto& [set, keys] : sets_for(pq.query->name())) pipe.install_filter_entries(pq.query->name(), keys, set);

  std::map<std::string, std::vector<QueryReport>, std::less<>> reports;
  for (const auto& pkt : packets) {
    auto t = pipe.process_packet(pkt);
    if (!t) continue;
    for (auto& e : t->entries) reports[e.query].push_back(std::move(e));
  }

  PartitionedWindowResult res;
  res.report_tuples = pipe.reports_emitted();
  res.total_bits = pipe.state_bits().total_bits;
  for (const auto& pq : queries) {
    const auto& q = *pq.query;
    QueryWindowResult qr;
    qr.tuples = pipe.query_reports(q.name());
    qr.state_bits = pipe.query_state_bits(q.name());
    auto collapsed = collapse_reports(q, pq.plan.p, std::move(reports[q.name()]));
    qr.outputs = run_suffix(q, pq.plan.p, std::move(collapsed), sets_for(q.name()));
    res.queries.push_back(std::move(qr));
  }
  return res;
}

// Driver cost: simulate the prefix over one window and normalize by the constraints.
inline CostPair get_cost(const std::shared_ptr<const ValidatedQuery>& q, const PartitionPlan& plan,
                         const std::vector<PacketTuple>& window, double n_max, double b_max,
                         const SetBindings& sets = {}, std::uint64_t seed = 0) {
  if (!(n_max >= 0) || !(b_max >= 0)) throw ArgumentError("n_max and b_max must not be negative");
  if (auto why = prefix_unsupported_reason(*q, plan.p, plan.sketch))
    throw UnsupportedError(q->name() + " at p=" + std::to_string(plan.p) + ": " + *why);
  Pipeline pipe({CompileRequest{q, plan.p, plan.sketch}}, PipelineOptions{seed, std::nullopt});
  for (const auto& [set, keys] : sets) pipe.install_filter_entries(q->name(), keys, set);
  for (const auto& pkt : window) pipe.process_packet(pkt);
  CostPair c;
  c.n_raw = pipe.reports_emitted();
  c.b_raw = pipe.state_bits().total_bits;
  // a zero budget admits only zero cost
  auto ratio = [](std::uint64_t raw, double max) {
    if (raw == 0) return 0.0;
    return max > 0 ? static_cast<double>(raw) / max : std::numeric_limits<double>::infinity();
  };
  c.n = ratio(c.n_raw, n_max);
  c.b = ratio(c.b_raw, b_max);
  return c;
}

}  // namespace sonata
