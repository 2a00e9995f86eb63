#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/packet.hpp"
#include "sonata/validate.hpp"
#include "sonata/value.hpp"

namespace sonata {

// A named set of keys, e.g. a query's previous-window output. When `level` is set the
// keys are masked to that level and probes are masked the same way before lookup.
struct KeySet {
  std::set<Value, ValueLess> keys;
  std::optional<int> level;

  bool contains(const Value& v, FieldType type, std::optional<int> probe_mask) const {
    std::optional<int> m = probe_mask ? probe_mask : level;
    if (m && is_hierarchical_type(type)) return keys.count(mask_value(v, type, *m)) > 0;
    return keys.count(v) > 0;
  }

  static bool is_hierarchical_type(FieldType t) { return t == FieldType::Ipv4 || t == FieldType::Str; }
};

using SetBindings = std::map<std::string, KeySet, std::less<>>;

// Keys of column `column` across `records`.
inline KeySet make_key_set(const std::vector<Record>& records, std::size_t column = 0,
                           std::optional<int> level = std::nullopt) {
  KeySet ks;
  ks.level = level;
  for (const auto& r : records)
    if (column < r.size()) ks.keys.insert(r[column]);
  return ks;
}

// ---------------------------------------------------------------------------
// Per-record operator semantics shared by the stream engine and the switch model.

namespace ops {

inline Value operand_value(const BoundOperand& o, const Record& r) {
  if (auto* c = std::get_if<ColumnRef>(&o)) {
    const Value& v = r[c->index];
    if (c->mask) return mask_value(v, c->type, *c->mask);
    return v;
  }
  return std::get<Value>(o);
}

inline bool compare(const Value& a, CmpOp op, const Value& b) {
  if (is_absent(a) || is_absent(b)) return false;
  auto c = compare_values(a, b);
  // int 3 and double 3.0 are ordered adjacently but are numerically equal
  bool numeric_equal = !std::holds_alternative<std::string>(a) && !std::holds_alternative<std::string>(b) &&
                       as_double(a) == as_double(b);
  switch (op) {
    case CmpOp::Eq: return c == 0 || numeric_equal;
    case CmpOp::Ne: return !(c == 0 || numeric_equal);
    case CmpOp::Gt: return c > 0 && !numeric_equal;
    case CmpOp::Ge: return c >= 0 || numeric_equal;
    case CmpOp::Lt: return c < 0 && !numeric_equal;
    case CmpOp::Le: return c <= 0 || numeric_equal;
  }
  return false;
}

inline bool eval_comparison(const BoundComparison& c, const Record& r) {
  return compare(operand_value(c.lhs, r), c.op, operand_value(c.rhs, r));
}

inline const KeySet& lookup_set(const SetBindings& sets, const std::string& name) {
  auto it = sets.find(name);
  if (it == sets.end()) throw ArgumentError("no key set bound for '" + name + "'");
  return it->second;
}

inline bool eval_membership(const BoundMembership& m, const Record& r, const KeySet& set) {
  const Value& v = r[m.column.index];
  if (is_absent(v)) return false;
  return set.contains(v, m.column.type, m.column.mask);
}

inline Record apply_map(const BoundOp& op, Record r) {
  if (op.rewrite) {
    auto& v = r[op.rewrite->index];
    v = mask_value(v, op.rewrite->type, *op.rewrite->mask);
    return r;
  }
  Record out;
  out.reserve(op.items.size());
  for (const auto& item : op.items) out.push_back(operand_value(item, r));
  return out;
}

inline Record project(const Record& r, const std::vector<std::size_t>& cols) {
  Record out;
  out.reserve(cols.size());
  for (auto c : cols) out.push_back(r[c]);
  return out;
}

// Running aggregate for one reduce key.
struct Aggregate {
  double sum = 0;
  std::int64_t isum = 0;
  std::int64_t count = 0;
  Value best;  // min / max
  std::map<Value, std::int64_t, ValueLess> histogram;  // entropy

  void add(ReduceFunc f, const Value* v) {
    ++count;
    if (!v || is_absent(*v)) return;
    switch (f) {
      case ReduceFunc::Sum:
        if (auto* i = std::get_if<std::int64_t>(v)) isum += *i;
        else sum += as_double(*v);
        break;
      case ReduceFunc::Count: break;
      case ReduceFunc::Min:
        if (is_absent(best) || compare_values(*v, best) < 0) best = *v;
        break;
      case ReduceFunc::Max:
        if (is_absent(best) || compare_values(*v, best) > 0) best = *v;
        break;
      case ReduceFunc::Entropy: ++histogram[*v]; break;
    }
  }

  Value result(ReduceFunc f, FieldType out_type) const {
    switch (f) {
      case ReduceFunc::Sum:
        if (out_type == FieldType::Float) return Value{sum + static_cast<double>(isum)};
        return Value{isum};
      case ReduceFunc::Count: return Value{count};
      case ReduceFunc::Min:
      case ReduceFunc::Max: return best;
      case ReduceFunc::Entropy: {
        std::int64_t total = 0;
        for (const auto& [_, n] : histogram) total += n;
        double h = 0;
        for (const auto& [_, n] : histogram) {
          double p = static_cast<double>(n) / static_cast<double>(total);
          h -= p * std::log2(p);
        }
        return Value{h};
      }
    }
    return Value{};
  }
};

}  // namespace ops

// ---------------------------------------------------------------------------

struct WindowResult {
  std::size_t window_index = 0;
  std::vector<Record> outputs;
  std::size_t tuples_processed = 0;
};

inline std::vector<Record> to_records(const ValidatedQuery& q, const std::vector<PacketTuple>& packets) {
  std::vector<Record> out;
  out.reserve(packets.size());
  for (const auto& p : packets) out.push_back(project_packet(q, p));
  return out;
}

// Run operators [begin, end) of `q` over `records` with exact semantics. Stateful
// operators hold state for this call only.
inline std::vector<Record> execute_ops(const ValidatedQuery& q, std::size_t begin, std::size_t end,
                                       std::vector<Record> records, const SetBindings& sets) {
  for (std::size_t i = begin; i < end; ++i) {
    const BoundOp& op = q.ops[i];
    std::vector<Record> next;
    switch (op.kind) {
      case OpKind::Filter:
      case OpKind::Join:
        if (auto* c = std::get_if<BoundComparison>(&op.predicate)) {
          for (auto& r : records)
            if (ops::eval_comparison(*c, r)) next.push_back(std::move(r));
        } else {
          const auto& m = std::get<BoundMembership>(op.predicate);
          const KeySet& set = ops::lookup_set(sets, m.set);
          for (auto& r : records)
            if (ops::eval_membership(m, r, set)) next.push_back(std::move(r));
        }
        break;
      case OpKind::Map:
        next.reserve(records.size());
        for (auto& r : records) next.push_back(ops::apply_map(op, std::move(r)));
        break;
      case OpKind::Distinct: {
        std::unordered_set<Record, RecordHash> seen;
        for (auto& r : records) {
          Record key = ops::project(r, op.keys);
          if (seen.insert(key).second) next.push_back(std::move(key));
        }
        break;
      }
      case OpKind::Reduce: {
        std::map<Record, ops::Aggregate, RecordLess> groups;
        for (const auto& r : records) {
          auto& agg = groups[ops::project(r, op.keys)];
          agg.add(op.func, op.value_column ? &r[*op.value_column] : nullptr);
        }
        FieldType out_type = q.stage_schemas[i + 1].back().type;
        for (auto& [key, agg] : groups) {
          Record out = key;
          out.push_back(agg.result(op.func, out_type));
          next.push_back(std::move(out));
        }
        break;
      }
      case OpKind::Sample: {
        std::size_t idx = 0;
        for (auto& r : records)
          if (idx++ % static_cast<std::size_t>(op.sample_rate) == 0) next.push_back(std::move(r));
        break;
      }
    }
    records = std::move(next);
  }
  return records;
}

inline void sort_outputs(std::vector<Record>& out) { std::stable_sort(out.begin(), out.end(), RecordLess{}); }

// Exact execution of a whole query over one window of input records.
inline WindowResult execute_window(const ValidatedQuery& q, std::vector<Record> input, const SetBindings& sets,
                                   std::size_t window_index = 0) {
  for (const auto& name : q.set_names)
    if (!sets.count(name)) throw ArgumentError(q.name() + ": no key set bound for '" + name + "'");
  for (const auto& r : input)
    if (r.size() != q.input_schema().size()) throw SchemaError(q.name() + ": input record arity mismatch");
  WindowResult res;
  res.window_index = window_index;
  res.tuples_processed = input.size();
  res.outputs = execute_ops(q, 0, q.operator_count(), std::move(input), sets);
  sort_outputs(res.outputs);
  return res;
}

// Convenience overload for a query with at most one join.
inline WindowResult execute_window(const ValidatedQuery& q, std::vector<Record> input,
                                   const std::optional<KeySet>& joined = std::nullopt, std::size_t window_index = 0) {
  SetBindings sets;
  if (q.join_target) {
    if (!joined) throw ArgumentError(q.name() + ": join set required");
    sets.emplace(*q.join_target, *joined);
  }
  return execute_window(q, std::move(input), sets, window_index);
}

// Execute queries (in declaration order) over consecutive windows. A joined query sees
// its target's output from the previous window; window 0 sees an empty set.
inline std::vector<std::vector<WindowResult>> execute_stream(
    const std::vector<std::shared_ptr<const ValidatedQuery>>& queries, const std::vector<TraceWindow>& windows) {
  std::map<std::string, std::size_t, std::less<>> index;
  for (std::size_t i = 0; i < queries.size(); ++i) index.emplace(queries[i]->name(), i);
  std::vector<std::vector<WindowResult>> results(queries.size());
  for (const auto& w : windows) {
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
      const auto& q = *queries[qi];
      SetBindings sets;
      for (const auto& name : q.set_names) {
        auto it = index.find(name);
        if (it == index.end() || it->second >= qi)
          throw ArgumentError(q.name() + ": join target '" + name + "' must be executed first");
        // the target already ran on this window, so its previous output is one back
        const auto& prior = results[it->second];
        if (prior.size() < 2) sets.emplace(name, KeySet{});
        else sets.emplace(name, make_key_set(prior[prior.size() - 2].outputs));
      }
      results[qi].push_back(execute_window(q, to_records(q, w.packets), sets, w.index));
    }
  }
  return results;
}

inline std::vector<WindowResult> execute_stream(const ValidatedQuery& q, const std::vector<TraceWindow>& windows) {
  if (q.join_target) throw ArgumentError(q.name() + ": joined query needs its target; use the multi-query form");
  std::vector<WindowResult> out;
  for (const auto& w : windows) out.push_back(execute_window(q, to_records(q, w.packets), SetBindings{}, w.index));
  return out;
}

}  // namespace sonata
