#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/partitioning.hpp"
#include "sonata/stream_engine.hpp"
#include "sonata/validate.hpp"

namespace sonata {

struct RefinementSpec {
  std::string key;
  std::vector<int> levels;  // coarse to fine; the last is the field's native granularity
};

using ThresholdMap = std::map<int, Value>;

// {/4, /8, ..., /32} for addresses.
inline std::vector<int> default_levels(FieldType t) {
  if (t != FieldType::Ipv4) return {finest_level(t)};
  std::vector<int> out;
  for (int l = 4; l <= kIpv4FinestLevel; l += 4) out.push_back(l);
  return out;
}

inline FieldType refinement_key_type(const ValidatedQuery& q, const std::string& key) {
  auto col = find_column(q.input_schema(), key);
  if (!col) throw ArgumentError(q.name() + ": no input field '" + key + "'");
  return q.input_schema()[*col].type;
}

inline void check_spec(const ValidatedQuery& q, const RefinementSpec& spec) {
  const auto& keys = q.refinement_keys;
  if (std::find(keys.begin(), keys.end(), spec.key) == keys.end())
    throw ArgumentError(q.name() + ": '" + spec.key + "' is not a refinement key");
  if (spec.levels.empty()) throw ArgumentError(q.name() + ": empty level grid");
  int finest = finest_level(refinement_key_type(q, spec.key));
  for (std::size_t i = 0; i < spec.levels.size(); ++i) {
    if (spec.levels[i] < 1 || spec.levels[i] > finest) throw ArgumentError(q.name() + ": refinement level out of range");
    if (i && spec.levels[i] <= spec.levels[i - 1]) throw ArgumentError(q.name() + ": levels must increase");
  }
  if (spec.levels.back() != finest) throw ArgumentError(q.name() + ": the last level must be the finest");
}

// The threshold filter that iterative refinement relaxes at coarser levels: a literal
// comparison on the aggregate directly after a reduce.
struct ThresholdInfo {
  std::size_t reduce_index = 0;
  std::size_t filter_index = 0;
  bool agg_on_left = true;
  CmpOp op = CmpOp::Gt;  // as written
  Value threshold;

  // Comparator seen with the aggregate on the left.
  CmpOp agg_op() const { return agg_on_left ? op : flip(op); }
  bool keeps_large() const { return agg_op() == CmpOp::Gt || agg_op() == CmpOp::Ge; }
};

inline std::optional<ThresholdInfo> find_threshold_filter(const ValidatedQuery& q) {
  std::optional<ThresholdInfo> found;
  for (std::size_t i = 0; i + 1 < q.ops.size(); ++i) {
    if (q.ops[i].kind != OpKind::Reduce || q.ops[i + 1].kind != OpKind::Filter) continue;
    const auto* c = std::get_if<BoundComparison>(&q.ops[i + 1].predicate);
    if (!c) continue;
    const std::size_t agg = q.ops[i].keys.size();
    auto is_agg = [&](const BoundOperand& o) {
      auto* col = std::get_if<ColumnRef>(&o);
      return col && col->index == agg;
    };
    bool l = is_agg(c->lhs) && std::holds_alternative<Value>(c->rhs);
    bool r = is_agg(c->rhs) && std::holds_alternative<Value>(c->lhs);
    if (!l && !r) continue;
    ThresholdInfo t{i, i + 1, l, c->op, l ? std::get<Value>(c->rhs) : std::get<Value>(c->lhs)};
    if (t.agg_op() == CmpOp::Eq || t.agg_op() == CmpOp::Ne) continue;
    found = t;
  }
  return found;
}

inline std::string level_query_name(const std::string& base, int level) { return base + "_" + std::to_string(level); }

struct RefinedQuery {
  std::shared_ptr<const ValidatedQuery> base;
  std::shared_ptr<const ValidatedQuery> query;  // transformed chain
  std::string key;
  int level = 0;
  std::optional<int> parent_level;
  std::optional<std::string> zoom_set;  // bound to the parent level's previous output
  std::optional<Value> threshold;       // override applied at this level
  std::vector<std::size_t> base_index;  // per transformed op: the base op it runs with

  const std::string& name() const { return query->name(); }

  // Transformed split point for a split after `base_p` base operators.
  std::size_t prefix_length(std::size_t base_p) const {
    std::size_t n = 0;
    while (n < base_index.size() && base_index[n] < base_p) ++n;
    return n;
  }

  // Output column holding the key values.
  std::size_t key_column() const { return find_column(query->output_schema(), key).value_or(0); }
};

// Rewrite `base` to run at `level`: a mask map on the key and, with a parent level, a
// zoom filter on the parent's previous output, both inserted after the leading filters.
inline RefinedQuery refine_query(const std::shared_ptr<const ValidatedQuery>& base, const std::string& key, int level,
                                 std::optional<int> parent_level = std::nullopt, const ThresholdMap& thresholds = {},
                                 const QueryCatalog& catalog = {}) {
  const auto& keys = base->refinement_keys;
  if (std::find(keys.begin(), keys.end(), key) == keys.end())
    throw ArgumentError(base->name() + ": '" + key + "' is not a refinement key");
  FieldType kt = refinement_key_type(*base, key);
  if (level < 1 || level > finest_level(kt)) throw ArgumentError(base->name() + ": refinement level out of range");
  if (parent_level && (*parent_level < 1 || *parent_level >= level))
    throw ArgumentError(base->name() + ": parent level must be coarser");

  RefinedQuery rq;
  rq.base = base;
  rq.key = key;
  rq.level = level;
  rq.parent_level = parent_level;

  QueryAST ast = base->ast;
  ast.name = level_query_name(base->name(), level);
  std::size_t pos = 0;
  while (pos < ast.operators.size() && ast.operators[pos].kind == OpKind::Filter) ++pos;

  std::vector<OperatorNode> ops(ast.operators.begin(), ast.operators.begin() + static_cast<std::ptrdiff_t>(pos));
  for (std::size_t i = 0; i < pos; ++i) rq.base_index.push_back(i);
  ValidateOptions vopts;
  if (parent_level) {
    OperatorNode zoom;
    zoom.kind = OpKind::Filter;
    rq.zoom_set = level_query_name(base->name(), *parent_level);
    zoom.predicate = Membership{FieldRef{key, parent_level}, *rq.zoom_set};
    zoom.origin = static_cast<int>(pos);
    ops.push_back(std::move(zoom));
    rq.base_index.push_back(pos);
    vopts.extra_sets.emplace(*rq.zoom_set, kt);
  }
  OperatorNode mask;
  mask.kind = OpKind::Map;
  mask.rewrite = FieldRef{key, level};
  mask.origin = static_cast<int>(pos);
  ops.push_back(std::move(mask));
  rq.base_index.push_back(pos);
  for (std::size_t i = pos; i < ast.operators.size(); ++i) {
    ops.push_back(ast.operators[i]);
    rq.base_index.push_back(i);
  }

  // coarser levels relax the threshold and compare with >= (or <=) so the witnessing
  // bucket itself passes
  if (auto th = find_threshold_filter(*base); th && level < finest_level(kt)) {
    if (auto it = thresholds.find(level); it != thresholds.end()) {
      std::size_t at = th->filter_index + (ops.size() - ast.operators.size());
      auto& cmp = std::get<Comparison>(ops[at].predicate);
      CmpOp relaxed = th->keeps_large() ? CmpOp::Ge : CmpOp::Le;
      cmp.op = th->agg_on_left ? relaxed : flip(relaxed);
      (th->agg_on_left ? cmp.rhs : cmp.lhs) = Literal{it->second, false};
      rq.threshold = it->second;
    }
  }
  ast.operators = std::move(ops);
  rq.query = std::make_shared<const ValidatedQuery>(validate(ast, base->packet_schema, catalog, vopts));
  return rq;
}

namespace detail {

inline std::size_t reduce_key_position(const ValidatedQuery& q, std::size_t reduce_index, const std::string& key) {
  auto col = find_column(q.stage_schemas[reduce_index + 1], key);
  if (!col) throw ArgumentError(q.name() + ": refinement key is not a reduce key");
  return *col;
}

}  // namespace detail

// Per-level thresholds that keep every finest-level satisfying key alive at coarser
// levels: the smallest (largest, for < filters) aggregate among buckets holding such a
// key, minimized over the training windows. Levels never witnessed keep the original.
inline ThresholdMap backtrack_thresholds(const std::shared_ptr<const ValidatedQuery>& base, const RefinementSpec& spec,
                                         const std::vector<std::vector<PacketTuple>>& training,
                                         const std::vector<SetBindings>& bindings = {},
                                         const QueryCatalog& catalog = {}) {
  check_spec(*base, spec);
  auto th = find_threshold_filter(*base);
  if (!th) throw ArgumentError(base->name() + ": query lacks a threshold filter");
  if (training.empty()) throw ArgumentError(base->name() + ": no training windows");
  const std::size_t key_pos = detail::reduce_key_position(*base, th->reduce_index, spec.key);
  const FieldType key_type = refinement_key_type(*base, spec.key);
  const CmpOp agg_op = th->agg_op();
  const bool keep_min = th->keeps_large();

  std::vector<RefinedQuery> coarse;
  for (std::size_t i = 0; i + 1 < spec.levels.size(); ++i)
    coarse.push_back(refine_query(base, spec.key, spec.levels[i], std::nullopt, {}, catalog));

  std::map<int, Value> best;
  static const SetBindings kNone;
  for (std::size_t w = 0; w < training.size(); ++w) {
    const SetBindings& sets = w < bindings.size() ? bindings[w] : kNone;
    auto fine = execute_ops(*base, 0, th->reduce_index + 1, to_records(*base, training[w]), sets);
    std::vector<const Record*> satisfying;
    for (const auto& r : fine)
      if (ops::compare(r.back(), agg_op, th->threshold)) satisfying.push_back(&r);
    if (satisfying.empty()) continue;
    for (const auto& rq : coarse) {
      const std::size_t reduce_at = rq.prefix_length(th->reduce_index);
      auto buckets_out = execute_ops(*rq.query, 0, reduce_at + 1, to_records(*rq.query, training[w]), sets);
      std::map<Record, Value, RecordLess> buckets;
      for (auto& r : buckets_out) {
        Value agg = r.back();
        r.pop_back();
        buckets.emplace(std::move(r), std::move(agg));
      }
      for (const Record* s : satisfying) {
        Record bucket(s->begin(), s->end() - 1);
        bucket[key_pos] = mask_value(bucket[key_pos], key_type, rq.level);
        auto it = buckets.find(bucket);
        if (it == buckets.end()) throw Error(base->name() + ": bucket missing for a satisfying key");
        auto cur = best.find(rq.level);
        if (cur == best.end()) {
          best.emplace(rq.level, it->second);
        } else {
          auto c = compare_values(it->second, cur->second);
          if (keep_min ? c < 0 : c > 0) cur->second = it->second;
        }
      }
    }
  }

  ThresholdMap out;
  for (int level : spec.levels) {
    auto it = best.find(level);
    out[level] = it == best.end() ? th->threshold : it->second;
  }
  out[spec.levels.back()] = th->threshold;
  return out;
}

// One level of a refinement chain with its partition (split point in base operators).
struct ChainLevel {
  RefinedQuery refined;
  PartitionPlan plan;
};

inline std::vector<ChainLevel> build_chain(const std::shared_ptr<const ValidatedQuery>& base, const std::string& key,
                                           const std::vector<int>& levels, const std::vector<PartitionPlan>& plans,
                                           const ThresholdMap& thresholds = {}, const QueryCatalog& catalog = {}) {
  if (levels.empty() || levels.size() != plans.size()) throw ArgumentError("one partition per chain level required");
  std::vector<ChainLevel> chain;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    std::optional<int> parent;
    if (i) parent = levels[i - 1];
    chain.push_back({refine_query(base, key, levels[i], parent, thresholds, catalog), plans[i]});
  }
  return chain;
}

// Zoom-in set for a level: its parent's previous-window output.
inline KeySet zoom_entries(const RefinedQuery& parent, const std::vector<Record>& parent_output) {
  return make_key_set(parent_output, parent.key_column(), parent.level);
}

inline PartitionedQuery chain_partition(const ChainLevel& level) {
  return {level.refined.query, {level.refined.prefix_length(level.plan.p), level.plan.sketch}};
}

struct ChainRun {
  std::vector<std::vector<std::vector<Record>>> outputs;  // [window][level]
  std::vector<std::vector<Record>> detections;           // finest-level output per window
  std::vector<std::vector<std::uint64_t>> tuples;        // [window][level] reports to the stream processor
  std::vector<std::vector<std::uint64_t>> state_bits;    // [window][level]
  std::vector<std::uint64_t> report_tuples;              // [window]
  std::size_t delay = 0;                                 // intervals before the finest level has a parent result
  bool complete = true;                                  // enough windows for every level to engage
};

// Every level runs in every window; level i filters on level i-1's output from the
// previous window, so a key climbs one level per interval.
inline ChainRun run_refined_chain(const std::vector<ChainLevel>& chain,
                                  const std::vector<std::vector<PacketTuple>>& windows, std::uint64_t seed = 0,
                                  const std::vector<SetBindings>& extra = {}) {
  if (chain.empty()) throw ArgumentError("empty refinement chain");
  ChainRun run;
  run.delay = chain.size();
  run.complete = windows.size() >= chain.size();
  std::vector<PartitionedQuery> parts;
  for (const auto& l : chain) parts.push_back(chain_partition(l));
  std::vector<std::vector<Record>> prev(chain.size());
  for (std::size_t t = 0; t < windows.size(); ++t) {
    std::map<std::string, SetBindings, std::less<>> bindings;
    for (std::size_t i = 0; i < chain.size(); ++i) {
      SetBindings sets = t < extra.size() ? extra[t] : SetBindings{};
      if (i) sets[*chain[i].refined.zoom_set] = zoom_entries(chain[i - 1].refined, prev[i - 1]);
      bindings[chain[i].refined.name()] = std::move(sets);
    }
    auto res = run_partitioned_window(parts, windows[t], bindings, seed, t);
    std::vector<std::vector<Record>> outs;
    std::vector<std::uint64_t> tuples, bits;
    for (auto& q : res.queries) {
      tuples.push_back(q.tuples);
      bits.push_back(q.state_bits);
      outs.push_back(std::move(q.outputs));
    }
    prev = outs;
    run.detections.push_back(outs.back());
    run.outputs.push_back(std::move(outs));
    run.tuples.push_back(std::move(tuples));
    run.state_bits.push_back(std::move(bits));
    run.report_tuples.push_back(res.report_tuples);
  }
  return run;
}

}  // namespace sonata
