#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/packet.hpp"
#include "sonata/sketch.hpp"
#include "sonata/stream_engine.hpp"
#include "sonata/validate.hpp"

namespace sonata {

enum class StageKind { MatchTable, Action, ExactStore, Bloom, CountMin, ReportFlag };

inline std::string_view stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::MatchTable: return "match_table";
    case StageKind::Action: return "action";
    case StageKind::ExactStore: return "exact_store";
    case StageKind::Bloom: return "bloom";
    case StageKind::CountMin: return "count_min";
    case StageKind::ReportFlag: return "report";
  }
  return "?";
}

struct StageConfig {
  StageKind kind = StageKind::Action;
  std::string owner;                   // query name
  std::optional<std::size_t> op_index; // operator this stage implements
  std::string label;
  // match_table
  std::vector<std::string> match_fields;
  std::uint64_t entries = 0;
  std::uint64_t entry_width = 0;
  bool runtime_entries = false;  // join / zoom-in table filled by install_filter_entries
  // exact_store
  std::vector<std::string> key_fields;
  std::uint64_t slot_bits = 0;
  std::uint64_t num_slots = 0;  // capacity; exact stores grow with observed keys
  // bloom / count_min
  std::size_t m = 0, k = 0;
  std::vector<std::uint64_t> hash_seeds;
};

struct PipelineConfig {
  std::vector<StageConfig> stages;
  std::map<std::string, std::vector<std::string>, std::less<>> per_query_metadata;
  std::vector<std::string> report_bits;  // queries owning a report flag
  std::uint64_t seed = 0;
};

struct StateLedger {
  std::map<std::size_t, std::uint64_t> bits_by_stage;  // stage index -> bits
  std::uint64_t total_bits = 0;
};

// One query's contribution to a report: its prefix output record and, after an
// in-plane reduce, the reduce key the record belongs to.
struct QueryReport {
  std::string query;
  Record record;
  std::optional<Record> group;
};

struct ReportTuple {
  std::size_t window = 0;
  std::vector<QueryReport> entries;
};

// A query prefix to install: the first p operators run in the switch.
struct CompileRequest {
  std::shared_ptr<const ValidatedQuery> query;
  std::size_t p = 0;
  bool sketch = false;
};

struct PipelineOptions {
  std::uint64_t seed = 0;
  std::optional<std::size_t> max_stages;  // unlimited by default
};

namespace detail {

inline bool op_is_stateful(OpKind k) { return k == OpKind::Distinct || k == OpKind::Reduce; }

inline std::uint64_t value_bits(const Value& v, FieldType t) {
  if (t == FieldType::Str) {
    if (auto* s = std::get_if<std::string>(&v)) return 8 * s->size();
    return 0;
  }
  return type_bits(t);
}

// Aggregate comparisons stay true once true only for a monotone running aggregate.
inline bool monotone_threshold(ReduceFunc f, FieldType value_type, CmpOp op_with_agg_on_left) {
  switch (f) {
    case ReduceFunc::Count: return op_with_agg_on_left == CmpOp::Gt || op_with_agg_on_left == CmpOp::Ge;
    case ReduceFunc::Sum:
      return is_integral(value_type) && (op_with_agg_on_left == CmpOp::Gt || op_with_agg_on_left == CmpOp::Ge);
    case ReduceFunc::Max: return op_with_agg_on_left == CmpOp::Gt || op_with_agg_on_left == CmpOp::Ge;
    case ReduceFunc::Min: return op_with_agg_on_left == CmpOp::Lt || op_with_agg_on_left == CmpOp::Le;
    case ReduceFunc::Entropy: return false;
  }
  return false;
}

}  // namespace detail

// Why the p-prefix cannot run in the switch, or nullopt when it can.
inline std::optional<std::string> prefix_unsupported_reason(const ValidatedQuery& q, std::size_t p, bool sketch) {
  if (p > q.operator_count()) return "partition beyond the last operator";
  if (p == 0) return std::nullopt;
  for (const auto& src : q.inputs)
    if (src.field && !info(*src.field).in_plane)
      return "field '" + std::string(info(*src.field).name) + "' cannot be parsed in the switch";

  // after an in-plane reduce, track which column carries the running aggregate
  std::optional<std::size_t> agg_col;
  ReduceFunc agg_func = ReduceFunc::Sum;
  FieldType agg_value_type = FieldType::U64;
  for (std::size_t i = 0; i < p; ++i) {
    const BoundOp& op = q.ops[i];
    const Schema& in = q.stage_schemas[i];
    const bool after_reduce = agg_col.has_value();
    switch (op.kind) {
      case OpKind::Distinct:
        if (after_reduce) return "distinct after an in-switch reduce";
        break;
      case OpKind::Sample:
        if (after_reduce) return "sample after an in-switch reduce";
        break;
      case OpKind::Reduce:
        if (after_reduce) return "reduce after an in-switch reduce";
        if (op.func == ReduceFunc::Entropy) return "entropy reduce is not linear";
        if (sketch && op.func != ReduceFunc::Sum && op.func != ReduceFunc::Count)
          return "sketch mode supports only sum and count reduces";
        if (op.value_column) agg_value_type = in[*op.value_column].type;
        if (sketch && op.func == ReduceFunc::Sum && !is_integral(agg_value_type))
          return "sketch mode needs integral sums";
        agg_func = op.func;
        agg_col = op.keys.size();
        break;
      case OpKind::Filter:
        if (auto* c = std::get_if<BoundComparison>(&op.predicate); c && agg_col) {
          auto* l = std::get_if<ColumnRef>(&c->lhs);
          auto* r = std::get_if<ColumnRef>(&c->rhs);
          bool l_agg = l && l->index == *agg_col;
          bool r_agg = r && r->index == *agg_col;
          if (l_agg || r_agg) {
            if (l && r) return "aggregate compared with a column";
            CmpOp op_left = l_agg ? c->op : flip(c->op);
            if (!detail::monotone_threshold(agg_func, agg_value_type, op_left))
              return "aggregate filter is not monotone";
          }
        }
        break;
      case OpKind::Map:
        if (agg_col && !op.rewrite) {
          std::optional<std::size_t> moved;
          for (std::size_t k = 0; k < op.items.size(); ++k)
            if (auto* c = std::get_if<ColumnRef>(&op.items[k]); c && c->index == *agg_col) moved = k;
          agg_col = moved ? *moved : SIZE_MAX;
        }
        break;
      case OpKind::Join: break;
    }
  }
  return std::nullopt;
}

// The simulated switch. Compiled once; stateful stages reset between windows.
class Pipeline {
 public:
  Pipeline(const std::vector<CompileRequest>& requests, const PipelineOptions& opts = {}) {
    config_.seed = opts.seed;
    std::set<std::string> names;
    for (const auto& req : requests) {
      if (!req.query) throw ArgumentError("null query in compile request");
      if (!names.insert(req.query->name()).second)
        throw ArgumentError("query '" + req.query->name() + "' installed twice");
      if (auto why = prefix_unsupported_reason(*req.query, req.p, req.sketch))
        throw UnsupportedError(req.query->name() + " at p=" + std::to_string(req.p) + ": " + *why);
      compile_query(req);
    }
    std::size_t real = 0;
    for (const auto& s : config_.stages)
      if (s.kind != StageKind::ReportFlag) ++real;
    if (opts.max_stages && real > *opts.max_stages)
      throw UnsupportedError("pipeline needs " + std::to_string(real) + " stages, limit is " +
                             std::to_string(*opts.max_stages));
  }

  const PipelineConfig& config() const { return config_; }

  // Run one packet through every installed prefix.
  std::optional<ReportTuple> process_packet(const PacketTuple& pkt) {
    ++packets_;
    ReportTuple out;
    out.window = window_;
    for (auto& qs : queries_) {
      auto rep = run_query(qs, pkt);
      if (rep) {
        ++qs.reports;
        out.entries.push_back(std::move(*rep));
      }
    }
    if (out.entries.empty()) return std::nullopt;
    ++reports_;
    return out;
  }

  // Zero every register and sketch; table entries stay installed.
  void reset_window() {
    for (auto& qs : queries_) {
      for (auto& st : qs.states) {
        st.seen.clear();
        st.groups.clear();
        if (st.bloom) st.bloom->reset();
        if (st.cm) st.cm->reset();
        st.counter = 0;
      }
    }
  }

  void begin_window(std::size_t index) {
    reset_window();
    window_ = index;
  }

  std::size_t window_index() const { return window_; }

  // Replace the entries of a query's in-switch membership tables. With `set_name`, only
  // tables reading that set are updated. Returns the number of tables updated.
  std::size_t install_filter_entries(const std::string& query, const KeySet& entries,
                                     const std::optional<std::string>& set_name = std::nullopt) {
    auto it = std::find_if(queries_.begin(), queries_.end(), [&](const auto& qs) { return qs.req.query->name() == query; });
    if (it == queries_.end()) throw ArgumentError("unknown query '" + query + "'");
    std::size_t updated = 0;
    for (std::size_t i = 0; i < it->req.p; ++i) {
      const auto* m = std::get_if<BoundMembership>(&it->req.query->ops[i].predicate);
      if (!m || (set_name && m->set != *set_name)) continue;
      it->states[i].entries = entries;
      it->states[i].has_entries = true;
      ++updated;
    }
    return updated;
  }

  StateLedger state_bits() const {
    StateLedger ledger;
    for (std::size_t s = 0; s < config_.stages.size(); ++s) {
      std::uint64_t bits = stage_bits(s);
      ledger.bits_by_stage[s] = bits;
      ledger.total_bits += bits;
    }
    return ledger;
  }

  // State bits owned by one query, including its report flag.
  std::uint64_t query_state_bits(const std::string& query) const {
    std::uint64_t total = 0;
    for (std::size_t s = 0; s < config_.stages.size(); ++s)
      if (config_.stages[s].owner == query) total += stage_bits(s);
    return total;
  }

  std::uint64_t packets_processed() const { return packets_; }
  std::uint64_t reports_emitted() const { return reports_; }
  std::uint64_t query_reports(const std::string& query) const {
    for (const auto& qs : queries_)
      if (qs.req.query->name() == query) return qs.reports;
    throw ArgumentError("unknown query '" + query + "'");
  }

  // Schema of the records a query reports.
  const Schema& report_schema(const std::string& query) const {
    for (const auto& qs : queries_)
      if (qs.req.query->name() == query) return qs.req.query->stage_schemas[qs.req.p];
    throw ArgumentError("unknown query '" + query + "'");
  }

  // Debug serialization: one `window,query,field=value,...` line per query entry.
  void write_report(std::ostream& out, const ReportTuple& t) const {
    for (const auto& e : t.entries) {
      const Schema& s = report_schema(e.query);
      out << t.window << ',' << e.query;
      for (std::size_t c = 0; c < e.record.size(); ++c) out << ',' << s[c].name << '=' << format_value(e.record[c], s[c].type);
      out << '\n';
    }
  }

 private:
  struct OpState {
    std::size_t stage = 0;  // first stage implementing the operator
    std::unordered_set<std::string> seen;
    std::unordered_map<std::string, ops::Aggregate> groups;
    std::optional<BloomFilter> bloom;
    std::optional<CountMinSketch> cm;
    std::uint64_t counter = 0;
    KeySet entries;
    bool has_entries = false;
  };

  struct QueryState {
    CompileRequest req;
    std::vector<OpState> states;
    std::uint64_t reports = 0;
  };

  std::uint64_t next_seed() { return splitmix64(config_.seed ^ (0x5bd1e995ULL * ++seed_counter_)); }

  std::size_t add_stage(StageConfig s) {
    config_.stages.push_back(std::move(s));
    return config_.stages.size() - 1;
  }

  void compile_query(const CompileRequest& req) {
    const ValidatedQuery& q = *req.query;
    QueryState qs;
    qs.req = req;
    qs.states.resize(req.p);
    const double eps = q.ast.tolerance();
    for (std::size_t i = 0; i < req.p; ++i) {
      const BoundOp& op = q.ops[i];
      const Schema& in = q.stage_schemas[i];
      StageConfig s;
      s.owner = q.name();
      s.op_index = i;
      s.label = q.name() + ":" + std::to_string(i) + ":" + std::string(op_name(op.kind));
      switch (op.kind) {
        case OpKind::Filter:
        case OpKind::Join:
          s.kind = StageKind::MatchTable;
          if (auto* c = std::get_if<BoundComparison>(&op.predicate)) {
            std::uint64_t width = 0;
            for (const auto* side : {&c->lhs, &c->rhs}) {
              if (auto* col = std::get_if<ColumnRef>(side)) {
                s.match_fields.push_back(in[col->index].name);
                width += type_bits(col->type);
              }
            }
            // string keys are as wide as the literal they match
            for (const auto* side : {&c->lhs, &c->rhs})
              if (auto* v = std::get_if<Value>(side); v && std::holds_alternative<std::string>(*v))
                width = std::max(width, detail::value_bits(*v, FieldType::Str));
            s.entries = 1;
            s.entry_width = width;
            bool range = c->op != CmpOp::Eq && c->op != CmpOp::Ne;
            qs.states[i].stage = add_stage(s);
            if (range) {
              // one table per outcome
              StageConfig other = s;
              other.label += ":else";
              add_stage(std::move(other));
            }
          } else {
            const auto& m = std::get<BoundMembership>(op.predicate);
            s.match_fields.push_back(in[m.column.index].name);
            s.runtime_entries = true;
            s.entry_width = m.column.type == FieldType::Str ? 0 : type_bits(m.column.type);
            qs.states[i].stage = add_stage(s);
          }
          break;
        case OpKind::Map:
          s.kind = StageKind::Action;
          qs.states[i].stage = add_stage(s);
          break;
        case OpKind::Distinct:
        case OpKind::Reduce: {
          for (auto k : op.keys) s.key_fields.push_back(in[k].name);
          if (req.sketch) {
            if (op.kind == OpKind::Distinct) {
              SketchDims d = bloom_dims(eps, eps);
              s.kind = StageKind::Bloom;
              s.m = d.width;
              s.k = d.depth;
              qs.states[i].bloom.emplace(d, next_seed());
              s.hash_seeds = qs.states[i].bloom->seeds();
            } else {
              SketchDims d = count_min_dims(eps, eps);
              s.kind = StageKind::CountMin;
              s.m = d.width;
              s.k = d.depth;
              qs.states[i].cm.emplace(d, next_seed());
              s.hash_seeds = qs.states[i].cm->seeds();
            }
          } else {
            s.kind = StageKind::ExactStore;
            s.slot_bits = op.kind == OpKind::Distinct ? 1 : 32;
          }
          qs.states[i].stage = add_stage(s);
          break;
        }
        case OpKind::Sample:
          s.kind = StageKind::ExactStore;
          s.slot_bits = 32;
          s.num_slots = 1;
          qs.states[i].stage = add_stage(s);
          break;
      }
    }
    if (req.p > 0) {
      StageConfig flag;
      flag.kind = StageKind::ReportFlag;
      flag.owner = q.name();
      flag.label = "report:" + q.name();
      add_stage(std::move(flag));
      config_.report_bits.push_back(q.name());
    }
    std::vector<std::string> meta;
    for (const auto& f : q.stage_schemas[req.p]) meta.push_back(f.name);
    config_.per_query_metadata[q.name()] = std::move(meta);
    queries_.push_back(std::move(qs));
  }

  std::uint64_t stage_bits(std::size_t s) const {
    const StageConfig& st = config_.stages[s];
    switch (st.kind) {
      case StageKind::Action: return 0;
      case StageKind::ReportFlag: return 1;
      case StageKind::Bloom: return st.m;
      case StageKind::CountMin: return static_cast<std::uint64_t>(st.k) * st.m * CountMinSketch::kCounterBits;
      case StageKind::MatchTable: {
        if (!st.runtime_entries) return st.entries * st.entry_width;
        const OpState& os = state_for(s);
        if (!os.has_entries) return 0;
        std::uint64_t bits = 0;
        for (const auto& v : os.entries.keys) bits += st.entry_width ? st.entry_width : detail::value_bits(v, FieldType::Str);
        return bits;
      }
      case StageKind::ExactStore: {
        if (st.num_slots) return st.num_slots * st.slot_bits;
        const OpState& os = state_for(s);
        return static_cast<std::uint64_t>(os.seen.size() + os.groups.size()) * st.slot_bits;
      }
    }
    return 0;
  }

  const OpState& state_for(std::size_t stage) const {
    for (const auto& qs : queries_)
      for (const auto& os : qs.states)
        if (os.stage == stage) return os;
    throw ArgumentError("stage has no operator state");
  }

  std::optional<QueryReport> run_query(QueryState& qs, const PacketTuple& pkt) {
    const ValidatedQuery& q = *qs.req.query;
    Record r = project_packet(q, pkt);
    std::optional<Record> group;
    for (std::size_t i = 0; i < qs.req.p; ++i) {
      const BoundOp& op = q.ops[i];
      OpState& st = qs.states[i];
      switch (op.kind) {
        case OpKind::Filter:
        case OpKind::Join:
          if (auto* c = std::get_if<BoundComparison>(&op.predicate)) {
            if (!ops::eval_comparison(*c, r)) return std::nullopt;
          } else {
            // an empty table matches nothing
            if (!st.has_entries) return std::nullopt;
            if (!ops::eval_membership(std::get<BoundMembership>(op.predicate), r, st.entries)) return std::nullopt;
          }
          break;
        case OpKind::Map: r = ops::apply_map(op, std::move(r)); break;
        case OpKind::Distinct: {
          Record key = ops::project(r, op.keys);
          std::string bytes = key_bytes(key);
          bool seen = st.bloom ? st.bloom->insert(bytes) : !st.seen.insert(std::move(bytes)).second;
          if (seen) return std::nullopt;
          r = std::move(key);
          break;
        }
        case OpKind::Reduce: {
          Record key = ops::project(r, op.keys);
          std::string bytes = key_bytes(key);
          Value agg;
          if (st.cm) {
            std::uint64_t by = 1;
            if (op.func == ReduceFunc::Sum) {
              const Value& v = r[*op.value_column];
              by = is_absent(v) ? 0 : static_cast<std::uint64_t>(std::max<std::int64_t>(0, std::get<std::int64_t>(v)));
            }
            agg = Value{static_cast<std::int64_t>(st.cm->update(bytes, by))};
          } else {
            auto& a = st.groups[bytes];
            a.add(op.func, op.value_column ? &r[*op.value_column] : nullptr);
            agg = a.result(op.func, q.stage_schemas[i + 1].back().type);
          }
          group = key;
          r = std::move(key);
          r.push_back(std::move(agg));
          break;
        }
        case OpKind::Sample:
          if (st.counter++ % static_cast<std::uint64_t>(op.sample_rate) != 0) return std::nullopt;
          break;
      }
    }
    return QueryReport{q.name(), std::move(r), std::move(group)};
  }

  PipelineConfig config_;
  std::vector<QueryState> queries_;
  std::size_t window_ = 0;
  std::uint64_t packets_ = 0;
  std::uint64_t reports_ = 0;
  std::uint64_t seed_counter_ = 0;
};

inline Pipeline compile_pipeline(const std::vector<CompileRequest>& requests, const PipelineOptions& opts = {}) {
  return Pipeline(requests, opts);
}

}  // namespace sonata
