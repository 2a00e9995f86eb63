#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/packet.hpp"
#include "sonata/query.hpp"
#include "sonata/value.hpp"

namespace sonata {

struct ColumnRef {
  std::size_t index = 0;
  FieldType type = FieldType::U32;
  std::optional<int> mask;
};

using BoundOperand = std::variant<ColumnRef, Value>;

struct BoundComparison {
  BoundOperand lhs;
  CmpOp op = CmpOp::Eq;
  BoundOperand rhs;
};

struct BoundMembership {
  ColumnRef column;
  std::string set;
};

// An operator with every field reference resolved against its input stage schema.
struct BoundOp {
  OpKind kind = OpKind::Filter;
  std::variant<std::monostate, BoundComparison, BoundMembership> predicate;  // filter, join
  std::optional<ColumnRef> rewrite;        // in-place mask map
  std::vector<BoundOperand> items;         // projection map
  std::vector<std::size_t> keys;           // distinct / reduce
  ReduceFunc func = ReduceFunc::Sum;
  std::optional<std::size_t> value_column; // reduce input, absent for count
  std::int64_t sample_rate = 1;
};

// Where an input column's value comes from in a packet.
struct InputSource {
  std::optional<Field> field;  // built-in field
  std::string extension;       // extension name when field is empty
};

struct ValidatedQuery {
  QueryAST ast;
  std::vector<BoundOp> ops;
  std::vector<Schema> stage_schemas;  // stage_schemas[i] feeds ops[i]; back() is the output
  std::vector<InputSource> inputs;    // one per stage_schemas[0] column
  std::vector<std::size_t> stateful_indices;
  std::vector<std::string> refinement_keys;  // sorted
  std::optional<std::string> join_target;
  std::vector<std::string> set_names;  // every membership set referenced, in order
  Schema packet_schema;                // schema the query was validated against

  const std::string& name() const { return ast.name; }
  std::size_t operator_count() const { return ops.size(); }
  const Schema& input_schema() const { return stage_schemas.front(); }
  const Schema& output_schema() const { return stage_schemas.back(); }
};

// Queries declared so far, available as join targets.
using QueryCatalog = std::map<std::string, std::shared_ptr<const ValidatedQuery>, std::less<>>;

struct ValidateOptions {
  // Set names accepted in membership filters besides catalog queries (refinement zoom sets),
  // mapped to the column type they hold.
  std::map<std::string, FieldType, std::less<>> extra_sets;
};

namespace detail {

inline bool types_comparable(FieldType a, FieldType b) { return is_numeric(a) == is_numeric(b); }

class Binder {
 public:
  Binder(const QueryAST& ast, const Schema& packet_schema, const QueryCatalog& catalog, const ValidateOptions& opts)
      : ast_(ast), packet_(packet_schema), catalog_(catalog), opts_(opts) {}

  ValidatedQuery run() {
    if (ast_.operators.empty()) throw ValidationError(ast_.name + ": query has no operators");
    if (!(ast_.window > 0)) throw ValidationError(ast_.name + ": window must be positive");
    if (ast_.max_delay() < ast_.window) throw ValidationError(ast_.name + ": dmax must be at least the window");
    double err = ast_.tolerance();
    if (!(err > 0 && err < 1)) throw ValidationError(ast_.name + ": error tolerance must lie in (0, 1)");

    ValidatedQuery vq;
    vq.ast = ast_;
    vq.packet_schema = packet_;
    collect_inputs(vq);
    Schema current = vq.stage_schemas.front();
    std::vector<std::set<std::string>> stateful_keys;
    for (std::size_t i = 0; i < ast_.operators.size(); ++i) {
      const auto& node = ast_.operators[i];
      BoundOp op = bind(node, current, vq, i);
      if (op.kind == OpKind::Distinct || op.kind == OpKind::Reduce) {
        vq.stateful_indices.push_back(i);
        std::set<std::string> names;
        for (const auto& k : node.keys) names.insert(k);
        stateful_keys.push_back(std::move(names));
      }
      current = output_schema(node, op, current);
      vq.ops.push_back(std::move(op));
      vq.stage_schemas.push_back(current);
    }

    // refinement keys: hierarchical fields keyed by every stateful operator
    if (!stateful_keys.empty()) {
      for (const auto& name : stateful_keys.front()) {
        bool everywhere = std::all_of(stateful_keys.begin(), stateful_keys.end(),
                                      [&](const auto& s) { return s.count(name) > 0; });
        if (!everywhere) continue;
        auto col = find_column(vq.input_schema(), name);
        FieldType t = col ? vq.input_schema()[*col].type : FieldType::U32;
        if (col && is_hierarchical(name, t)) vq.refinement_keys.push_back(name);
      }
    }
    return vq;
  }

 private:
  [[noreturn]] void fail(std::size_t op_index, const std::string& what) const {
    throw ValidationError(ast_.name + ": operator " + std::to_string(op_index + 1) + " (" +
                          std::string(op_name(ast_.operators[op_index].kind)) + "): " + what);
  }

  // Fields referenced before the first schema-changing operator come from the packet.
  void collect_inputs(ValidatedQuery& vq) {
    Schema in;
    auto want = [&](const std::string& name, std::size_t op_index) {
      if (find_column(in, name)) return;
      auto col = find_column(packet_, name);
      if (!col) {
        if (is_aggregate_name(name)) return;  // reported by bind()
        fail(op_index, "unknown field '" + name + "'");
      }
      in.push_back(packet_[*col]);
      InputSource src;
      src.field = find_field(name);
      if (!src.field) src.extension = name;
      vq.inputs.push_back(std::move(src));
    };
    auto want_operand = [&](const Operand& o, std::size_t i) {
      if (auto* f = std::get_if<FieldRef>(&o)) want(f->name, i);
    };
    for (std::size_t i = 0; i < ast_.operators.size(); ++i) {
      const auto& node = ast_.operators[i];
      switch (node.kind) {
        case OpKind::Filter:
          if (auto* c = std::get_if<Comparison>(&node.predicate)) {
            want_operand(c->lhs, i);
            want_operand(c->rhs, i);
          } else {
            want(std::get<Membership>(node.predicate).field.name, i);
          }
          continue;
        case OpKind::Sample: continue;
        case OpKind::Join: {
          auto target = catalog_.find(node.target);
          if (target != catalog_.end() && !target->second->output_schema().empty())
            want(target->second->output_schema().front().name, i);
          continue;
        }
        case OpKind::Map:
          if (node.rewrite) {
            want(node.rewrite->name, i);
            continue;
          }
          for (const auto& item : node.items) want_operand(item, i);
          break;
        case OpKind::Distinct:
        case OpKind::Reduce:
          for (const auto& k : node.keys) want(k, i);
          // the reduce value column is the last non-key field; for a raw packet stream that
          // is not well defined, so require an explicit map first
          break;
      }
      break;
    }
    vq.stage_schemas.push_back(std::move(in));
  }

  ColumnRef column(const Schema& s, const FieldRef& f, std::size_t i) const {
    auto col = find_column(s, f.name);
    if (!col) fail(i, "unknown field '" + f.name + "'");
    ColumnRef ref{*col, s[*col].type, f.mask};
    if (f.mask) {
      if (!is_hierarchical(f.name, ref.type)) fail(i, "field '" + f.name + "' is not hierarchical");
      if (*f.mask < 0 || *f.mask > finest_level(ref.type)) fail(i, "mask level out of range");
    }
    return ref;
  }

  BoundOperand operand(const Schema& s, const Operand& o, std::size_t i) const {
    if (auto* f = std::get_if<FieldRef>(&o)) return column(s, *f, i);
    return std::get<Literal>(o).value;
  }

  static FieldType operand_type(const BoundOperand& o) {
    if (auto* c = std::get_if<ColumnRef>(&o)) return c->type;
    const auto& v = std::get<Value>(o);
    if (std::holds_alternative<std::string>(v)) return FieldType::Str;
    if (std::holds_alternative<double>(v)) return FieldType::Float;
    return FieldType::U64;
  }

  FieldType set_type(const std::string& set, std::size_t i, ValidatedQuery& vq, bool is_join) {
    if (auto extra = opts_.extra_sets.find(set); extra != opts_.extra_sets.end()) {
      if (std::find(vq.set_names.begin(), vq.set_names.end(), set) == vq.set_names.end()) vq.set_names.push_back(set);
      return extra->second;
    }
    if (set == ast_.name) fail(i, "join cycle: query '" + set + "' joins itself");
    auto target = catalog_.find(set);
    if (target == catalog_.end()) fail(i, "undeclared join target '" + set + "'");
    if (vq.join_target && *vq.join_target != set) fail(i, "at most one join reference is allowed");
    if (vq.join_target && is_join) fail(i, "at most one join reference is allowed");
    vq.join_target = set;
    if (std::find(vq.set_names.begin(), vq.set_names.end(), set) == vq.set_names.end()) vq.set_names.push_back(set);
    const auto& out = target->second->output_schema();
    if (out.empty()) fail(i, "join target '" + set + "' has an empty output");
    return out.front().type;
  }

  BoundOp bind(const OperatorNode& node, const Schema& s, ValidatedQuery& vq, std::size_t i) {
    BoundOp op;
    op.kind = node.kind;
    switch (node.kind) {
      case OpKind::Filter: {
        if (auto* c = std::get_if<Comparison>(&node.predicate)) {
          BoundComparison bc{operand(s, c->lhs, i), c->op, operand(s, c->rhs, i)};
          if (!types_comparable(operand_type(bc.lhs), operand_type(bc.rhs))) fail(i, "type mismatch in predicate");
          op.predicate = std::move(bc);
        } else {
          const auto& m = std::get<Membership>(node.predicate);
          ColumnRef col = column(s, m.field, i);
          FieldType t = set_type(m.set, i, vq, false);
          if (!types_comparable(col.type, t)) fail(i, "type mismatch in membership test");
          op.predicate = BoundMembership{col, m.set};
        }
        break;
      }
      case OpKind::Join: {
        FieldType t = set_type(node.target, i, vq, true);
        const auto& key = catalog_.at(node.target)->output_schema().front().name;
        auto col = find_column(s, key);
        if (!col) fail(i, "join field '" + key + "' is not available at this stage");
        if (!types_comparable(s[*col].type, t)) fail(i, "type mismatch in join");
        op.predicate = BoundMembership{ColumnRef{*col, s[*col].type, std::nullopt}, node.target};
        break;
      }
      case OpKind::Map:
        if (node.rewrite) {
          op.rewrite = column(s, *node.rewrite, i);
        } else {
          if (node.items.empty()) fail(i, "map needs at least one item");
          for (const auto& item : node.items) op.items.push_back(operand(s, item, i));
        }
        break;
      case OpKind::Distinct:
      case OpKind::Reduce: {
        if (node.keys.empty()) fail(i, "key list must not be empty");
        for (const auto& k : node.keys) {
          auto col = find_column(s, k);
          if (!col) fail(i, "unknown key field '" + k + "'");
          if (std::find(op.keys.begin(), op.keys.end(), *col) != op.keys.end()) fail(i, "duplicate key '" + k + "'");
          op.keys.push_back(*col);
        }
        if (node.kind == OpKind::Reduce) {
          op.func = node.func;
          if (node.func != ReduceFunc::Count) {
            for (std::size_t c = s.size(); c-- > 0;) {
              if (std::find(op.keys.begin(), op.keys.end(), c) == op.keys.end()) {
                op.value_column = c;
                break;
              }
            }
            if (!op.value_column) fail(i, "reduce needs a value column besides its keys");
            FieldType vt = s[*op.value_column].type;
            if (!is_numeric(vt) && node.func != ReduceFunc::Entropy)
              fail(i, "cannot apply " + std::string(func_name(node.func)) + " to a string column");
          }
        }
        break;
      }
      case OpKind::Sample:
        if (node.sample_rate < 1) fail(i, "sample rate must be at least 1");
        op.sample_rate = node.sample_rate;
        break;
    }
    return op;
  }

  static Schema output_schema(const OperatorNode& node, const BoundOp& op, const Schema& in) {
    switch (node.kind) {
      case OpKind::Filter:
      case OpKind::Sample:
      case OpKind::Join: return in;
      case OpKind::Map: {
        if (op.rewrite) return in;
        Schema out;
        for (std::size_t k = 0; k < op.items.size(); ++k) {
          if (auto* c = std::get_if<ColumnRef>(&op.items[k])) {
            out.push_back(in[c->index]);
          } else {
            const auto& v = std::get<Value>(op.items[k]);
            FieldType t = std::holds_alternative<double>(v)        ? FieldType::Float
                          : std::holds_alternative<std::string>(v) ? FieldType::Str
                                                                   : FieldType::U64;
            out.push_back({"_c" + std::to_string(k), t});
          }
        }
        return out;
      }
      case OpKind::Distinct: {
        Schema out;
        for (auto k : op.keys) out.push_back(in[k]);
        return out;
      }
      case OpKind::Reduce: {
        Schema out;
        for (auto k : op.keys) out.push_back(in[k]);
        FieldType t = FieldType::U64;
        if (op.func == ReduceFunc::Min || op.func == ReduceFunc::Max) t = in[*op.value_column].type;
        if (op.func == ReduceFunc::Entropy) t = FieldType::Float;
        if (op.func == ReduceFunc::Sum && in[*op.value_column].type == FieldType::Float) t = FieldType::Float;
        out.push_back({aggregate_column(op.func), t});
        return out;
      }
    }
    return in;
  }

  const QueryAST& ast_;
  const Schema& packet_;
  const QueryCatalog& catalog_;
  const ValidateOptions& opts_;
};

}  // namespace detail

inline ValidatedQuery validate(const QueryAST& ast, const Schema& schema, const QueryCatalog& catalog = {},
                               const ValidateOptions& opts = {}) {
  return detail::Binder(ast, schema, catalog, opts).run();
}

// Hierarchical fields used as keys by every stateful operator.
inline std::vector<std::string> find_refinement_keys(const ValidatedQuery& q) { return q.refinement_keys; }

// Validate a whole query file in declaration order; later queries may join earlier ones.
inline std::vector<std::shared_ptr<const ValidatedQuery>> validate_all(const std::vector<QueryAST>& asts,
                                                                       const Schema& schema) {
  QueryCatalog catalog;
  std::vector<std::shared_ptr<const ValidatedQuery>> out;
  for (const auto& ast : asts) {
    if (catalog.count(ast.name)) throw ValidationError("duplicate query name '" + ast.name + "'");
    auto vq = std::make_shared<const ValidatedQuery>(validate(ast, schema, catalog));
    catalog.emplace(ast.name, vq);
    out.push_back(std::move(vq));
  }
  return out;
}

inline QueryCatalog make_catalog(const std::vector<std::shared_ptr<const ValidatedQuery>>& queries) {
  QueryCatalog c;
  for (const auto& q : queries) c.emplace(q->name(), q);
  return c;
}

// Build the packet-to-record projection for a query.
inline Record project_packet(const ValidatedQuery& q, const PacketTuple& pkt) {
  Record r;
  r.reserve(q.inputs.size());
  for (const auto& src : q.inputs) r.push_back(src.field ? pkt.get(*src.field) : pkt.get(src.extension));
  return r;
}

}  // namespace sonata
