#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/packet.hpp"
#include "sonata/value.hpp"

namespace sonata {

enum class OpKind { Filter, Map, Distinct, Reduce, Sample, Join };
enum class CmpOp { Eq, Ne, Gt, Ge, Lt, Le };
enum class ReduceFunc { Sum, Count, Min, Max, Entropy };

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::Filter: return "filter";
    case OpKind::Map: return "map";
    case OpKind::Distinct: return "distinct";
    case OpKind::Reduce: return "reduce";
    case OpKind::Sample: return "sample";
    case OpKind::Join: return "join";
  }
  return "?";
}

inline std::string_view cmp_text(CmpOp op) {
  switch (op) {
    case CmpOp::Eq: return "==";
    case CmpOp::Ne: return "!=";
    case CmpOp::Gt: return ">";
    case CmpOp::Ge: return ">=";
    case CmpOp::Lt: return "<";
    case CmpOp::Le: return "<=";
  }
  return "?";
}

// Comparator seen from the other side: (a < b) == (b > a).
inline CmpOp flip(CmpOp op) {
  switch (op) {
    case CmpOp::Gt: return CmpOp::Lt;
    case CmpOp::Ge: return CmpOp::Le;
    case CmpOp::Lt: return CmpOp::Gt;
    case CmpOp::Le: return CmpOp::Ge;
    default: return op;
  }
}

inline std::string_view func_name(ReduceFunc f) {
  switch (f) {
    case ReduceFunc::Sum: return "sum";
    case ReduceFunc::Count: return "count";
    case ReduceFunc::Min: return "min";
    case ReduceFunc::Max: return "max";
    case ReduceFunc::Entropy: return "entropy";
  }
  return "?";
}

inline std::optional<ReduceFunc> parse_func(std::string_view s) {
  if (s == "sum") return ReduceFunc::Sum;
  if (s == "count") return ReduceFunc::Count;
  if (s == "min") return ReduceFunc::Min;
  if (s == "max") return ReduceFunc::Max;
  if (s == "entropy") return ReduceFunc::Entropy;
  return std::nullopt;
}

// Name of the aggregate column a reduce produces.
inline std::string aggregate_column(ReduceFunc f) {
  return (f == ReduceFunc::Sum || f == ReduceFunc::Count) ? "count" : std::string(func_name(f));
}

inline bool is_aggregate_name(std::string_view s) {
  return s == "count" || s == "min" || s == "max" || s == "entropy";
}

struct FieldRef {
  std::string name;
  std::optional<int> mask;  // hierarchical mask level, e.g. dstIP/8
  friend bool operator==(const FieldRef&, const FieldRef&) = default;
};

struct Literal {
  Value value;
  bool ipv4 = false;  // written in dotted-quad form
  friend bool operator==(const Literal&, const Literal&) = default;
};

using Operand = std::variant<FieldRef, Literal>;

struct Comparison {
  Operand lhs;
  CmpOp op = CmpOp::Eq;
  Operand rhs;
  friend bool operator==(const Comparison&, const Comparison&) = default;
};

// `field in SET`: membership in a named key set (another query's previous-window output).
struct Membership {
  FieldRef field;
  std::string set;
  friend bool operator==(const Membership&, const Membership&) = default;
};

using Predicate = std::variant<Comparison, Membership>;

struct OperatorNode {
  OpKind kind = OpKind::Filter;
  Predicate predicate;               // filter
  std::vector<Operand> items;        // map projection
  std::optional<FieldRef> rewrite;   // map(f -> f/N): in-place mask, schema unchanged
  std::vector<std::string> keys;     // distinct / reduce
  ReduceFunc func = ReduceFunc::Sum; // reduce
  std::int64_t sample_rate = 1;      // sample: keep 1 in N
  std::string target;                // join
  // Index of the user-written operator this node is attached to when it was inserted
  // by a query transformation; -1 for user-written operators.
  int origin = -1;
  friend bool operator==(const OperatorNode&, const OperatorNode&) = default;
};

struct QueryAST {
  std::string name;
  double window = 1.0;
  std::vector<OperatorNode> operators;
  std::optional<double> d_max;            // seconds
  std::optional<double> error_tolerance;  // fraction
  std::vector<int> levels;                // optional refinement level grid override

  static constexpr double kDefaultErrorTolerance = 0.01;
  static constexpr int kDefaultDelayWindows = 8;

  double max_delay() const { return d_max.value_or(kDefaultDelayWindows * window); }
  double tolerance() const { return error_tolerance.value_or(kDefaultErrorTolerance); }

  friend bool operator==(const QueryAST&, const QueryAST&) = default;
};

// ---------------------------------------------------------------------------
// Lexer

namespace detail {

enum class Tok { Ident, Int, Float, Ipv4, String, Punct, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  std::size_t line = 1, column = 1;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    while (true) {
      skip_space();
      Token t;
      t.line = line_;
      t.column = col_;
      if (pos_ >= src_.size()) {
        out.push_back(t);
        return out;
      }
      char c = src_[pos_];
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        t.kind = Tok::Ident;
        while (pos_ < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
          t.text += advance();
      } else if (std::isdigit(static_cast<unsigned char>(c)) ||
                 (c == '-' && pos_ + 1 < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_ + 1])))) {
        lex_number(t);
      } else if (c == '"') {
        t.kind = Tok::String;
        advance();
        while (pos_ < src_.size() && src_[pos_] != '"') {
          if (src_[pos_] == '\n') throw ParseError("unterminated string", t.line, t.column);
          t.text += advance();
        }
        if (pos_ >= src_.size()) throw ParseError("unterminated string", t.line, t.column);
        advance();
      } else {
        t.kind = Tok::Punct;
        static constexpr std::string_view two[] = {"==", "!=", ">=", "<=", "->", "=>"};
        bool matched = false;
        for (auto p : two) {
          if (src_.substr(pos_, 2) == p) {
            t.text = std::string(p);
            advance();
            advance();
            matched = true;
            break;
          }
        }
        if (!matched) {
          if (std::string_view("=().,[]/<>").find(c) == std::string_view::npos)
            throw ParseError(std::string("unexpected character '") + c + "'", line_, col_);
          t.text = std::string(1, advance());
        }
      }
      out.push_back(std::move(t));
    }
  }

 private:
  char advance() {
    char c = src_[pos_++];
    if (c == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    return c;
  }

  void skip_space() {
    while (pos_ < src_.size()) {
      char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        advance();
      } else {
        break;
      }
    }
  }

  void lex_number(Token& t) {
    if (src_[pos_] == '-') t.text += advance();
    int dots = 0;
    bool exponent = false;
    while (pos_ < src_.size()) {
      char c = src_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c))) {
        t.text += advance();
      } else if (c == '.' && pos_ + 1 < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_ + 1])) &&
                 !exponent) {
        ++dots;
        t.text += advance();
      } else if ((c == 'e' || c == 'E') && !exponent && dots <= 1) {
        std::size_t look = pos_ + 1;
        if (look < src_.size() && (src_[look] == '+' || src_[look] == '-')) ++look;
        if (look >= src_.size() || !std::isdigit(static_cast<unsigned char>(src_[look]))) break;
        exponent = true;
        t.text += advance();
        if (src_[pos_] == '+' || src_[pos_] == '-') t.text += advance();
      } else {
        break;
      }
    }
    if (dots == 3 && !exponent && t.text[0] != '-') {
      t.kind = Tok::Ipv4;
    } else if (dots == 0 && !exponent) {
      t.kind = Tok::Int;
    } else if (dots <= 1) {
      t.kind = Tok::Float;
    } else {
      throw ParseError("malformed number '" + t.text + "'", t.line, t.column);
    }
  }

  std::string_view src_;
  std::size_t pos_ = 0, line_ = 1, col_ = 1;
};

class Parser {
 public:
  explicit Parser(std::string_view src) : toks_(Lexer(src).run()) {}

  std::vector<QueryAST> parse_all() {
    std::vector<QueryAST> out;
    while (peek().kind != Tok::End) out.push_back(parse_query());
    return out;
  }

  QueryAST parse_one() {
    auto q = parse_query();
    if (peek().kind != Tok::End) fail("unexpected input after query");
    return q;
  }

 private:
  const Token& peek(std::size_t ahead = 0) const {
    return toks_[std::min(i_ + ahead, toks_.size() - 1)];
  }
  const Token& next() {
    const Token& t = toks_[i_];
    if (i_ + 1 < toks_.size()) ++i_;
    return t;
  }
  [[noreturn]] void fail(const std::string& what, const Token* at = nullptr) const {
    const Token& t = at ? *at : peek();
    throw ParseError(what + (t.kind == Tok::End ? " (at end of input)" : " near '" + t.text + "'"), t.line,
                     t.column);
  }
  bool is_punct(std::string_view p, std::size_t ahead = 0) const {
    return peek(ahead).kind == Tok::Punct && peek(ahead).text == p;
  }
  bool is_ident(std::string_view s) const { return peek().kind == Tok::Ident && peek().text == s; }
  void expect(std::string_view p) {
    if (!is_punct(p)) fail("expected '" + std::string(p) + "'");
    next();
  }
  void expect_ident(std::string_view s) {
    if (!is_ident(s)) fail("expected '" + std::string(s) + "'");
    next();
  }
  std::string ident() {
    if (peek().kind != Tok::Ident) fail("expected identifier");
    return next().text;
  }

  double number() {
    const Token& t = peek();
    if (t.kind != Tok::Int && t.kind != Tok::Float) fail("expected number");
    next();
    return std::stod(t.text);
  }

  std::int64_t integer() {
    const Token& t = peek();
    if (t.kind != Tok::Int) fail("expected integer");
    next();
    try {
      return std::stoll(t.text);
    } catch (const std::exception&) {
      fail("integer out of range", &t);
    }
  }

  QueryAST parse_query() {
    QueryAST q;
    q.name = ident();
    expect("=");
    expect_ident("pktStream");
    expect("(");
    const Token& wt = peek();
    q.window = number();
    if (!(q.window > 0)) fail("window must be positive", &wt);
    expect(")");
    while (is_punct(".")) {
      next();
      q.operators.push_back(parse_operator());
    }
    if (is_punct("[")) parse_opts(q);
    return q;
  }

  void parse_opts(QueryAST& q) {
    expect("[");
    bool first = true;
    while (!is_punct("]")) {
      if (!first) expect(",");
      first = false;
      const Token& key = peek();
      std::string name = ident();
      expect("=");
      if (name == "dmax") {
        q.d_max = number();
      } else if (name == "err") {
        q.error_tolerance = number();
      } else if (name == "levels") {
        expect("(");
        q.levels.clear();
        while (!is_punct(")")) {
          if (!q.levels.empty()) expect(",");
          q.levels.push_back(static_cast<int>(integer()));
        }
        expect(")");
      } else {
        fail("unknown option '" + name + "'", &key);
      }
    }
    expect("]");
  }

  FieldRef field_ref() {
    FieldRef f{ident(), std::nullopt};
    if (is_punct("/")) {
      next();
      f.mask = static_cast<int>(integer());
    }
    return f;
  }

  Operand operand() {
    const Token& t = peek();
    switch (t.kind) {
      case Tok::Ident: return field_ref();
      case Tok::Int: next(); return Literal{Value{std::stoll(t.text)}, false};
      case Tok::Float: next(); return Literal{Value{std::stod(t.text)}, false};
      case Tok::Ipv4: next(); return Literal{Value{static_cast<std::int64_t>(*parse_ipv4(t.text))}, true};
      case Tok::String: next(); return Literal{Value{t.text}, false};
      default: fail("expected field or literal");
    }
  }

  std::optional<CmpOp> cmp() {
    if (peek().kind != Tok::Punct) return std::nullopt;
    const auto& s = peek().text;
    std::optional<CmpOp> op;
    if (s == "==") op = CmpOp::Eq;
    else if (s == "!=") op = CmpOp::Ne;
    else if (s == ">") op = CmpOp::Gt;
    else if (s == ">=") op = CmpOp::Ge;
    else if (s == "<") op = CmpOp::Lt;
    else if (s == "<=") op = CmpOp::Le;
    if (op) next();
    return op;
  }

  Predicate predicate() {
    const Token& start = peek();
    Operand lhs = operand();
    if (is_ident("in")) {
      next();
      auto* f = std::get_if<FieldRef>(&lhs);
      if (!f) fail("membership test needs a field on the left", &start);
      return Membership{*f, ident()};
    }
    const Token& op_tok = peek();
    auto op = cmp();
    if (!op) fail("expected comparison operator", &op_tok);
    const Token& rhs_tok = peek();
    Operand rhs = operand();
    // A threshold compared against an aggregate must be a literal.
    auto named = [](const Operand& o) -> const FieldRef* { return std::get_if<FieldRef>(&o); };
    const FieldRef* l = named(lhs);
    const FieldRef* r = named(rhs);
    if (l && r) {
      bool l_agg = is_aggregate_name(l->name), r_agg = is_aggregate_name(r->name);
      bool l_field = find_field(l->name).has_value() || is_extension_name(l->name);
      bool r_field = find_field(r->name).has_value() || is_extension_name(r->name);
      if ((l_agg && !r_field && !r_agg) || (r_agg && !l_field && !l_agg))
        fail("non-numeric threshold", l_agg ? &rhs_tok : &start);
    }
    return Comparison{std::move(lhs), *op, std::move(rhs)};
  }

  std::vector<std::string> key_list() {
    expect_ident("key");
    expect("=");
    std::vector<std::string> keys;
    if (is_punct("(")) {
      next();
      while (!is_punct(")")) {
        if (!keys.empty()) expect(",");
        keys.push_back(ident());
      }
      expect(")");
    } else {
      keys.push_back(ident());
    }
    return keys;
  }

  OperatorNode parse_operator() {
    const Token& name_tok = peek();
    std::string name = ident();
    OperatorNode op;
    expect("(");
    if (name == "filter") {
      op.kind = OpKind::Filter;
      op.predicate = predicate();
    } else if (name == "map") {
      op.kind = OpKind::Map;
      Operand first = operand();
      if (is_punct("->")) {
        next();
        auto* f = std::get_if<FieldRef>(&first);
        if (!f || f->mask) fail("rewrite needs a plain field on the left", &name_tok);
        const Token& rt = peek();
        FieldRef target = field_ref();
        if (target.name != f->name || !target.mask) fail("rewrite must have the form f -> f/N", &rt);
        op.rewrite = target;
      } else {
        op.items.push_back(std::move(first));
        while (is_punct(",")) {
          next();
          op.items.push_back(operand());
        }
      }
    } else if (name == "distinct") {
      op.kind = OpKind::Distinct;
      op.keys = key_list();
    } else if (name == "reduce") {
      op.kind = OpKind::Reduce;
      op.keys = key_list();
      expect(",");
      expect_ident("func");
      expect("=");
      const Token& ft = peek();
      auto f = parse_func(ident());
      if (!f) fail("unknown reduce function", &ft);
      op.func = *f;
    } else if (name == "sample") {
      op.kind = OpKind::Sample;
      const Token& nt = peek();
      op.sample_rate = integer();
      if (op.sample_rate < 1) fail("sample rate must be at least 1", &nt);
    } else if (name == "join") {
      op.kind = OpKind::Join;
      op.target = ident();
    } else {
      fail("unknown operator '" + name + "'", &name_tok);
    }
    expect(")");
    return op;
  }

  std::vector<Token> toks_;
  std::size_t i_ = 0;
};

inline std::string format_number(double d) {
  std::string s = format_double(d);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

inline std::string format_window(double d) {
  if (d == static_cast<double>(static_cast<std::int64_t>(d))) return std::to_string(static_cast<std::int64_t>(d));
  return format_double(d);
}

inline std::string print_field(const FieldRef& f) {
  return f.mask ? f.name + "/" + std::to_string(*f.mask) : f.name;
}

inline std::string print_operand(const Operand& o) {
  if (auto* f = std::get_if<FieldRef>(&o)) return print_field(*f);
  const auto& lit = std::get<Literal>(o);
  if (lit.ipv4) return format_ipv4(static_cast<std::uint32_t>(std::get<std::int64_t>(lit.value)));
  if (auto* i = std::get_if<std::int64_t>(&lit.value)) return std::to_string(*i);
  if (auto* d = std::get_if<double>(&lit.value)) return format_number(*d);
  return "\"" + std::get<std::string>(lit.value) + "\"";
}

}  // namespace detail

// Parse a single query definition.
inline QueryAST parse_query(std::string_view text) { return detail::Parser(text).parse_one(); }

// Parse a query file holding one or more named queries.
inline std::vector<QueryAST> parse_query_file(std::string_view text) { return detail::Parser(text).parse_all(); }

inline std::string print_operator(const OperatorNode& op) {
  using detail::print_field;
  using detail::print_operand;
  std::string s = std::string(op_name(op.kind)) + "(";
  auto keys = [&] {
    if (op.keys.size() == 1) return op.keys[0];
    std::string k = "(";
    for (std::size_t i = 0; i < op.keys.size(); ++i) k += (i ? ", " : "") + op.keys[i];
    return k + ")";
  };
  switch (op.kind) {
    case OpKind::Filter:
      if (auto* c = std::get_if<Comparison>(&op.predicate)) {
        s += print_operand(c->lhs) + " " + std::string(cmp_text(c->op)) + " " + print_operand(c->rhs);
      } else {
        const auto& m = std::get<Membership>(op.predicate);
        s += print_field(m.field) + " in " + m.set;
      }
      break;
    case OpKind::Map:
      if (op.rewrite) {
        s += op.rewrite->name + " -> " + print_field(*op.rewrite);
      } else {
        for (std::size_t i = 0; i < op.items.size(); ++i) s += (i ? ", " : "") + print_operand(op.items[i]);
      }
      break;
    case OpKind::Distinct: s += "key=" + keys(); break;
    case OpKind::Reduce: s += "key=" + keys() + ", func=" + std::string(func_name(op.func)); break;
    case OpKind::Sample: s += std::to_string(op.sample_rate); break;
    case OpKind::Join: s += op.target; break;
  }
  return s + ")";
}

// Canonical text form; parse(print(q)) == q.
inline std::string print_query(const QueryAST& q) {
  std::string s = q.name + " = pktStream(" + detail::format_window(q.window) + ")";
  for (const auto& op : q.operators) s += "\n    ." + print_operator(op);
  std::vector<std::string> opts;
  if (q.d_max) opts.push_back("dmax=" + detail::format_number(*q.d_max));
  if (q.error_tolerance) opts.push_back("err=" + detail::format_number(*q.error_tolerance));
  if (!q.levels.empty()) {
    std::string l = "levels=(";
    for (std::size_t i = 0; i < q.levels.size(); ++i) l += (i ? ", " : "") + std::to_string(q.levels[i]);
    opts.push_back(l + ")");
  }
  if (!opts.empty()) {
    s += "\n    [";
    for (std::size_t i = 0; i < opts.size(); ++i) s += (i ? ", " : "") + opts[i];
    s += "]";
  }
  return s + "\n";
}

}  // namespace sonata
