#pragma once

// The TOML subset used by config and trace-generator files: `[table]`,
// `[[array.of.tables]]`, `key = value` with integers, floats, booleans, basic strings
// and flat arrays of those, plus `#` comments.

#include <cctype>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sonata/error.hpp"

namespace sonata::toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<std::int64_t, double, bool, std::string, Array> v;
};

struct Table {
  std::map<std::string, Value, std::less<>> values;
  std::map<std::string, Table, std::less<>> tables;
  std::map<std::string, std::vector<Table>, std::less<>> arrays;
  std::map<std::string, std::size_t, std::less<>> lines;  // key -> line, for messages

  const Value* find(std::string_view key) const {
    auto it = values.find(key);
    return it == values.end() ? nullptr : &it->second;
  }
  const Table* table(std::string_view key) const {
    auto it = tables.find(key);
    return it == tables.end() ? nullptr : &it->second;
  }
  const std::vector<Table>* array(std::string_view key) const {
    auto it = arrays.find(key);
    return it == arrays.end() ? nullptr : &it->second;
  }

  std::size_t line_of(std::string_view key) const {
    auto it = lines.find(key);
    return it == lines.end() ? 0 : it->second;
  }

  double number(std::string_view key, double fallback) const {
    const Value* x = find(key);
    if (!x) return fallback;
    if (auto i = std::get_if<std::int64_t>(&x->v)) return static_cast<double>(*i);
    if (auto d = std::get_if<double>(&x->v)) return *d;
    throw ParseError("'" + std::string(key) + "' must be a number", line_of(key));
  }
  std::int64_t integer(std::string_view key, std::int64_t fallback) const {
    const Value* x = find(key);
    if (!x) return fallback;
    if (auto i = std::get_if<std::int64_t>(&x->v)) return *i;
    throw ParseError("'" + std::string(key) + "' must be an integer", line_of(key));
  }
  bool boolean(std::string_view key, bool fallback) const {
    const Value* x = find(key);
    if (!x) return fallback;
    if (auto b = std::get_if<bool>(&x->v)) return *b;
    throw ParseError("'" + std::string(key) + "' must be true or false", line_of(key));
  }
  std::optional<std::string> string(std::string_view key) const {
    const Value* x = find(key);
    if (!x) return std::nullopt;
    if (auto s = std::get_if<std::string>(&x->v)) return *s;
    throw ParseError("'" + std::string(key) + "' must be a string", line_of(key));
  }
  std::optional<std::vector<std::int64_t>> integers(std::string_view key) const {
    const Value* x = find(key);
    if (!x) return std::nullopt;
    auto a = std::get_if<Array>(&x->v);
    if (!a) throw ParseError("'" + std::string(key) + "' must be an array", line_of(key));
    std::vector<std::int64_t> out;
    for (const auto& e : *a) {
      auto i = std::get_if<std::int64_t>(&e.v);
      if (!i) throw ParseError("'" + std::string(key) + "' must hold integers", line_of(key));
      out.push_back(*i);
    }
    return out;
  }
};

namespace detail {

class Parser {
 public:
  Parser(std::string_view text) : text_(text) {}

  Table run() {
    Table root;
    Table* cur = &root;
    while (pos_ < text_.size()) {
      skip_blank();
      if (pos_ >= text_.size()) break;
      char c = text_[pos_];
      if (c == '\n') {
        next_line();
        continue;
      }
      if (c == '#') {
        skip_comment();
        continue;
      }
      if (c == '[') {
        bool array = pos_ + 1 < text_.size() && text_[pos_ + 1] == '[';
        pos_ += array ? 2 : 1;
        auto path = dotted_key();
        expect(']');
        if (array) expect(']');
        end_of_line();
        cur = &root;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) cur = &cur->tables[path[i]];
        if (array) {
          auto& list = cur->arrays[path.back()];
          list.emplace_back();
          cur = &list.back();
        } else {
          if (cur->tables.count(path.back())) fail("table '" + path.back() + "' defined twice");
          cur = &cur->tables[path.back()];
        }
        continue;
      }
      auto key = bare_key();
      skip_blank();
      expect('=');
      skip_blank();
      if (cur->values.count(key)) fail("duplicate key '" + key + "'");
      cur->lines[key] = line_;
      cur->values.emplace(key, value());
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(msg, line_, col()); }

  std::size_t col() const { return pos_ - line_start_ + 1; }

  void next_line() {
    ++pos_;
    ++line_;
    line_start_ = pos_;
  }

  void skip_blank() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) ++pos_;
  }

  void skip_comment() {
    while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
  }

  void expect(char c) {
    if (pos_ >= text_.size() || text_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void end_of_line() {
    skip_blank();
    if (pos_ < text_.size() && text_[pos_] == '#') skip_comment();
    if (pos_ < text_.size() && text_[pos_] != '\n') fail("unexpected text after value");
  }

  std::string bare_key() {
    std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_' ||
                                   text_[pos_] == '-'))
      ++pos_;
    if (pos_ == start) fail("expected a key");
    return std::string(text_.substr(start, pos_ - start));
  }

  std::vector<std::string> dotted_key() {
    std::vector<std::string> parts;
    for (;;) {
      skip_blank();
      parts.push_back(bare_key());
      skip_blank();
      if (pos_ < text_.size() && text_[pos_] == '.') {
        ++pos_;
        continue;
      }
      return parts;
    }
  }

  Value value() {
    if (pos_ >= text_.size()) fail("expected a value");
    char c = text_[pos_];
    if (c == '"') return Value{quoted()};
    if (c == '[') {
      ++pos_;
      Array a;
      for (;;) {
        skip_space_and_newlines();
        if (pos_ < text_.size() && text_[pos_] == ']') {
          ++pos_;
          return Value{std::move(a)};
        }
        Value e = value();
        if (std::holds_alternative<Array>(e.v)) fail("nested arrays are not supported");
        a.push_back(std::move(e));
        skip_space_and_newlines();
        if (pos_ < text_.size() && text_[pos_] == ',') {
          ++pos_;
          continue;
        }
        skip_space_and_newlines();
        expect(']');
        return Value{std::move(a)};
      }
    }
    std::size_t start = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) && text_[pos_] != ',' &&
           text_[pos_] != ']' && text_[pos_] != '#')
      ++pos_;
    std::string tok(text_.substr(start, pos_ - start));
    if (tok == "true") return Value{true};
    if (tok == "false") return Value{false};
    std::string digits;
    for (char ch : tok)
      if (ch != '_') digits.push_back(ch);
    try {
      std::size_t used = 0;
      bool is_float = digits.find_first_of(".eE") != std::string::npos;
      if (!is_float) {
        std::int64_t i = std::stoll(digits, &used);
        if (used == digits.size()) return Value{i};
      } else {
        double d = std::stod(digits, &used);
        if (used == digits.size()) return Value{d};
      }
    } catch (const std::exception&) {
    }
    pos_ = start;
    fail("bad value '" + tok + "'");
  }

  void skip_space_and_newlines() {
    for (;;) {
      skip_blank();
      if (pos_ < text_.size() && text_[pos_] == '#') skip_comment();
      if (pos_ < text_.size() && text_[pos_] == '\n') {
        next_line();
        continue;
      }
      return;
    }
  }

  std::string quoted() {
    ++pos_;
    std::string out;
    while (pos_ < text_.size() && text_[pos_] != '"') {
      char c = text_[pos_++];
      if (c == '\n') fail("unterminated string");
      if (c == '\\') {
        if (pos_ >= text_.size()) fail("unterminated string");
        char e = text_[pos_++];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          default: fail(std::string("unknown escape '\\") + e + "'");
        }
        continue;
      }
      out.push_back(c);
    }
    expect('"');
    return out;
  }

  std::string_view text_;
  std::size_t pos_ = 0, line_ = 1, line_start_ = 0;
};

}  // namespace detail

inline Table parse(std::string_view text) { return detail::Parser(text).run(); }

}  // namespace sonata::toml
