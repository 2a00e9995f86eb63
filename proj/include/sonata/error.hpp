#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sonata {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text. `line` is 1-based; `column` is 1-based or 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column = 0)
      : Error(format(what, line, column)), line_(line), column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  static std::string format(const std::string& what, std::size_t line, std::size_t column) {
    std::string out = "line " + std::to_string(line);
    if (column != 0) out += ", column " + std::to_string(column);
    return out + ": " + what;
  }

  std::size_t line_;
  std::size_t column_;
};

class OrderingError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

// No plan satisfies the system constraints. `binding` names the violated constraint.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, std::string binding)
      : Error(what), binding_(std::move(binding)) {}

  const std::string& binding() const noexcept { return binding_; }

 private:
  std::string binding_;
};

}  // namespace sonata
