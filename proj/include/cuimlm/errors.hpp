#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cuimlm {

/// Malformed input file (lexicon, corpus, vocab, tagged corpus, config).
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& reason, const std::string& source = {})
      : std::runtime_error(format(line, reason, source)), line_(line), reason_(reason) {}

  /// 1-based line number, 0 when the error is not tied to a line.
  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  static std::string format(std::size_t line, const std::string& reason, const std::string& source) {
    std::string out = source;
    if (line != 0) out += (out.empty() ? "line " : ":") + std::to_string(line);
    if (!out.empty()) out += ": ";
    return out + reason;
  }

  std::size_t line_;
  std::string reason_;
};

/// Input that is well-formed but violates a precondition (unknown word, bad id...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes passed to a primitive.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or failed numerical self-check.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::size_t step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cuimlm
