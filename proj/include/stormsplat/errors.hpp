#pragma once

#include <stdexcept>
#include <string>

namespace stormsplat {

/// Malformed or inconsistent file contents. The message names the offending field.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& field, const std::string& detail)
      : std::runtime_error("format error in '" + field + "': " + detail), field_(field) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Arguments whose shapes or cardinalities do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on a value (not a shape) was violated.
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace stormsplat
