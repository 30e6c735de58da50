#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evalnorm {

/// Invalid shapes, ranges, or settings supplied by the caller.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value left the domain of a primitive (sqrt of a negative, NaN loss).
class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class EmptyBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyDatasetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed binary input; carries the byte offset where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  /// Same error, with a location prefix such as a file name.
  FormatError(const std::string& context, const FormatError& inner)
      : std::runtime_error(context + ": " + inner.what()), offset_(inner.offset_) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evalnorm
