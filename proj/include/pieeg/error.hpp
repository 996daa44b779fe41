#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace pieeg {

// Base of every error raised by the library. `kind()` is a stable,
// machine-readable tag used by the service and the CLI exit-code map.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// Wire-level codec failures.
struct FramingError : Error {
  explicit FramingError(const std::string& w) : Error("framing", w) {}
};

struct EncodingError : Error {
  explicit EncodingError(const std::string& w) : Error("encoding", w) {}
};

class DesyncError : public Error {
 public:
  DesyncError(std::size_t offset, const std::string& w)
      : Error("desync", w), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error("domain", w) {}
};

// Simulated device / acquisition state machine.
struct StateError : Error {
  explicit StateError(const std::string& w) : Error("state", w) {}
};

struct BackendError : Error {
  explicit BackendError(const std::string& w) : Error("backend", w) {}
};

struct ConfigurationError : Error {
  explicit ConfigurationError(const std::string& w) : Error("configuration", w) {}
};

struct DesignError : Error {
  explicit DesignError(const std::string& w) : Error("design", w) {}
};

// Missing or malformed experiment markers.
struct ProtocolError : Error {
  explicit ProtocolError(const std::string& w) : Error("protocol", w) {}
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, std::string field, const std::string& w)
      : Error("parse", "line " + std::to_string(line) +
                           (field.empty() ? "" : ", field '" + field + "'") +
                           ": " + w),
        line_(line),
        field_(std::move(field)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

struct IngestionError : Error {
  explicit IngestionError(const std::string& w) : Error("ingestion", w) {}
};

}  // namespace pieeg
