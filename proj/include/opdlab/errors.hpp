#pragma once

#include <stdexcept>
#include <string>

namespace opdlab {

// Invalid configuration detected before any compute. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Failure during a run (non-finite values, I/O). Maps to CLI exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

// The exact oracle refused an instance whose support exceeds the enumeration cap.
class OracleCapError : public std::runtime_error {
 public:
  explicit OracleCapError(const std::string& what) : std::runtime_error(what) {}
};

enum class CacheErrorKind { kCorrupt, kVersionMismatch, kFingerprintMismatch };

class CacheError : public std::runtime_error {
 public:
  CacheError(CacheErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  CacheErrorKind kind() const { return kind_; }

 private:
  CacheErrorKind kind_;
};

}  // namespace opdlab
