// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cfd {

/// Error categories. The numeric value doubles as the CLI exit code.
enum class ErrorCode : int {
  kShape = 2,
  kValue = 3,
  kGraph = 4,
  kDomain = 5,
  kCheckpoint = 6,
  kConfig = 7,
  kIo = 8,
  kDivergence = 9,
  kData = 10,
  kNondeterministic = 11,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCode::kShape, "shape error: " + w) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& w) : Error(ErrorCode::kValue, "value error: " + w) {}
};
struct GraphError : Error {
  explicit GraphError(const std::string& w) : Error(ErrorCode::kGraph, "graph error: " + w) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error(ErrorCode::kDomain, "domain error: " + w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCode::kConfig, "config error: " + w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCode::kIo, "io error: " + w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorCode::kData, "data error: " + w) {}
};

struct CheckpointError : Error {
  enum class Reason { kVersion, kDigest, kTruncated, kMalformed };
  CheckpointError(Reason r, const std::string& w)
      : Error(ErrorCode::kCheckpoint, "checkpoint error: " + w), reason(r) {}
  Reason reason;
};

struct DivergenceError : Error {
  DivergenceError(long step, const std::string& w)
      : Error(ErrorCode::kDivergence, "divergence at step " + std::to_string(step) + ": " + w),
        step(step) {}
  long step;
};

}  // namespace cfd
