#pragma once

#include <stdexcept>
#include <string>

namespace mhaff {

enum class ErrorKind {
  dimension,
  usage,
  config,
  wiring,
  fusion,
  indexing,
  evaluation,
  checkpoint,
  training,
  numeric,
  io,
};

const char* to_string(ErrorKind kind);

// Base exception. Every error raised by the library carries a kind so the CLI
// can emit a machine-readable line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MHAFF_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MHAFF_DEFINE_ERROR(DimensionError, dimension)
MHAFF_DEFINE_ERROR(UsageError, usage)
MHAFF_DEFINE_ERROR(ConfigError, config)
MHAFF_DEFINE_ERROR(WiringError, wiring)
MHAFF_DEFINE_ERROR(FusionError, fusion)
MHAFF_DEFINE_ERROR(IndexingError, indexing)
MHAFF_DEFINE_ERROR(EvaluationError, evaluation)
MHAFF_DEFINE_ERROR(TrainingError, training)
MHAFF_DEFINE_ERROR(NumericError, numeric)
MHAFF_DEFINE_ERROR(IoError, io)

#undef MHAFF_DEFINE_ERROR

enum class CheckpointFault {
  bad_magic,
  version_mismatch,
  truncated,
  manifest_overflow,
  manifest_overlap,
  malformed_header,
  missing_tensor,
  shape_mismatch,
};

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointFault fault, const std::string& what)
      : Error(ErrorKind::checkpoint, what), fault_(fault) {}
  CheckpointFault fault() const noexcept { return fault_; }

 private:
  CheckpointFault fault_;
};

}  // namespace mhaff
