// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace flythinker {

// Base for every error raised by the library. `kind()` is a stable,
// machine-parseable tag used by the CLI when reporting failures.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define FLYTHINKER_DEFINE_ERROR(Name, tag)                            \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& message) : Error(tag, message) {} \
  }

FLYTHINKER_DEFINE_ERROR(DimensionError, "dimension");
FLYTHINKER_DEFINE_ERROR(NonFiniteError, "non_finite");
FLYTHINKER_DEFINE_ERROR(EmptyLossError, "empty_loss");
FLYTHINKER_DEFINE_ERROR(StaleGraphError, "stale_graph");
FLYTHINKER_DEFINE_ERROR(VocabularyError, "vocabulary");
FLYTHINKER_DEFINE_ERROR(LengthError, "length");
FLYTHINKER_DEFINE_ERROR(CacheOverflowError, "cache_overflow");
FLYTHINKER_DEFINE_ERROR(FusionWidthError, "fusion_width");
FLYTHINKER_DEFINE_ERROR(BatchError, "batch");
FLYTHINKER_DEFINE_ERROR(ConfigError, "validation");
FLYTHINKER_DEFINE_ERROR(IoError, "io");
FLYTHINKER_DEFINE_ERROR(CorruptCheckpointError, "corrupt_checkpoint");
FLYTHINKER_DEFINE_ERROR(VersionMismatchError, "version_mismatch");
FLYTHINKER_DEFINE_ERROR(ConfigMismatchError, "config_mismatch");
FLYTHINKER_DEFINE_ERROR(DeadlockError, "deadlock");
FLYTHINKER_DEFINE_ERROR(WorkerError, "worker");
FLYTHINKER_DEFINE_ERROR(BenchAdvisoryError, "bench_advisory");
FLYTHINKER_DEFINE_ERROR(MetricError, "metric");

#undef FLYTHINKER_DEFINE_ERROR

}  // namespace flythinker
