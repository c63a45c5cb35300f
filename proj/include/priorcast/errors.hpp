#pragma once

#include <stdexcept>
#include <string>

namespace priorcast {

// Thrown by feature selection when a sampled graph has too few non-root
// nodes; the episode sampler catches it and regenerates a larger DAG.
struct ResampleGraph : std::runtime_error {
  explicit ResampleGraph(const std::string& what) : std::runtime_error(what) {}
};

// Metric denominators that are identically zero; callers skip the series
// and record the reason instead of folding a fake zero into aggregates.
struct UndefinedDenominator : std::runtime_error {
  explicit UndefinedDenominator(const std::string& what)
      : std::runtime_error(what) {}
};

// Input data violates its declared schema (missing columns, bad policies).
struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

// Input data is malformed (unparseable rows, duplicate timestamps).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace priorcast
