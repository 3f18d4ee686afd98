#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dnt {

enum class ErrorKind {
  invalid_shape,
  shape_mismatch,
  invalid_label,
  degenerate_batch,
  invalid_spec,
  invalid_tap,
  nothing_to_compress,
  invalid_plan,
  uninitialized_layer,
  registry_mismatch,
  invalid_metric,
  empty_batch,
  format,
  truncation,
  consistency,
  unfitted,
  corruption,
  version,
  schema,
  missing_artifact,
  incomplete_results,
  out_of_range,
  config_validation,
  data_not_found,
  io,
};

inline constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_shape: return "invalid-shape";
    case ErrorKind::shape_mismatch: return "shape-mismatch";
    case ErrorKind::invalid_label: return "invalid-label";
    case ErrorKind::degenerate_batch: return "degenerate-batch";
    case ErrorKind::invalid_spec: return "invalid-spec";
    case ErrorKind::invalid_tap: return "invalid-tap";
    case ErrorKind::nothing_to_compress: return "nothing-to-compress";
    case ErrorKind::invalid_plan: return "invalid-plan";
    case ErrorKind::uninitialized_layer: return "uninitialized-layer";
    case ErrorKind::registry_mismatch: return "registry-mismatch";
    case ErrorKind::invalid_metric: return "invalid-metric";
    case ErrorKind::empty_batch: return "empty-batch";
    case ErrorKind::format: return "format";
    case ErrorKind::truncation: return "truncation";
    case ErrorKind::consistency: return "consistency";
    case ErrorKind::unfitted: return "unfitted";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::version: return "version";
    case ErrorKind::schema: return "schema";
    case ErrorKind::missing_artifact: return "missing-artifact";
    case ErrorKind::incomplete_results: return "incomplete-results";
    case ErrorKind::out_of_range: return "out-of-range";
    case ErrorKind::config_validation: return "config-validation";
    case ErrorKind::data_not_found: return "data-not-found";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace dnt
