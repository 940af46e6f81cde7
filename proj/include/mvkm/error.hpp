#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mvkm {

enum class ErrorCode {
  kernel_view_mismatch,
  invalid_parameter,
  insufficient_data,
  invalid_genotype,
  missing_kernel,
  domain_error,
  dimension_mismatch,
  singular_design,
  no_convergence,
  separation,
  not_positive_definite,
  degenerate_distribution,
  invalid_roc,
  config_error,
  data_error,
  io_error,
  tuple_cap_exceeded,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// Message without the error-code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

inline std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kernel_view_mismatch: return "kernel-view-mismatch";
    case ErrorCode::invalid_parameter: return "invalid-parameter";
    case ErrorCode::insufficient_data: return "insufficient-data";
    case ErrorCode::invalid_genotype: return "invalid-genotype";
    case ErrorCode::missing_kernel: return "missing-kernel";
    case ErrorCode::domain_error: return "domain-error";
    case ErrorCode::dimension_mismatch: return "dimension-mismatch";
    case ErrorCode::singular_design: return "singular-design";
    case ErrorCode::no_convergence: return "no-convergence";
    case ErrorCode::separation: return "separation";
    case ErrorCode::not_positive_definite: return "not-positive-definite";
    case ErrorCode::degenerate_distribution: return "degenerate-distribution";
    case ErrorCode::invalid_roc: return "invalid-roc";
    case ErrorCode::config_error: return "config-error";
    case ErrorCode::data_error: return "data-error";
    case ErrorCode::io_error: return "io-error";
    case ErrorCode::tuple_cap_exceeded: return "tuple-cap-exceeded";
  }
  return "unknown";
}

}  // namespace mvkm
