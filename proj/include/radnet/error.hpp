#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace radnet {

enum class Errc {
  dimension,
  domain,
  config,
  cache_consistency,
  input,
  sequence_length,
  format,
  truncation,
  shape_mismatch,
  unsupported_dtype,
  mapping,
  degenerate_input,
  lookup,
  provenance,
  divergence,
  attention_domain,
  numeric,
  io,
  usage,
};

constexpr std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::dimension: return "dimension";
    case Errc::domain: return "domain";
    case Errc::config: return "config";
    case Errc::cache_consistency: return "cache_consistency";
    case Errc::input: return "input";
    case Errc::sequence_length: return "sequence_length";
    case Errc::format: return "format";
    case Errc::truncation: return "truncation";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::unsupported_dtype: return "unsupported_dtype";
    case Errc::mapping: return "mapping";
    case Errc::degenerate_input: return "degenerate_input";
    case Errc::lookup: return "lookup";
    case Errc::provenance: return "provenance";
    case Errc::divergence: return "divergence";
    case Errc::attention_domain: return "attention_domain";
    case Errc::numeric: return "numeric";
    case Errc::io: return "io";
    case Errc::usage: return "usage";
  }
  return "unknown";
}

/// Single exception type for the library; `code()` tells callers which
/// failure class they hit.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }
  std::string_view kind() const noexcept { return errc_name(code_); }

 private:
  Errc code_;
};

}  // namespace radnet
