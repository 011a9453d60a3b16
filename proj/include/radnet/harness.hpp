#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace radnet {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kOutDirEnv = "RADNET_OUT_DIR";

/// Runs one CLI invocation (`args[0]` is the program name). Returns the exit
/// status; failures print a JSON error object on `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace radnet
