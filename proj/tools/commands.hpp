#pragma once

#include <string>
#include <vector>

namespace dinocell::cli {

inline constexpr const char* kToolName = "dinocell";

std::string tool_version();

// Parses args (without the program name) and runs one subcommand.
// Returns 0 on success, 1 for user errors, 2 for internal errors.
int run(const std::vector<std::string>& args);

}  // namespace dinocell::cli
