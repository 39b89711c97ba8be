#pragma once

// Config-driven pipeline driver behind the `genplugin` executable.

#include <ostream>
#include <string>
#include <vector>

namespace genplugin::cli {

inline constexpr int kOk = 0;
inline constexpr int kUserError = 1;
inline constexpr int kInternalError = 2;

/// `args` excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace genplugin::cli
