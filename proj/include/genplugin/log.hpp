#pragma once

#include <cstddef>
#include <string_view>

namespace genplugin {

/// Writes a warning to stderr (unless silenced) and bumps a process-wide counter.
void warn(std::string_view message);
std::size_t warning_count();
void set_warnings_silenced(bool silenced);

void info(std::string_view message);
void set_verbose(bool verbose);

}  // namespace genplugin
