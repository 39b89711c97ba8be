#include "genplugin/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace genplugin {
namespace {
std::atomic<std::size_t> g_warnings{0};
std::atomic<bool> g_silenced{false};
std::atomic<bool> g_verbose{false};
std::mutex g_mutex;
}  // namespace

void warn(std::string_view message) {
    ++g_warnings;
    if (g_silenced) return;
    std::lock_guard lock(g_mutex);
    std::cerr << "warning: " << message << '\n';
}

std::size_t warning_count() { return g_warnings; }
void set_warnings_silenced(bool silenced) { g_silenced = silenced; }

void info(std::string_view message) {
    if (!g_verbose) return;
    std::lock_guard lock(g_mutex);
    std::cerr << message << '\n';
}

void set_verbose(bool verbose) { g_verbose = verbose; }

}  // namespace genplugin
