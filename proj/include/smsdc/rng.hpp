#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace smsdc {

/// FNV-1a, used to derive stable per-module seed streams from a path string.
/// Stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Engine for a (global seed, module path) pair. Modules initialized from
/// separate streams stay byte-identical no matter what else is built around
/// them, which keeps isolated module tests and full-model runs consistent.
inline std::mt19937_64 seed_stream(std::uint64_t seed, std::string_view module_path) {
    return std::mt19937_64(seed ^ fnv1a64(module_path));
}

}  // namespace smsdc
