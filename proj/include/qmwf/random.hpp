#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace qmwf {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Named random stream derived from a root seed ("init", "shuffle", "sampling", ...).
inline std::mt19937_64 substream(std::uint64_t root, std::string_view name) {
    std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return std::mt19937_64(splitmix64(root ^ splitmix64(h)));
}

}  // namespace qmwf
