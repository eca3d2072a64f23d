#include "pg/rng.hpp"

#include <cmath>
#include <numbers>

namespace pg {

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Rng Rng::split(std::string_view name) const {
    return Rng(mix(key_ ^ mix(fnv1a(name))), 0);
}

Rng Rng::split(std::uint64_t index) const {
    return Rng(mix(key_ ^ mix(index + 0x632BE59BD9B4E019ULL)), 0);
}

std::size_t Rng::below(std::size_t n) {
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace pg
