#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace pg {

// Counter-based generator: draw i of a stream is a pure function of (key, i).
// Streams are split by name, so adding draws to one stream never shifts another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5eed5eed5eed5eedULL)) {}

    [[nodiscard]] Rng split(std::string_view name) const;
    [[nodiscard]] Rng split(std::uint64_t index) const;

    std::uint64_t next_u64() { return mix(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL); }

    // Uniform in [0, 1), 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n) by rejection, n > 0.
    std::size_t below(std::size_t n);

    // Standard normal via Box-Muller (one pair of uniforms per draw).
    double normal();

    [[nodiscard]] std::uint64_t key() const { return key_; }
    [[nodiscard]] std::uint64_t counter() const { return counter_; }

    static std::uint64_t mix(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    Rng(std::uint64_t key, int) : key_(key) {}

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// Fisher-Yates with the given stream.
template <typename Vec>
void shuffle(Vec& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.below(i);
        using std::swap;
        swap(v[i - 1], v[j]);
    }
}

}  // namespace pg
