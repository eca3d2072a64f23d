#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace pg {

using TokenSeq = std::vector<std::int32_t>;

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;

// Padded encoder/decoder batch. Row-major [size x len] id grids; masks are 1 on
// real tokens and 0 on the padded tail. The decoder input is BOS followed by
// the target shifted right (teacher forcing).
struct SeqBatch {
    std::size_t size = 0;
    std::size_t enc_len = 0;
    std::size_t dec_len = 0;
    std::vector<std::int32_t> enc_ids;
    std::vector<std::uint8_t> enc_mask;
    std::vector<std::int32_t> dec_ids;
    std::vector<std::int32_t> dec_targets;
    std::vector<std::uint8_t> dec_mask;
};

struct SeqPair {
    std::span<const std::int32_t> input;
    std::span<const std::int32_t> target;
};

SeqBatch make_batch(std::span<const SeqPair> pairs);

}  // namespace pg
