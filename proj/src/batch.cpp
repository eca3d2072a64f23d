#include "pg/batch.hpp"

#include "pg/error.hpp"

#include <algorithm>

namespace pg {

SeqBatch make_batch(std::span<const SeqPair> pairs) {
    SeqBatch b;
    b.size = pairs.size();
    for (const auto& p : pairs) {
        if (p.input.empty() || p.target.empty()) throw ContractError("make_batch: empty input or target sequence");
        b.enc_len = std::max(b.enc_len, p.input.size());
        b.dec_len = std::max(b.dec_len, p.target.size());
    }
    b.enc_ids.assign(b.size * b.enc_len, kPad);
    b.enc_mask.assign(b.size * b.enc_len, 0);
    b.dec_ids.assign(b.size * b.dec_len, kPad);
    b.dec_targets.assign(b.size * b.dec_len, kPad);
    b.dec_mask.assign(b.size * b.dec_len, 0);
    for (std::size_t i = 0; i < b.size; ++i) {
        const auto& p = pairs[i];
        for (std::size_t t = 0; t < p.input.size(); ++t) {
            b.enc_ids[i * b.enc_len + t] = p.input[t];
            b.enc_mask[i * b.enc_len + t] = 1;
        }
        for (std::size_t t = 0; t < p.target.size(); ++t) {
            b.dec_ids[i * b.dec_len + t] = t == 0 ? kBos : p.target[t - 1];
            b.dec_targets[i * b.dec_len + t] = p.target[t];
            b.dec_mask[i * b.dec_len + t] = 1;
        }
    }
    return b;
}

}  // namespace pg
