#pragma once

#include "pg/batch.hpp"
#include "pg/optim.hpp"
#include "pg/rng.hpp"
#include "pg/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pg {

struct BackboneConfig {
    std::size_t vocab_size = 64;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t n_encoder_layers = 2;
    std::size_t n_decoder_layers = 2;
    std::size_t max_seq_len = 24;
    std::uint64_t seed = 1;

    // Throws ConfigError on zero extents or d_model not divisible by n_heads.
    void validate() const;
};

// One linear map of the backbone that can host expert modules: y = W u with
// W stored as [d x n] (d outputs, n inputs).
struct ModuleSite {
    std::string site_id;
    Tensor W;
    std::size_t n = 0;
    std::size_t d = 0;
};

// What a hook sees besides its input: which site it is attached to and which
// input rows are real tokens (padding rows have mask 0).
struct SiteContext {
    const ModuleSite& site;
    std::size_t site_index;
    std::span<const std::uint8_t> token_mask;
};

// Replaces a site's output. `base` is W u, already computed.
using SiteHook = std::function<Var(const SiteContext& ctx, Var input, Var base)>;
using HookMap = std::map<std::string, SiteHook>;

// Site input activations u_t for real (unmasked) tokens, in batch-major order.
struct ActivationTrace {
    std::vector<std::string> site_ids;
    std::vector<Tensor> inputs;                          // per traced site: [tokens x n]
    std::vector<std::vector<std::size_t>> example_index;  // per traced site: batch row of each token

    [[nodiscard]] const Tensor& at(const std::string& site_id) const;
};

struct ForwardOptions {
    const HookMap* hooks = nullptr;
    bool trace = false;
    std::vector<std::string> trace_sites;  // empty = all sites
};

struct ForwardResult {
    Var logits;       // [batch*dec_len x vocab]
    Var encoder_out;  // [batch*enc_len x d_model]
    std::optional<ActivationTrace> trace;
};

class Backbone {
public:
    // Deterministic initialization from config.seed.
    static Backbone build(const BackboneConfig& cfg);

    [[nodiscard]] const BackboneConfig& config() const { return cfg_; }
    [[nodiscard]] const std::vector<ModuleSite>& sites() const { return sites_; }
    [[nodiscard]] const ModuleSite& site(const std::string& site_id) const;
    [[nodiscard]] std::size_t site_index(const std::string& site_id) const;
    [[nodiscard]] bool has_site(const std::string& site_id) const;

    // Every parameter (sites and non-site tensors) under a stable name, in a fixed order.
    [[nodiscard]] std::vector<std::pair<std::string, Tensor*>> parameters();
    [[nodiscard]] std::vector<std::pair<std::string, const Tensor*>> parameters() const;

    void set_trainable(bool on);
    [[nodiscard]] bool trainable() const { return trainable_; }

    // Hash of config and parameter bytes; identifies the backbone in bundles.
    [[nodiscard]] std::string fingerprint() const;

    // Binds parameters as constants; hooks may still carry trainable tensors.
    ForwardResult forward(Tape& tape, const SeqBatch& batch, const ForwardOptions& opts = {}) const;
    // Binds parameters through Tape::param so pretraining receives gradients.
    ForwardResult forward_trainable(Tape& tape, const SeqBatch& batch, const ForwardOptions& opts = {});

private:
    struct Layer {
        std::vector<std::size_t> sites;  // indices into sites_
        std::vector<std::pair<Tensor, Tensor>> norms;  // (gamma, beta)
    };

    Backbone() = default;
    template <typename Bind>
    ForwardResult run(Tape& tape, const SeqBatch& batch, const ForwardOptions& opts, Bind bind) const;

    BackboneConfig cfg_;
    std::vector<ModuleSite> sites_;
    std::map<std::string, std::size_t> site_lookup_;
    Tensor tok_emb_, enc_pos_, dec_pos_, out_proj_;
    std::pair<Tensor, Tensor> enc_final_, dec_final_;
    std::vector<Layer> enc_layers_, dec_layers_;
    bool trainable_ = false;
};

// Teacher-forced mean token cross-entropy of a batch under a forward pass.
Var sequence_loss(const ForwardResult& fr, const SeqBatch& batch);

struct PretrainReport {
    double initial_heldout_loss = 0.0;
    double final_heldout_loss = 0.0;
    std::vector<double> loss_curve;
    long steps = 0;
};

struct TrainConfig {
    long steps = 300;
    std::size_t batch_size = 32;
    double warmup_ratio = 0.06;
    AdamWConfig adamw;
};

using BatchSource = std::function<SeqBatch(Rng&)>;

// Trains every backbone parameter on batches from `source`, then freezes the
// backbone. Held-out loss is measured on `heldout` before and after.
PretrainReport pretrain_backbone(Backbone& backbone, const BatchSource& source, const SeqBatch& heldout,
                                 const TrainConfig& cfg, Rng rng);

// Throws DimensionError if any id in the batch is outside the vocabulary or a
// sequence exceeds max_seq_len.
void check_batch(const Backbone& backbone, const SeqBatch& batch);

}  // namespace pg
