#pragma once

#include "pg/backbone.hpp"
#include "pg/experts.hpp"
#include "pg/routing.hpp"
#include "pg/taskgen.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace pg {

// ---- Average Activation ----

struct ActivationStats {
    std::string expert_id;
    std::map<std::string, std::vector<double>> mean;  // site -> mean input activation
    std::size_t samples = 0;                           // examples averaged
};

// Mean site inputs over min(cap, |train|) examples drawn with `seed`, with the
// expert's plain LoRA attached (the model the expert's users would run).
ActivationStats collect_activation_stats(const Backbone& backbone, const LoraExpert& expert,
                                         const taskgen::ExampleSet& train, std::size_t cap, std::uint64_t seed);

SiteRouter average_activation_router(const std::vector<const ActivationStats*>& stats, const std::string& site_id,
                                     std::size_t k);
Router build_average_activation_router(const Backbone& backbone, const std::vector<const ActivationStats*>& stats,
                                       std::size_t k);

// ---- Arrow ----

struct PowerIterationResult {
    std::vector<double> vector;  // unit norm
    double singular_value = 0.0;
    long iterations = 0;
};

// Top right singular vector of B A by power iteration on (BA)^T (BA). Throws
// NumericError if the update is zero or the iterate does not settle.
PowerIterationResult top_right_singular_vector(const Tensor& B, const Tensor& A, double tol = 1e-10,
                                               long max_iters = 10000);

SiteRouter arrow_router(const std::vector<const LoraExpert*>& experts, const std::string& site_id, std::size_t k);
Router build_arrow_router(const Backbone& backbone, const std::vector<const LoraExpert*>& experts, std::size_t k);

// ---- Retrieval ----

struct EmbeddingIndex {
    std::vector<std::string> expert_ids;
    std::string backbone_fingerprint;
    Tensor embeddings;                // [N x d_model]
    std::vector<std::size_t> owner;   // expert index of each row

    [[nodiscard]] std::size_t size() const { return owner.size(); }
};

// Mean-pooled final encoder states of the frozen backbone, one row per batch entry.
Tensor embed_inputs(const Backbone& backbone, const SeqBatch& batch);

// Stores min(cap, |train|) random examples per expert (drawn with `seed`).
EmbeddingIndex build_index(const Backbone& backbone, const std::vector<std::string>& expert_ids,
                           const std::vector<const taskgen::ExampleSet*>& train_sets, std::size_t cap,
                           std::uint64_t seed);

// Expert index of the stored example with the highest cosine similarity (ties to
// the earlier row). Throws DomainError on a zero-norm query or stored row.
std::size_t retrieval_route(const EmbeddingIndex& index, std::span<const double> query);

// ---- Merging ----

enum class MergeMode {
    post_product,       // mean of B_z A_z
    parameter_average,  // (mean B_z)(mean A_z)
};

struct MergedExpert {
    std::string name;
    std::vector<std::string> site_ids;
    std::vector<Tensor> deltas;  // dense [d x n] per site

    [[nodiscard]] const Tensor& at(const std::string& site_id) const;
};

MergedExpert merge_experts(const std::vector<const LoraExpert*>& experts, MergeMode mode = MergeMode::post_product);

// Wu + D u at every merged site.
HookMap merged_hooks(const MergedExpert& merged);

// ---- Oracle / Best Individual ----

// Argmax with ties to the lowest index. Throws ContractError when empty.
std::size_t oracle_route(std::span<const double> scores);

// scores[expert][dataset]; argmax of per-expert means, ties to the lowest index.
std::size_t best_individual(const std::vector<std::vector<double>>& scores);

}  // namespace pg
