#pragma once

#include "pg/backbone.hpp"
#include "pg/taskgen.hpp"
#include "pg/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pg {

// Low-rank update and gate for one site: delta(u) = B A u, gate sigma(v . u).
struct SiteLora {
    std::string site_id;
    Tensor A;  // [r x n]
    Tensor B;  // [d x r]
    Tensor v;  // [n]

    [[nodiscard]] std::size_t rank() const { return A.dim(0); }
    [[nodiscard]] std::size_t n() const { return A.dim(1); }
    [[nodiscard]] std::size_t d() const { return B.dim(0); }
};

struct ExpertMetadata {
    std::string task_id;
    std::string training = "post-hoc";  // post-hoc | joint | multitask
    long steps = 0;
    long gate_steps = 0;
    long selected_step = 0;
    std::uint64_t seed = 0;
    double lr = 0.0;
    double weight_decay = 0.0;
    double warmup_ratio = 0.0;
    std::size_t batch_size = 0;
};

struct LoraExpert {
    std::string expert_id;
    std::vector<SiteLora> sites;  // backbone site order
    ExpertMetadata meta;

    [[nodiscard]] bool has_site(const std::string& site_id) const;
    [[nodiscard]] const SiteLora& at(const std::string& site_id) const;
    SiteLora& at(const std::string& site_id);
    [[nodiscard]] std::size_t rank() const;

    // Sets requires_grad on the A/B pair and on v independently; clears grads.
    void set_trainable(bool lora, bool gate);

    // Throws ContractError unless every entry matches its backbone site and
    // 1 <= rank <= min(n, d).
    void validate(const Backbone& backbone) const;
};

// A ~ N(0, 1/n), B = 0, v = 0 at every backbone site.
LoraExpert init_expert(const Backbone& backbone, std::size_t rank, std::uint64_t seed, std::string expert_id);

// Wu + B(Au).
SiteHook lora_forward_hook(const SiteLora& lora);
// Wu + (BAu) * sigmoid(v . u).
SiteHook gated_forward_hook(const SiteLora& lora);

HookMap lora_hooks(const LoraExpert& expert);
HookMap gated_hooks(const LoraExpert& expert);

struct ExpertTrainConfig {
    std::size_t rank = 4;
    long steps = 300;
    long gate_steps = 100;
    long multitask_steps = 1000;
    std::size_t batch_size = 32;
    double warmup_ratio = 0.06;
    long eval_every = 50;
    AdamWConfig adamw;
    // Learning rate for v during joint training; negative means adamw.lr.
    double joint_gate_lr = -1.0;
};

struct TrainReport {
    std::vector<double> loss_curve;
    std::vector<long> eval_steps;
    std::vector<double> validation_losses;
    long selected_step = 0;
    double final_validation_loss = 0.0;
    double wall_seconds = 0.0;
    std::map<std::string, double> task_accuracy;  // filled by multitask training
};

// Mean teacher-forced token loss of an example set under the given hooks.
double dataset_loss(const Backbone& backbone, const HookMap* hooks, const taskgen::ExampleSet& set,
                    std::size_t chunk = 100);

// Trains A and B only (plain LoRA hook). The checkpoint with the lowest
// validation loss among evaluations every eval_every steps (and at step 0) is kept.
TrainReport train_expert(const Backbone& backbone, LoraExpert& expert, const taskgen::ExampleSet& train,
                         const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, std::uint64_t seed);

// Trains v only through the gated hook for cfg.gate_steps; A, B and the backbone stay frozen.
TrainReport train_gate(const Backbone& backbone, LoraExpert& expert, const taskgen::ExampleSet& train,
                       const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, std::uint64_t seed);

// Trains A, B and v together through the gated hook from a fresh expert.
TrainReport train_joint(const Backbone& backbone, LoraExpert& expert, const taskgen::ExampleSet& train,
                        const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, std::uint64_t seed);

// One plain LoRA trained on the union of all tasks' training sets with uniform
// example sampling, for cfg.multitask_steps. Fills per-task validation accuracy
// when `accuracy` is given.
using AccuracyFn = std::function<double(const HookMap&, const taskgen::ExampleSet&)>;
TrainReport train_multitask_reference(const Backbone& backbone, LoraExpert& expert,
                                      const std::vector<const taskgen::ExampleSet*>& train_sets,
                                      const std::vector<const taskgen::ExampleSet*>& validation_sets,
                                      const ExpertTrainConfig& cfg, std::uint64_t seed,
                                      const AccuracyFn& accuracy = {});

}  // namespace pg
