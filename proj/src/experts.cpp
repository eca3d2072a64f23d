#include "pg/experts.hpp"

#include "pg/error.hpp"

#include <chrono>
#include <cmath>

namespace pg {

bool LoraExpert::has_site(const std::string& site_id) const {
    for (const auto& s : sites) {
        if (s.site_id == site_id) return true;
    }
    return false;
}

const SiteLora& LoraExpert::at(const std::string& site_id) const {
    for (const auto& s : sites) {
        if (s.site_id == site_id) return s;
    }
    throw ContractError("expert '" + expert_id + "' has no entry for site '" + site_id + "'");
}

SiteLora& LoraExpert::at(const std::string& site_id) {
    return const_cast<SiteLora&>(std::as_const(*this).at(site_id));
}

std::size_t LoraExpert::rank() const { return sites.empty() ? 0 : sites.front().rank(); }

void LoraExpert::set_trainable(bool lora, bool gate) {
    for (auto& s : sites) {
        s.A.requires_grad = lora;
        s.B.requires_grad = lora;
        s.v.requires_grad = gate;
        s.A.zero_grad();
        s.B.zero_grad();
        s.v.zero_grad();
    }
}

void LoraExpert::validate(const Backbone& backbone) const {
    for (const auto& s : sites) {
        if (!backbone.has_site(s.site_id)) {
            throw ContractError("expert '" + expert_id + "': site '" + s.site_id + "' is not in the backbone");
        }
        const ModuleSite& ms = backbone.site(s.site_id);
        if (s.A.ndim() != 2 || s.B.ndim() != 2 || s.v.ndim() != 1) {
            throw ContractError("expert '" + expert_id + "': malformed arrays at '" + s.site_id + "'");
        }
        const std::size_t r = s.A.dim(0);
        if (r < 1 || r > std::min(ms.n, ms.d) || s.A.dim(1) != ms.n || s.B.dim(0) != ms.d || s.B.dim(1) != r ||
            s.v.dim(0) != ms.n) {
            throw ContractError("expert '" + expert_id + "': shapes at '" + s.site_id + "' (A " +
                                shape_str(s.A.shape()) + ", B " + shape_str(s.B.shape()) + ", v " +
                                shape_str(s.v.shape()) + ") do not fit site n=" + std::to_string(ms.n) +
                                " d=" + std::to_string(ms.d));
        }
    }
}

LoraExpert init_expert(const Backbone& backbone, std::size_t rank, std::uint64_t seed, std::string expert_id) {
    LoraExpert e;
    e.expert_id = std::move(expert_id);
    e.meta.seed = seed;
    Rng rng = Rng(seed).split("lora-init");
    for (const auto& ms : backbone.sites()) {
        if (rank < 1 || rank > std::min(ms.n, ms.d)) {
            throw ContractError("rank " + std::to_string(rank) + " is invalid for site '" + ms.site_id + "' (n=" +
                                std::to_string(ms.n) + ", d=" + std::to_string(ms.d) + ")");
        }
        SiteLora s;
        s.site_id = ms.site_id;
        s.A = Tensor({rank, ms.n});
        const double sd = 1.0 / std::sqrt(static_cast<double>(ms.n));
        for (auto& x : s.A.values()) x = sd * rng.normal();
        s.B = Tensor({ms.d, rank});
        s.v = Tensor({ms.n});
        e.sites.push_back(std::move(s));
    }
    return e;
}

namespace {

Var bind(Tape& tape, const Tensor& t) { return tape.param(const_cast<Tensor&>(t)); }

void check_width(const SiteContext& ctx, const SiteLora& lora) {
    if (ctx.site.n != lora.n() || ctx.site.d != lora.d()) {
        throw DimensionError("LoRA entry for '" + lora.site_id + "' does not fit site '" + ctx.site.site_id + "'");
    }
}

Var lora_delta(Tape& tape, const SiteLora& lora, Var u) {
    Var au = matmul_nt(u, bind(tape, lora.A));  // [T x r]
    return matmul_nt(au, bind(tape, lora.B));   // [T x d]
}

}  // namespace

SiteHook lora_forward_hook(const SiteLora& lora) {
    return [&lora](const SiteContext& ctx, Var u, Var base) {
        check_width(ctx, lora);
        return add(base, lora_delta(*u.tape, lora, u));
    };
}

SiteHook gated_forward_hook(const SiteLora& lora) {
    return [&lora](const SiteContext& ctx, Var u, Var base) {
        check_width(ctx, lora);
        Tape& tape = *u.tape;
        Var v = reshape(bind(tape, lora.v), {1, lora.n()});
        Var gate = sigmoid(matmul_nt(u, v));  // [T x 1]
        return add(base, mul(lora_delta(tape, lora, u), gate));
    };
}

HookMap lora_hooks(const LoraExpert& expert) {
    HookMap hooks;
    for (const auto& s : expert.sites) hooks[s.site_id] = lora_forward_hook(s);
    return hooks;
}

HookMap gated_hooks(const LoraExpert& expert) {
    HookMap hooks;
    for (const auto& s : expert.sites) hooks[s.site_id] = gated_forward_hook(s);
    return hooks;
}

double dataset_loss(const Backbone& backbone, const HookMap* hooks, const taskgen::ExampleSet& set,
                    std::size_t chunk) {
    if (set.examples.empty()) throw ContractError("dataset_loss: empty example set '" + set.task_id + "'");
    double total = 0.0;
    std::size_t tokens = 0;
    ForwardOptions opts;
    opts.hooks = hooks;
    for (std::size_t b = 0; b < set.examples.size(); b += chunk) {
        const std::size_t e = std::min(set.examples.size(), b + chunk);
        SeqBatch batch = taskgen::batch_of(set, b, e);
        Tape tape;
        auto fr = backbone.forward(tape, batch, opts);
        std::size_t n = 0;
        for (auto m : batch.dec_mask) n += m != 0;
        total += sequence_loss(fr, batch).value().item() * static_cast<double>(n);
        tokens += n;
    }
    return total / static_cast<double>(tokens);
}

namespace {

struct Snapshot {
    std::vector<std::vector<double>> values;

    static Snapshot of(const std::vector<Tensor*>& ts) {
        Snapshot s;
        for (const Tensor* t : ts) s.values.push_back(t->values());
        return s;
    }
    void restore(const std::vector<Tensor*>& ts) const {
        for (std::size_t i = 0; i < ts.size(); ++i) ts[i]->values() = values[i];
    }
};

enum class HookKind { plain, gated };

struct LoopSpec {
    HookKind hook = HookKind::plain;
    long steps = 0;
    bool select_checkpoint = true;
    std::vector<Tensor*> params;
    std::vector<Tensor*> gate_params;  // separate learning rate group (joint training)
    double gate_lr = 0.0;
    const char* phase = "expert";
};

TrainReport run_loop(const Backbone& backbone, const LoraExpert& expert, const taskgen::ExampleSet& train,
                     const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, const LoopSpec& spec,
                     Rng rng) {
    if (backbone.trainable()) throw ContractError(std::string(spec.phase) + " training requires a frozen backbone");
    if (spec.steps < 0) throw ConfigError("step count must be >= 0");
    if (train.examples.empty()) throw ContractError("training set '" + train.task_id + "' is empty");
    expert.validate(backbone);

    const auto t0 = std::chrono::steady_clock::now();
    const HookMap hooks = spec.hook == HookKind::plain ? lora_hooks(expert) : gated_hooks(expert);
    TrainReport report;

    std::vector<Tensor*> all = spec.params;
    all.insert(all.end(), spec.gate_params.begin(), spec.gate_params.end());
    AdamW opt(spec.params, cfg.adamw);
    AdamW gate_opt(spec.gate_params, cfg.adamw);

    double best = 0.0;
    Snapshot best_state;
    auto evaluate = [&](long step) {
        const double vl = dataset_loss(backbone, &hooks, validation);
        report.eval_steps.push_back(step);
        report.validation_losses.push_back(vl);
        if (report.eval_steps.size() == 1 || vl < best) {
            best = vl;
            report.selected_step = step;
            if (spec.select_checkpoint) best_state = Snapshot::of(all);
        }
    };

    const bool eval_inside = spec.select_checkpoint && cfg.eval_every > 0;
    evaluate(0);
    ForwardOptions opts;
    opts.hooks = &hooks;
    for (long step = 0; step < spec.steps; ++step) {
        SeqBatch batch = taskgen::sample_batch(train, cfg.batch_size, rng);
        Tape tape;
        auto fr = backbone.forward(tape, batch, opts);
        Var loss = sequence_loss(fr, batch);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) {
            throw NumericError(std::string(spec.phase) + " training of '" + expert.expert_id + "' diverged at step " +
                               std::to_string(step) + " (loss " + std::to_string(lv) + ")");
        }
        report.loss_curve.push_back(lv);
        tape.backward(loss);
        const double lr = scheduled_lr(cfg.adamw.lr, cfg.warmup_ratio, step, spec.steps);
        opt.step(lr);
        if (!spec.gate_params.empty()) gate_opt.step(scheduled_lr(spec.gate_lr, cfg.warmup_ratio, step, spec.steps));
        const long done = step + 1;
        if (eval_inside && (done % cfg.eval_every == 0 || done == spec.steps)) evaluate(done);
    }
    if (!spec.select_checkpoint) {
        if (spec.steps > 0) {
            report.eval_steps.push_back(spec.steps);
            report.validation_losses.push_back(dataset_loss(backbone, &hooks, validation));
        }
        report.selected_step = spec.steps;
        report.final_validation_loss = report.validation_losses.back();
    } else {
        best_state.restore(all);
        report.final_validation_loss = best;
    }
    for (Tensor* t : all) t->zero_grad();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

void stamp(LoraExpert& expert, const ExpertTrainConfig& cfg, std::uint64_t seed) {
    expert.meta.seed = seed;
    expert.meta.lr = cfg.adamw.lr;
    expert.meta.weight_decay = cfg.adamw.weight_decay;
    expert.meta.warmup_ratio = cfg.warmup_ratio;
    expert.meta.batch_size = cfg.batch_size;
}

}  // namespace

TrainReport train_expert(const Backbone& backbone, LoraExpert& expert, const taskgen::ExampleSet& train,
                         const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, std::uint64_t seed) {
    LoopSpec spec;
    spec.steps = cfg.steps;
    for (auto& s : expert.sites) {
        spec.params.push_back(&s.A);
        spec.params.push_back(&s.B);
    }
    expert.set_trainable(true, false);
    TrainReport report;
    try {
        report = run_loop(backbone, expert, train, validation, cfg, spec, Rng(seed).split("expert-train"));
    } catch (...) {
        expert.set_trainable(false, false);
        throw;
    }
    expert.set_trainable(false, false);
    stamp(expert, cfg, seed);
    expert.meta.task_id = train.task_id;
    expert.meta.training = "post-hoc";
    expert.meta.steps = cfg.steps;
    expert.meta.selected_step = report.selected_step;
    return report;
}

TrainReport train_gate(const Backbone& backbone, LoraExpert& expert, const taskgen::ExampleSet& train,
                       const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, std::uint64_t seed) {
    LoopSpec spec;
    spec.hook = HookKind::gated;
    spec.steps = cfg.gate_steps;
    spec.select_checkpoint = false;
    spec.phase = "gate";
    for (auto& s : expert.sites) spec.params.push_back(&s.v);
    expert.set_trainable(false, true);
    TrainReport report;
    try {
        report = run_loop(backbone, expert, train, validation, cfg, spec, Rng(seed).split("gate-train"));
    } catch (...) {
        expert.set_trainable(false, false);
        throw;
    }
    expert.set_trainable(false, false);
    expert.meta.gate_steps = cfg.gate_steps;
    return report;
}

TrainReport train_joint(const Backbone& backbone, LoraExpert& expert, const taskgen::ExampleSet& train,
                        const taskgen::ExampleSet& validation, const ExpertTrainConfig& cfg, std::uint64_t seed) {
    LoopSpec spec;
    spec.hook = HookKind::gated;
    spec.steps = cfg.steps;
    spec.phase = "joint";
    spec.gate_lr = cfg.joint_gate_lr < 0.0 ? cfg.adamw.lr : cfg.joint_gate_lr;
    for (auto& s : expert.sites) {
        spec.params.push_back(&s.A);
        spec.params.push_back(&s.B);
        spec.gate_params.push_back(&s.v);
    }
    expert.set_trainable(true, true);
    TrainReport report;
    try {
        report = run_loop(backbone, expert, train, validation, cfg, spec, Rng(seed).split("expert-train"));
    } catch (...) {
        expert.set_trainable(false, false);
        throw;
    }
    expert.set_trainable(false, false);
    stamp(expert, cfg, seed);
    expert.meta.task_id = train.task_id;
    expert.meta.training = "joint";
    expert.meta.steps = cfg.steps;
    expert.meta.gate_steps = cfg.steps;
    expert.meta.selected_step = report.selected_step;
    return report;
}

TrainReport train_multitask_reference(const Backbone& backbone, LoraExpert& expert,
                                      const std::vector<const taskgen::ExampleSet*>& train_sets,
                                      const std::vector<const taskgen::ExampleSet*>& validation_sets,
                                      const ExpertTrainConfig& cfg, std::uint64_t seed, const AccuracyFn& accuracy) {
    if (train_sets.empty() || train_sets.size() != validation_sets.size()) {
        throw ContractError("multitask training needs one validation set per training set");
    }
    auto concat = [](const std::vector<const taskgen::ExampleSet*>& sets) {
        taskgen::ExampleSet out;
        out.split = sets.front()->split;
        for (const auto* s : sets) {
            out.task_id += (out.task_id.empty() ? "" : "+") + s->task_id;
            out.examples.insert(out.examples.end(), s->examples.begin(), s->examples.end());
        }
        return out;
    };
    const taskgen::ExampleSet train = concat(train_sets);
    const taskgen::ExampleSet validation = concat(validation_sets);

    LoopSpec spec;
    spec.steps = cfg.multitask_steps;
    spec.phase = "multitask";
    for (auto& s : expert.sites) {
        spec.params.push_back(&s.A);
        spec.params.push_back(&s.B);
    }
    expert.set_trainable(true, false);
    TrainReport report;
    try {
        report = run_loop(backbone, expert, train, validation, cfg, spec, Rng(seed).split("expert-train"));
    } catch (...) {
        expert.set_trainable(false, false);
        throw;
    }
    expert.set_trainable(false, false);
    stamp(expert, cfg, seed);
    expert.meta.task_id = train.task_id;
    expert.meta.training = "multitask";
    expert.meta.steps = cfg.multitask_steps;
    expert.meta.selected_step = report.selected_step;

    if (accuracy) {
        const HookMap hooks = lora_hooks(expert);
        for (const auto* s : validation_sets) report.task_accuracy[s->task_id] = accuracy(hooks, *s);
    }
    return report;
}

}  // namespace pg
