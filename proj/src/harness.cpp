#include "pg/harness.hpp"

#include "pg/bundle.hpp"
#include "pg/error.hpp"
#include "pg/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace pg {

namespace fs = std::filesystem;
using json = nlohmann::json;
using taskgen::ExampleSet;
using taskgen::Split;
using taskgen::Suite;

namespace {

struct MethodName {
    Method method;
    const char* name;
};

constexpr MethodName kMethodNames[] = {
    {Method::phatgoose, "phatgoose"},
    {Method::avg_act, "avg-act"},
    {Method::arrow, "arrow"},
    {Method::retrieval, "retrieval"},
    {Method::merged, "merged"},
    {Method::merged_param_avg, "merged-param-avg"},
    {Method::oracle, "oracle"},
    {Method::best_individual, "best-individual"},
    {Method::multitask, "multitask"},
    {Method::base, "base"},
    {Method::joint, "joint"},
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt17(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

bool has_bundle(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

void require(const fs::path& dir, const std::string& what, const std::string& step) {
    if (!has_bundle(dir)) {
        throw MissingArtifactError("missing " + what + " at '" + dir.string() + "'; run `phatgoose " + step + "` first");
    }
}

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

ExampleSet subset(const ExampleSet& set, const std::vector<std::size_t>& idx) {
    ExampleSet out;
    out.task_id = set.task_id;
    out.split = set.split;
    out.examples.reserve(idx.size());
    for (std::size_t i : idx) out.examples.push_back(set.examples[i]);
    return out;
}

// Evaluates `set` under `hooks`; with a trace, returns the set's routing distribution too.
double routed_accuracy(const Backbone& bb, const Router& router, const std::vector<const LoraExpert*>& experts,
                       const ExampleSet& set, ScoreNorm norm, RoutingTrace* trace) {
    HookMap hooks = routed_hooks(router, experts, trace);
    return accuracy_of(classify_set(bb, &hooks, set, norm), set);
}

void set_router_k(Router& router, std::size_t k) {
    if (k < 1 || k > router.expert_ids.size()) {
        throw ContractError("router k = " + std::to_string(k) + " is outside [1, " +
                            std::to_string(router.expert_ids.size()) + "]");
    }
    router.k = k;
    for (auto& s : router.sites) s.k = k;
}

Router load_router_for(const Workspace& ws, const Backbone& bb, const std::string& name, const std::string& step,
                       std::size_t k) {
    require(ws.router(name), name + " router", step);
    Router r = load_router(ws.router(name), bb);
    set_router_k(r, k);
    return r;
}

void check_pool(const Router& router, const std::vector<LoraExpert>& experts) {
    bool same = router.expert_ids.size() == experts.size();
    for (std::size_t i = 0; same && i < experts.size(); ++i) same = router.expert_ids[i] == experts[i].expert_id;
    if (!same) throw ArtifactError("router expert pool does not match the stored experts; rebuild the router");
}

json distribution_to_json(const RoutingDistribution& d) {
    return json{{"expert_ids", d.expert_ids}, {"site_ids", d.site_ids}, {"per_site", d.per_site},
                {"layer_ids", d.layer_ids},   {"per_layer", d.per_layer}};
}

RoutingDistribution distribution_from_json(const json& j) {
    RoutingDistribution d;
    d.expert_ids = j.at("expert_ids").get<std::vector<std::string>>();
    d.site_ids = j.at("site_ids").get<std::vector<std::string>>();
    d.per_site = j.at("per_site").get<std::vector<std::vector<double>>>();
    d.layer_ids = j.at("layer_ids").get<std::vector<std::string>>();
    d.per_layer = j.at("per_layer").get<std::vector<std::vector<double>>>();
    return d;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path.string() + "'");
    os << text;
    if (!os) throw IoError("write to '" + path.string() + "' failed");
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<EvalReport> in_method_order(const std::vector<EvalReport>& reports) {
    std::vector<EvalReport> out = reports;
    auto rank = [](const EvalReport& r) {
        const auto& order = method_order();
        const auto it = std::find(order.begin(), order.end(), parse_method(r.method));
        return static_cast<std::size_t>(it - order.begin());
    };
    std::stable_sort(out.begin(), out.end(), [&](const EvalReport& a, const EvalReport& b) { return rank(a) < rank(b); });
    return out;
}

}  // namespace

const char* method_name(Method m) {
    for (const auto& e : kMethodNames) {
        if (e.method == m) return e.name;
    }
    return "?";
}

Method parse_method(const std::string& s) {
    for (const auto& e : kMethodNames) {
        if (s == e.name) return e.method;
    }
    throw ConfigError("unknown method '" + s + "'");
}

const std::vector<Method>& method_order() {
    static const std::vector<Method> order = {Method::phatgoose, Method::avg_act,          Method::arrow,
                                              Method::retrieval, Method::merged,           Method::merged_param_avg,
                                              Method::oracle,    Method::best_individual,  Method::multitask,
                                              Method::base,      Method::joint};
    return order;
}

bool is_routed(Method m) {
    return m == Method::phatgoose || m == Method::avg_act || m == Method::arrow || m == Method::joint;
}

double EvalReport::at(const std::string& dataset) const {
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        if (datasets[i] == dataset) return accuracy[i];
    }
    throw ContractError("report '" + method + "' has no dataset '" + dataset + "'");
}

json report_to_json(const EvalReport& r, bool with_runtime) {
    json routing = json::object();
    for (const auto& [ds, dist] : r.routing) routing[ds] = distribution_to_json(dist);
    json j{{"method", r.method},     {"seed", r.seed},       {"datasets", r.datasets}, {"accuracy", r.accuracy},
           {"mean", r.mean},         {"routing", routing},   {"config", r.config}};
    if (with_runtime) j["runtime_seconds"] = r.runtime_seconds;
    return j;
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.datasets = j.at("datasets").get<std::vector<std::string>>();
    r.accuracy = j.at("accuracy").get<std::vector<double>>();
    r.mean = j.at("mean").get<double>();
    for (const auto& [ds, d] : j.at("routing").items()) r.routing[ds] = distribution_from_json(d);
    r.config = j.at("config").get<KeyValues>();
    if (j.contains("runtime_seconds")) r.runtime_seconds = j.at("runtime_seconds").get<double>();
    return r;
}

fs::path Workspace::merged(MergeMode mode) const {
    return root / "merged" / (mode == MergeMode::post_product ? "merged" : "merged-param-avg");
}

fs::path Workspace::report(Method m) const { return reports() / (std::string(method_name(m)) + ".json"); }

Suite require_suite(const Workspace& ws) {
    if (!fs::exists(ws.suite() / "suite.json")) {
        throw MissingArtifactError("missing task suite at '" + ws.suite().string() + "'; run `phatgoose gen-tasks` first");
    }
    return taskgen::load_suite(ws.suite());
}

Backbone require_backbone(const Workspace& ws) {
    require(ws.backbone(), "backbone", "pretrain");
    return load_backbone(ws.backbone());
}

std::vector<LoraExpert> require_experts(const Workspace& ws, const Suite& suite, const Backbone& backbone,
                                        bool need_gates) {
    std::vector<LoraExpert> out;
    for (const auto& id : held_in_ids(suite)) {
        require(ws.expert(id), "expert '" + id + "'", "train-expert");
        LoraExpert e = load_expert(ws.expert(id), backbone);
        if (need_gates && e.meta.gate_steps == 0) {
            throw MissingArtifactError("expert '" + id + "' has no trained gate; run `phatgoose train-gate` first");
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<LoraExpert> require_joint_experts(const Workspace& ws, const Suite& suite, const Backbone& backbone) {
    std::vector<LoraExpert> out;
    for (const auto& id : held_in_ids(suite)) {
        require(ws.joint_expert(id), "jointly trained expert '" + id + "'", "train-joint");
        out.push_back(load_expert(ws.joint_expert(id), backbone));
    }
    return out;
}

std::vector<std::string> held_in_ids(const Suite& suite) {
    std::vector<std::string> ids;
    for (const auto* t : suite.held_in()) ids.push_back(t->task_id);
    return ids;
}

std::vector<std::string> held_out_ids(const Suite& suite) {
    std::vector<std::string> ids;
    for (const auto* t : suite.held_out()) ids.push_back(t->task_id);
    return ids;
}

std::vector<const LoraExpert*> pointers(const std::vector<LoraExpert>& experts) {
    std::vector<const LoraExpert*> out;
    for (const auto& e : experts) out.push_back(&e);
    return out;
}

std::uint64_t expert_seed(std::uint64_t run_seed, const std::string& name) {
    return Rng(run_seed).split("expert").split(name).next_u64();
}

Suite step_gen_tasks(const RunConfig& cfg, const Workspace& ws) {
    Suite suite = taskgen::generate_suite(cfg.suite);
    taskgen::save_suite(suite, ws.suite());
    return suite;
}

PretrainReport step_pretrain(const RunConfig& cfg, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    Backbone bb = Backbone::build(cfg.backbone);
    const auto source = taskgen::PretrainSource::make(suite.config.vocab, cfg.seed);
    Rng held_rng = Rng(cfg.seed).split("pretrain-heldout");
    const SeqBatch heldout = source.batch(cfg.pretrain_heldout, held_rng);
    TrainConfig tc;
    tc.steps = cfg.pretrain_steps;
    tc.batch_size = cfg.pretrain_batch;
    tc.warmup_ratio = cfg.expert.warmup_ratio;
    tc.adamw = cfg.expert.adamw;
    const std::size_t batch = cfg.pretrain_batch;
    PretrainReport rep = pretrain_backbone(
        bb, [&](Rng& r) { return source.batch(batch, r); }, heldout, tc, Rng(cfg.seed).split("pretrain"));
    save_backbone(bb, ws.backbone());
    return rep;
}

std::map<std::string, TrainReport> step_train_experts(const RunConfig& cfg, const Workspace& ws,
                                                      const std::vector<std::string>& only) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    std::map<std::string, TrainReport> out;
    for (const auto& id : held_in_ids(suite)) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const std::uint64_t seed = expert_seed(cfg.seed, id);
        LoraExpert e = init_expert(bb, cfg.expert.rank, seed, id);
        out[id] = train_expert(bb, e, suite.examples(id, Split::train), suite.examples(id, Split::validation),
                               cfg.expert, seed);
        save_expert(e, bb.fingerprint(), ws.expert(id));
    }
    for (const auto& id : only) {
        if (!out.count(id)) throw ConfigError("'" + id + "' is not a held-in task");
    }
    return out;
}

std::map<std::string, TrainReport> step_train_gates(const RunConfig& cfg, const Workspace& ws,
                                                    const std::vector<std::string>& only) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    std::map<std::string, TrainReport> out;
    for (const auto& id : held_in_ids(suite)) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        require(ws.expert(id), "expert '" + id + "'", "train-expert");
        LoraExpert e = load_expert(ws.expert(id), bb);
        out[id] = train_gate(bb, e, suite.examples(id, Split::train), suite.examples(id, Split::validation),
                             cfg.expert, expert_seed(cfg.seed, id));
        save_expert(e, bb.fingerprint(), ws.expert(id));
    }
    for (const auto& id : only) {
        if (!out.count(id)) throw ConfigError("'" + id + "' is not a held-in task");
    }
    return out;
}

std::map<std::string, TrainReport> step_train_joint(const RunConfig& cfg, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    std::map<std::string, TrainReport> out;
    std::vector<LoraExpert> experts;
    for (const auto& id : held_in_ids(suite)) {
        const std::uint64_t seed = expert_seed(cfg.seed, id);
        LoraExpert e = init_expert(bb, cfg.expert.rank, seed, id);
        out[id] = train_joint(bb, e, suite.examples(id, Split::train), suite.examples(id, Split::validation),
                              cfg.expert, seed);
        save_expert(e, bb.fingerprint(), ws.joint_expert(id));
        experts.push_back(std::move(e));
    }
    save_router(build_phatgoose_router(bb, pointers(experts), cfg.k), ws.router("joint"));
    return out;
}

TrainReport step_train_multitask(const RunConfig& cfg, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    std::vector<const ExampleSet*> train, val;
    for (const auto& id : held_in_ids(suite)) {
        train.push_back(&suite.examples(id, Split::train));
        val.push_back(&suite.examples(id, Split::validation));
    }
    const std::uint64_t seed = expert_seed(cfg.seed, "multitask");
    LoraExpert e = init_expert(bb, cfg.expert.rank, seed, "multitask");
    const ScoreNorm norm = cfg.norm;
    TrainReport rep = train_multitask_reference(
        bb, e, train, val, cfg.expert, seed,
        [&](const HookMap& hooks, const ExampleSet& set) { return evaluate_accuracy(bb, &hooks, set, norm); });
    save_expert(e, bb.fingerprint(), ws.multitask());
    return rep;
}

Router step_build_router(const RunConfig& cfg, const Workspace& ws, RouterKind kind) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    const auto experts = require_experts(ws, suite, bb, kind == RouterKind::phatgoose);
    Router router;
    switch (kind) {
        case RouterKind::phatgoose: router = build_phatgoose_router(bb, pointers(experts), cfg.k); break;
        case RouterKind::arrow: router = build_arrow_router(bb, pointers(experts), cfg.k); break;
        case RouterKind::avg_act: {
            std::vector<ActivationStats> stats;
            for (const auto& e : experts) {
                stats.push_back(collect_activation_stats(bb, e, suite.examples(e.expert_id, Split::train),
                                                         cfg.avg_act_cap, cfg.seed));
            }
            std::vector<const ActivationStats*> ptrs;
            for (const auto& s : stats) ptrs.push_back(&s);
            router = build_average_activation_router(bb, ptrs, cfg.k);
            break;
        }
    }
    save_router(router, ws.router(router_kind_name(kind)));
    return router;
}

EmbeddingIndex step_build_index(const RunConfig& cfg, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    const auto ids = held_in_ids(suite);
    std::vector<const ExampleSet*> sets;
    for (const auto& id : ids) sets.push_back(&suite.examples(id, Split::train));
    EmbeddingIndex index = build_index(bb, ids, sets, cfg.index_cap, cfg.seed);
    save_index(index, ws.index());
    return index;
}

void step_merge(const RunConfig&, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    const auto experts = require_experts(ws, suite, bb, false);
    for (MergeMode mode : {MergeMode::post_product, MergeMode::parameter_average}) {
        save_merged(merge_experts(pointers(experts), mode), bb.fingerprint(), ws.merged(mode));
    }
}

ScoreTable step_score_experts(const RunConfig& cfg, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    const auto experts = require_experts(ws, suite, bb, false);
    ScoreTable table;
    table.datasets = held_out_ids(suite);
    for (const auto& e : experts) {
        table.expert_ids.push_back(e.expert_id);
        const HookMap hooks = lora_hooks(e);
        std::vector<double> row;
        for (const auto& ds : table.datasets) {
            row.push_back(evaluate_accuracy(bb, &hooks, suite.examples(ds, Split::test), cfg.norm));
        }
        table.scores.push_back(std::move(row));
    }
    ArrayBundle b;
    b.kind = "expert-scores";
    b.meta = json{{"expert_ids", table.expert_ids},
                  {"datasets", table.datasets},
                  {"backbone_fingerprint", bb.fingerprint()}};
    Tensor t({table.expert_ids.size(), table.datasets.size()});
    for (std::size_t z = 0; z < table.scores.size(); ++z) {
        for (std::size_t d = 0; d < table.datasets.size(); ++d) t[z * table.datasets.size() + d] = table.scores[z][d];
    }
    b.arrays.emplace_back("scores", std::move(t));
    write_bundle(ws.scores(), b);
    return table;
}

ScoreTable require_scores(const Workspace& ws) {
    require(ws.scores(), "expert score table", "score-experts");
    const ArrayBundle b = read_bundle(ws.scores(), "expert-scores");
    ScoreTable table;
    table.expert_ids = b.meta.at("expert_ids").get<std::vector<std::string>>();
    table.datasets = b.meta.at("datasets").get<std::vector<std::string>>();
    const Tensor& t = b.array("scores");
    if (t.shape() != std::vector<std::size_t>{table.expert_ids.size(), table.datasets.size()}) {
        throw ArtifactError("expert score table shape disagrees with its metadata");
    }
    for (std::size_t z = 0; z < table.expert_ids.size(); ++z) {
        table.scores.emplace_back(t.data().begin() + static_cast<std::ptrdiff_t>(z * table.datasets.size()),
                                  t.data().begin() + static_cast<std::ptrdiff_t>((z + 1) * table.datasets.size()));
    }
    return table;
}

EvalReport evaluate_method(const RunConfig& cfg, const Workspace& ws, Method method) {
    const auto t0 = std::chrono::steady_clock::now();
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    EvalReport report;
    report.method = method_name(method);
    report.seed = cfg.seed;
    report.datasets = held_out_ids(suite);
    report.config = config_snapshot(cfg);

    auto test = [&](const std::string& ds) -> const ExampleSet& { return suite.examples(ds, Split::test); };

    switch (method) {
        case Method::phatgoose:
        case Method::avg_act:
        case Method::arrow:
        case Method::joint: {
            std::vector<LoraExpert> experts;
            Router router;
            if (method == Method::joint) {
                experts = require_joint_experts(ws, suite, bb);
                router = load_router_for(ws, bb, "joint", "train-joint", cfg.k);
            } else {
                const RouterKind kind = method == Method::phatgoose ? RouterKind::phatgoose
                                        : method == Method::avg_act ? RouterKind::avg_act
                                                                    : RouterKind::arrow;
                experts = require_experts(ws, suite, bb, false);
                router = load_router_for(ws, bb, router_kind_name(kind),
                                         std::string("build-router --kind ") + router_kind_name(kind), cfg.k);
            }
            check_pool(router, experts);
            const auto ptrs = pointers(experts);
            for (const auto& ds : report.datasets) {
                RoutingTrace trace;
                report.accuracy.push_back(routed_accuracy(bb, router, ptrs, test(ds), cfg.norm, &trace));
                report.routing[ds] = routing_distribution(trace, router.expert_ids);
            }
            break;
        }
        case Method::retrieval: {
            const auto experts = require_experts(ws, suite, bb, false);
            require(ws.index(), "retrieval index", "build-index");
            const EmbeddingIndex index = load_index(ws.index(), bb);
            if (index.expert_ids != held_in_ids(suite)) {
                throw ArtifactError("retrieval index expert pool does not match the suite; rebuild the index");
            }
            for (const auto& ds : report.datasets) {
                const ExampleSet& set = test(ds);
                std::vector<std::vector<std::size_t>> groups(experts.size());
                constexpr std::size_t chunk = 64;
                for (std::size_t b = 0; b < set.examples.size(); b += chunk) {
                    const std::size_t e = std::min(set.examples.size(), b + chunk);
                    const Tensor emb = embed_inputs(bb, taskgen::batch_of(set, b, e));
                    const std::size_t d = emb.dim(1);
                    for (std::size_t i = b; i < e; ++i) {
                        const auto row = emb.data().subspan((i - b) * d, d);
                        groups[retrieval_route(index, row)].push_back(i);
                    }
                }
                std::size_t correct = 0;
                for (std::size_t z = 0; z < experts.size(); ++z) {
                    if (groups[z].empty()) continue;
                    const ExampleSet part = subset(set, groups[z]);
                    const HookMap hooks = lora_hooks(experts[z]);
                    const auto pred = classify_set(bb, &hooks, part, cfg.norm);
                    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == part.examples[i].answer;
                }
                report.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(set.examples.size()));
            }
            break;
        }
        case Method::merged:
        case Method::merged_param_avg: {
            const MergeMode mode = method == Method::merged ? MergeMode::post_product : MergeMode::parameter_average;
            require(ws.merged(mode), std::string(method_name(method)) + " expert", "merge");
            const MergedExpert merged = load_merged(ws.merged(mode), bb);
            const HookMap hooks = merged_hooks(merged);
            for (const auto& ds : report.datasets) report.accuracy.push_back(evaluate_accuracy(bb, &hooks, test(ds), cfg.norm));
            break;
        }
        case Method::oracle:
        case Method::best_individual: {
            const ScoreTable table = require_scores(ws);
            if (table.datasets != report.datasets) throw ArtifactError("expert score table covers different datasets");
            const std::size_t best = method == Method::best_individual ? best_individual(table.scores) : 0;
            for (std::size_t d = 0; d < table.datasets.size(); ++d) {
                std::size_t z = best;
                if (method == Method::oracle) {
                    std::vector<double> column;
                    for (const auto& row : table.scores) column.push_back(row[d]);
                    z = oracle_route(column);
                }
                report.accuracy.push_back(table.scores[z][d]);
            }
            break;
        }
        case Method::multitask: {
            require(ws.multitask(), "multitask reference expert", "train-multitask");
            const LoraExpert e = load_expert(ws.multitask(), bb);
            const HookMap hooks = lora_hooks(e);
            for (const auto& ds : report.datasets) report.accuracy.push_back(evaluate_accuracy(bb, &hooks, test(ds), cfg.norm));
            break;
        }
        case Method::base:
            for (const auto& ds : report.datasets) report.accuracy.push_back(evaluate_accuracy(bb, nullptr, test(ds), cfg.norm));
            break;
    }
    report.mean = mean_of(report.accuracy);
    report.runtime_seconds = seconds_since(t0);
    return report;
}

double HeldInRecovery::max_accuracy_gap() const {
    double gap = 0.0;
    for (std::size_t i = 0; i < routed_accuracy.size(); ++i) gap = std::max(gap, expert_accuracy[i] - routed_accuracy[i]);
    return gap;
}

HeldInRecovery held_in_recovery(const RunConfig& cfg, const Workspace& ws) {
    const Suite suite = require_suite(ws);
    const Backbone bb = require_backbone(ws);
    const auto experts = require_experts(ws, suite, bb, false);
    const Router router = load_router_for(ws, bb, "phatgoose", "build-router --kind phatgoose", cfg.k);
    check_pool(router, experts);
    const auto ptrs = pointers(experts);

    HeldInRecovery out;
    out.datasets = held_in_ids(suite);
    for (const auto& s : router.sites) out.site_ids.push_back(s.site_id);
    std::vector<std::size_t> hits(out.site_ids.size(), 0), tokens(out.site_ids.size(), 0);
    for (std::size_t z = 0; z < out.datasets.size(); ++z) {
        const ExampleSet& set = suite.examples(out.datasets[z], Split::test);
        RoutingTrace trace;
        out.routed_accuracy.push_back(routed_accuracy(bb, router, ptrs, set, cfg.norm, &trace));
        const HookMap own = lora_hooks(experts[z]);
        out.expert_accuracy.push_back(evaluate_accuracy(bb, &own, set, cfg.norm));
        std::vector<double> row;
        for (std::size_t s = 0; s < out.site_ids.size(); ++s) {
            const SiteRoutingRecord* rec = trace.find(out.site_ids[s]);
            if (rec == nullptr || rec->top1.empty()) throw ContractError("no routing record for " + out.site_ids[s]);
            const auto n = static_cast<std::size_t>(std::count(rec->top1.begin(), rec->top1.end(), z));
            hits[s] += n;
            tokens[s] += rec->top1.size();
            row.push_back(static_cast<double>(n) / static_cast<double>(rec->top1.size()));
        }
        out.dataset_site_top1.push_back(std::move(row));
    }
    for (std::size_t s = 0; s < out.site_ids.size(); ++s) {
        out.site_top1.push_back(static_cast<double>(hits[s]) / static_cast<double>(tokens[s]));
        if (out.site_top1.back() >= 0.8) ++out.sites_recovered;
    }
    return out;
}

KlAnalysis kl_vs_accuracy(const EvalReport& phatgoose, const ScoreTable& scores) {
    if (phatgoose.datasets != scores.datasets) throw ContractError("report and score table cover different datasets");
    KlAnalysis out;
    out.datasets = phatgoose.datasets;
    for (std::size_t d = 0; d < out.datasets.size(); ++d) {
        const auto it = phatgoose.routing.find(out.datasets[d]);
        if (it == phatgoose.routing.end()) {
            throw ContractError("report '" + phatgoose.method + "' has no routing distribution for " + out.datasets[d]);
        }
        const RoutingDistribution& p = it->second;
        if (p.expert_ids != scores.expert_ids) throw ContractError("routing and score table expert orders differ");
        std::vector<double> column;
        for (const auto& row : scores.scores) column.push_back(row[d]);
        const std::size_t z = oracle_route(column);
        out.oracle_expert.push_back(scores.expert_ids[z]);
        out.kl.push_back(kl_divergence(p, one_hot_distribution(p.site_ids, p.expert_ids, z)).aggregate);
        out.accuracy.push_back(phatgoose.accuracy[d]);
    }
    if (out.datasets.size() >= 3) out.pearson_r = pearson(out.kl, out.accuracy);
    return out;
}

json recovery_to_json(const HeldInRecovery& r) {
    return json{{"datasets", r.datasets},
                {"site_ids", r.site_ids},
                {"site_top1", r.site_top1},
                {"dataset_site_top1", r.dataset_site_top1},
                {"sites_recovered", r.sites_recovered},
                {"routing_ok", r.routing_ok()},
                {"routed_accuracy", r.routed_accuracy},
                {"expert_accuracy", r.expert_accuracy},
                {"max_accuracy_gap", r.max_accuracy_gap()}};
}

json kl_to_json(const KlAnalysis& k) {
    return json{{"datasets", k.datasets},
                {"oracle_expert", k.oracle_expert},
                {"kl", k.kl},
                {"accuracy", k.accuracy},
                {"pearson_r", k.pearson_r ? json(*k.pearson_r) : json(nullptr)}};
}

ReportFormat parse_report_format(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    throw ConfigError("unknown report format '" + s + "' (expected csv or json)");
}

void emit_report(const std::vector<EvalReport>& reports, ReportFormat format, const fs::path& out_dir) {
    if (reports.empty()) throw ContractError("emit_report needs at least one report");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
    const auto ordered = in_method_order(reports);
    const auto& datasets = ordered.front().datasets;
    for (const auto& r : ordered) {
        if (r.datasets != datasets) throw ContractError("reports cover different datasets");
    }

    if (format == ReportFormat::json) {
        json rows = json::array();
        json routing = json::object();
        for (const auto& r : ordered) {
            rows.push_back(json{{"method", r.method}, {"accuracy", r.accuracy}, {"mean", r.mean}});
            if (r.routing.empty()) continue;
            json per_ds = json::object();
            for (const auto& [ds, d] : r.routing) {
                per_ds[ds] = json{{"layer_ids", d.layer_ids}, {"expert_ids", d.expert_ids}, {"per_layer", d.per_layer}};
            }
            routing[r.method] = per_ds;
        }
        const json doc{{"datasets", datasets}, {"methods", rows}, {"routing", routing}};
        write_text(out_dir / "comparison.json", doc.dump(2) + "\n");
        return;
    }

    std::string table = "method";
    for (const auto& ds : datasets) table += "," + csv_escape(ds);
    table += ",mean\n";
    for (const auto& r : ordered) {
        table += csv_escape(r.method);
        for (double a : r.accuracy) table += "," + fmt17(a);
        table += "," + fmt17(r.mean) + "\n";
    }
    write_text(out_dir / "comparison.csv", table);

    for (const auto& r : ordered) {
        for (const auto& [ds, d] : r.routing) {
            std::string m = "layer";
            for (const auto& e : d.expert_ids) m += "," + csv_escape(e);
            m += "\n";
            for (std::size_t l = 0; l < d.layer_ids.size(); ++l) {
                m += csv_escape(d.layer_ids[l]);
                for (double p : d.per_layer[l]) m += "," + fmt17(p);
                m += "\n";
            }
            write_text(out_dir / ("routing_" + r.method + "_" + ds + ".csv"), m);
        }
    }
}

std::vector<std::pair<std::string, std::vector<double>>> read_comparison_csv(const fs::path& path,
                                                                          std::vector<std::string>* header) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("cannot read '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw ArtifactError("'" + path.string() + "' is empty");
    if (header) *header = split_csv_line(line);
    std::vector<std::pair<std::string, std::vector<double>>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        std::vector<double> values;
        for (std::size_t i = 1; i < cells.size(); ++i) values.push_back(std::stod(cells[i]));
        rows.emplace_back(cells.front(), std::move(values));
    }
    return rows;
}

void save_report(const EvalReport& r, const fs::path& path) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
    write_text(path, report_to_json(r, false).dump(2) + "\n");
}

EvalReport load_report(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("no report at '" + path.string() + "'");
    try {
        return report_from_json(json::parse(is));
    } catch (const json::exception& e) {
        throw ArtifactError("malformed report '" + path.string() + "': " + e.what());
    }
}

const EvalReport& PipelineResult::report(Method m) const {
    for (const auto& r : reports) {
        if (r.method == method_name(m)) return r;
    }
    throw ContractError(std::string("pipeline produced no '") + method_name(m) + "' report");
}

PipelineResult run_pipeline(const RunConfig& cfg, const Workspace& ws) {
    const auto t0 = std::chrono::steady_clock::now();
    json timings = json::object();
    auto timed = [&](const std::string& name, auto&& fn) {
        const auto s = std::chrono::steady_clock::now();
        fn();
        timings[name] = seconds_since(s);
    };

    PipelineResult out;
    timed("gen-tasks", [&] { step_gen_tasks(cfg, ws); });
    timed("pretrain", [&] { step_pretrain(cfg, ws); });
    timed("train-expert", [&] { step_train_experts(cfg, ws); });
    timed("score-experts", [&] { out.scores = step_score_experts(cfg, ws); });
    timed("train-gate", [&] { step_train_gates(cfg, ws); });
    for (RouterKind kind : {RouterKind::phatgoose, RouterKind::avg_act, RouterKind::arrow}) {
        timed(std::string("build-router-") + router_kind_name(kind), [&] { step_build_router(cfg, ws, kind); });
    }
    timed("build-index", [&] { step_build_index(cfg, ws); });
    timed("merge", [&] { step_merge(cfg, ws); });
    if (cfg.multitask) timed("train-multitask", [&] { step_train_multitask(cfg, ws); });
    if (cfg.joint) timed("train-joint", [&] { step_train_joint(cfg, ws); });

    for (Method m : method_order()) {
        if (m == Method::multitask && !cfg.multitask) continue;
        if (m == Method::joint && !cfg.joint) continue;
        EvalReport r = evaluate_method(cfg, ws, m);
        timings[std::string("evaluate-") + r.method] = r.runtime_seconds;
        save_report(r, ws.report(m));
        out.reports.push_back(std::move(r));
    }
    timed("held-in-recovery", [&] { out.recovery = held_in_recovery(cfg, ws); });
    out.kl = kl_vs_accuracy(out.report(Method::phatgoose), out.scores);

    emit_report(out.reports, ReportFormat::csv, ws.reports());
    emit_report(out.reports, ReportFormat::json, ws.reports());
    write_text(ws.reports() / "held_in_recovery.json", recovery_to_json(out.recovery).dump(2) + "\n");
    write_text(ws.reports() / "kl_vs_accuracy.json", kl_to_json(out.kl).dump(2) + "\n");
    write_text(ws.reports() / "config.txt", format_key_values(config_snapshot(cfg)));
    out.wall_seconds = seconds_since(t0);
    timings["total"] = out.wall_seconds;
    write_text(ws.root / "timings.json", timings.dump(2) + "\n");
    return out;
}

}  // namespace pg
