#pragma once

#include "pg/analysis.hpp"
#include "pg/backbone.hpp"
#include "pg/baselines.hpp"
#include "pg/config.hpp"
#include "pg/experts.hpp"
#include "pg/routing.hpp"
#include "pg/taskgen.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pg {

enum class Method {
    phatgoose,
    avg_act,
    arrow,
    retrieval,
    merged,
    merged_param_avg,
    oracle,
    best_individual,
    multitask,
    base,
    joint,
};

const char* method_name(Method m);
Method parse_method(const std::string& s);
// Fixed row order of every comparison table.
const std::vector<Method>& method_order();
bool is_routed(Method m);

struct EvalReport {
    std::string method;
    std::uint64_t seed = 0;
    std::vector<std::string> datasets;
    std::vector<double> accuracy;  // aligned with datasets
    double mean = 0.0;
    std::map<std::string, RoutingDistribution> routing;  // per dataset; routed methods only
    double runtime_seconds = 0.0;
    KeyValues config;

    [[nodiscard]] double at(const std::string& dataset) const;
};

nlohmann::json report_to_json(const EvalReport& r, bool with_runtime = true);
EvalReport report_from_json(const nlohmann::json& j);

// Directory layout of one run's artifacts.
struct Workspace {
    std::filesystem::path root;

    [[nodiscard]] std::filesystem::path suite() const { return root / "suite"; }
    [[nodiscard]] std::filesystem::path backbone() const { return root / "backbone"; }
    [[nodiscard]] std::filesystem::path expert(const std::string& id) const { return root / "experts" / id; }
    [[nodiscard]] std::filesystem::path joint_expert(const std::string& id) const { return root / "joint" / id; }
    [[nodiscard]] std::filesystem::path multitask() const { return root / "multitask"; }
    [[nodiscard]] std::filesystem::path router(const std::string& name) const { return root / "routers" / name; }
    [[nodiscard]] std::filesystem::path index() const { return root / "index"; }
    [[nodiscard]] std::filesystem::path merged(MergeMode mode) const;
    [[nodiscard]] std::filesystem::path scores() const { return root / "scores"; }
    [[nodiscard]] std::filesystem::path reports() const { return root / "reports"; }
    [[nodiscard]] std::filesystem::path report(Method m) const;
};

// Loaders that turn a missing artifact into a MissingArtifactError naming the
// subcommand that produces it.
taskgen::Suite require_suite(const Workspace& ws);
Backbone require_backbone(const Workspace& ws);
std::vector<LoraExpert> require_experts(const Workspace& ws, const taskgen::Suite& suite, const Backbone& backbone,
                                        bool need_gates);
std::vector<LoraExpert> require_joint_experts(const Workspace& ws, const taskgen::Suite& suite,
                                              const Backbone& backbone);

std::vector<std::string> held_in_ids(const taskgen::Suite& suite);
std::vector<std::string> held_out_ids(const taskgen::Suite& suite);
std::vector<const LoraExpert*> pointers(const std::vector<LoraExpert>& experts);

// Seed of the named per-expert stream.
std::uint64_t expert_seed(std::uint64_t run_seed, const std::string& name);

// ---- build steps (each persists its artifacts under the workspace) ----

taskgen::Suite step_gen_tasks(const RunConfig& cfg, const Workspace& ws);
PretrainReport step_pretrain(const RunConfig& cfg, const Workspace& ws);
// Empty `only` trains every held-in task.
std::map<std::string, TrainReport> step_train_experts(const RunConfig& cfg, const Workspace& ws,
                                                      const std::vector<std::string>& only = {});
std::map<std::string, TrainReport> step_train_gates(const RunConfig& cfg, const Workspace& ws,
                                                    const std::vector<std::string>& only = {});
// Trains jointly gated experts and writes their router ("routers/joint").
std::map<std::string, TrainReport> step_train_joint(const RunConfig& cfg, const Workspace& ws);
TrainReport step_train_multitask(const RunConfig& cfg, const Workspace& ws);
Router step_build_router(const RunConfig& cfg, const Workspace& ws, RouterKind kind);
EmbeddingIndex step_build_index(const RunConfig& cfg, const Workspace& ws);
void step_merge(const RunConfig& cfg, const Workspace& ws);

// Test accuracy of every expert's plain LoRA on every held-out dataset.
struct ScoreTable {
    std::vector<std::string> expert_ids;
    std::vector<std::string> datasets;
    std::vector<std::vector<double>> scores;  // [expert][dataset]
};
ScoreTable step_score_experts(const RunConfig& cfg, const Workspace& ws);
ScoreTable require_scores(const Workspace& ws);

// Held-out test accuracy of one method. Routed methods also return per-dataset
// routing distributions.
EvalReport evaluate_method(const RunConfig& cfg, const Workspace& ws, Method method);

// ---- routing analysis ----

struct HeldInRecovery {
    std::vector<std::string> datasets;
    std::vector<std::string> site_ids;
    // Fraction of held-in test tokens whose top-1 expert is their own task's expert.
    std::vector<double> site_top1;                      // pooled over datasets, per site
    std::vector<std::vector<double>> dataset_site_top1;  // [dataset][site]
    std::size_t sites_recovered = 0;                     // sites with site_top1 >= 0.8
    std::vector<double> routed_accuracy;                 // PHATGOOSE (k from config)
    std::vector<double> expert_accuracy;                 // each dataset's own expert

    [[nodiscard]] bool routing_ok() const { return 2 * sites_recovered > site_ids.size(); }
    [[nodiscard]] double max_accuracy_gap() const;
};

HeldInRecovery held_in_recovery(const RunConfig& cfg, const Workspace& ws);

struct KlAnalysis {
    std::vector<std::string> datasets;
    std::vector<std::string> oracle_expert;  // per dataset
    std::vector<double> kl;                  // aggregate KL(PHATGOOSE || one-hot oracle)
    std::vector<double> accuracy;            // PHATGOOSE accuracy
    std::optional<double> pearson_r;
};

KlAnalysis kl_vs_accuracy(const EvalReport& phatgoose, const ScoreTable& scores);

nlohmann::json recovery_to_json(const HeldInRecovery& r);
nlohmann::json kl_to_json(const KlAnalysis& k);

// ---- reports ----

enum class ReportFormat { csv, json };
ReportFormat parse_report_format(const std::string& s);

// Writes the comparison table (rows in method order, columns = datasets + mean)
// and per-layer routing matrices into `out_dir`.
void emit_report(const std::vector<EvalReport>& reports, ReportFormat format, const std::filesystem::path& out_dir);

// Parses a comparison.csv back into (method, values) rows.
std::vector<std::pair<std::string, std::vector<double>>> read_comparison_csv(const std::filesystem::path& path,
                                                                          std::vector<std::string>* header = nullptr);

void save_report(const EvalReport& r, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

// ---- end to end ----

struct PipelineResult {
    std::vector<EvalReport> reports;  // method order
    HeldInRecovery recovery;
    KlAnalysis kl;
    ScoreTable scores;
    double wall_seconds = 0.0;

    [[nodiscard]] const EvalReport& report(Method m) const;
};

// Every build step, every method, the analysis, and the reports under ws.reports().
// Step timings go to ws.root/timings.json so reports stay reproducible.
PipelineResult run_pipeline(const RunConfig& cfg, const Workspace& ws);

}  // namespace pg
