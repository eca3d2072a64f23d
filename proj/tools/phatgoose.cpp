#include "pg/config.hpp"
#include "pg/error.hpp"
#include "pg/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace pg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitArtifact = 2;
constexpr int kExitNumeric = 3;

struct Globals {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir = "run";
    std::vector<std::string> overrides;
};

// Defaults, then the config file, then --seed and --set (later wins).
RunConfig resolve_config(const Globals& g) {
    RunConfig cfg;
    KeyValues kv;
    if (!g.config_path.empty()) kv = read_config_file(g.config_path);
    if (g.seed_set) kv["seed"] = std::to_string(g.seed);
    for (const auto& o : g.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
        kv[o.substr(0, eq)] = o.substr(eq + 1);
    }
    apply_config(cfg, kv);
    return cfg;
}

void print_train(const std::string& id, const TrainReport& r) {
    std::printf("%-12s selected step %ld  validation loss %.6f  (%.1fs)\n", id.c_str(), r.selected_step,
                r.final_validation_loss, r.wall_seconds);
}

void print_report(const EvalReport& r) {
    std::printf("%-17s", r.method.c_str());
    for (std::size_t i = 0; i < r.datasets.size(); ++i) std::printf("  %s %.4f", r.datasets[i].c_str(), r.accuracy[i]);
    std::printf("  mean %.4f\n", r.mean);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write '" + path.string() + "'");
    os << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Post-hoc gated LoRA routing (PHATGOOSE) on a synthetic multitask suite"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_path, "key = value config file")->check(CLI::ExistingFile);
    app.add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { g.seed = s; g.seed_set = true; }, "run seed (overrides the config file)");
    app.add_option("--out-dir", g.out_dir, "artifact directory")->capture_default_str();
    app.add_option("--set", g.overrides, "override one config key (key=value); repeatable");

    auto* gen = app.add_subcommand("gen-tasks", "generate and save the task suite");
    auto* pre = app.add_subcommand("pretrain", "pretrain the backbone on the task-agnostic mixture");
    std::vector<std::string> expert_tasks, gate_tasks;
    auto* texp = app.add_subcommand("train-expert", "train one LoRA expert per held-in task");
    texp->add_option("--task", expert_tasks, "only these tasks");
    auto* tgate = app.add_subcommand("train-gate", "train the post-hoc gate of each expert");
    tgate->add_option("--task", gate_tasks, "only these tasks");
    auto* tjoint = app.add_subcommand("train-joint", "train experts with gates from the start (ablation)");
    auto* tmulti = app.add_subcommand("train-multitask", "train the multitask reference LoRA");
    std::string kind = "phatgoose";
    auto* brouter = app.add_subcommand("build-router", "build a token router");
    brouter->add_option("--kind", kind, "phatgoose | avg-act | arrow")
        ->check(CLI::IsMember({"phatgoose", "avg-act", "arrow"}))
        ->capture_default_str();
    auto* bindex = app.add_subcommand("build-index", "build the retrieval index");
    auto* merge = app.add_subcommand("merge", "merge experts (post-product and parameter average)");
    auto* score = app.add_subcommand("score-experts", "held-out accuracy of every expert (oracle / best individual)");
    std::vector<std::string> methods;
    auto* eval = app.add_subcommand("evaluate", "evaluate methods on the held-out tasks");
    eval->add_option("--method", methods, "method name(s) or 'all'")->required();
    auto* analyze = app.add_subcommand("analyze-routing", "held-in routing recovery and KL vs accuracy");
    std::string format = "csv", report_out;
    auto* report = app.add_subcommand("report", "write the comparison table and routing matrices");
    report->add_option("--format", format, "csv | json")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
    report->add_option("--out", report_out, "output directory (default: <out-dir>/reports)");
    auto* run = app.add_subcommand("run", "every step end to end");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        const RunConfig cfg = resolve_config(g);
        const Workspace ws{g.out_dir};

        if (gen->parsed()) {
            const auto suite = step_gen_tasks(cfg, ws);
            std::printf("wrote %zu tasks to %s\n", suite.tasks.size(), ws.suite().c_str());
        } else if (pre->parsed()) {
            const auto r = step_pretrain(cfg, ws);
            std::printf("pretrained %ld steps: held-out loss %.4f -> %.4f\n", r.steps, r.initial_heldout_loss,
                        r.final_heldout_loss);
        } else if (texp->parsed()) {
            for (const auto& [id, r] : step_train_experts(cfg, ws, expert_tasks)) print_train(id, r);
        } else if (tgate->parsed()) {
            for (const auto& [id, r] : step_train_gates(cfg, ws, gate_tasks)) print_train(id, r);
        } else if (tjoint->parsed()) {
            for (const auto& [id, r] : step_train_joint(cfg, ws)) print_train(id, r);
        } else if (tmulti->parsed()) {
            const auto r = step_train_multitask(cfg, ws);
            print_train("multitask", r);
            for (const auto& [task, acc] : r.task_accuracy) std::printf("  %-12s validation accuracy %.4f\n", task.c_str(), acc);
        } else if (brouter->parsed()) {
            const Router r = step_build_router(cfg, ws, parse_router_kind(kind));
            std::printf("%s router: %zu sites, %zu experts, k = %zu\n", kind.c_str(), r.sites.size(),
                        r.expert_ids.size(), r.k);
        } else if (bindex->parsed()) {
            const auto idx = step_build_index(cfg, ws);
            std::printf("retrieval index: %zu examples\n", idx.size());
        } else if (merge->parsed()) {
            step_merge(cfg, ws);
            std::printf("merged experts written under %s\n", (ws.root / "merged").c_str());
        } else if (score->parsed()) {
            const auto t = step_score_experts(cfg, ws);
            for (std::size_t z = 0; z < t.expert_ids.size(); ++z) {
                std::printf("%-12s", t.expert_ids[z].c_str());
                for (double s : t.scores[z]) std::printf(" %.4f", s);
                std::printf("\n");
            }
        } else if (eval->parsed()) {
            std::vector<Method> list;
            for (const auto& m : methods) {
                if (m == "all") {
                    list = method_order();
                    break;
                }
                list.push_back(parse_method(m));
            }
            for (Method m : list) {
                const EvalReport r = evaluate_method(cfg, ws, m);
                save_report(r, ws.report(m));
                print_report(r);
            }
        } else if (analyze->parsed()) {
            const HeldInRecovery rec = held_in_recovery(cfg, ws);
            write_json(ws.reports() / "held_in_recovery.json", recovery_to_json(rec));
            std::printf("held-in routing: %zu of %zu sites route >= 80%% of tokens to the true expert\n",
                        rec.sites_recovered, rec.site_ids.size());
            for (std::size_t i = 0; i < rec.datasets.size(); ++i) {
                std::printf("  %-12s routed %.4f  own expert %.4f\n", rec.datasets[i].c_str(), rec.routed_accuracy[i],
                            rec.expert_accuracy[i]);
            }
            const KlAnalysis kl = kl_vs_accuracy(load_report(ws.report(Method::phatgoose)), require_scores(ws));
            write_json(ws.reports() / "kl_vs_accuracy.json", kl_to_json(kl));
            for (std::size_t i = 0; i < kl.datasets.size(); ++i) {
                std::printf("  %-12s KL to oracle (%s) %.4f  accuracy %.4f\n", kl.datasets[i].c_str(),
                            kl.oracle_expert[i].c_str(), kl.kl[i], kl.accuracy[i]);
            }
            if (kl.pearson_r) {
                std::printf("pearson r (KL vs accuracy): %.4f\n", *kl.pearson_r);
            } else {
                std::printf("pearson r (KL vs accuracy): undefined\n");
            }
        } else if (report->parsed()) {
            std::vector<EvalReport> reports;
            for (Method m : method_order()) {
                if (fs::exists(ws.report(m))) reports.push_back(load_report(ws.report(m)));
            }
            if (reports.empty()) {
                throw MissingArtifactError("no reports under '" + ws.reports().string() + "'; run `phatgoose evaluate` first");
            }
            const fs::path out = report_out.empty() ? ws.reports() : fs::path(report_out);
            emit_report(reports, parse_report_format(format), out);
            for (const auto& r : reports) print_report(r);
        } else if (run->parsed()) {
            const PipelineResult res = run_pipeline(cfg, ws);
            for (const auto& r : res.reports) print_report(r);
            std::printf("held-in routing: %zu of %zu sites recovered; max accuracy gap %.4f\n",
                        res.recovery.sites_recovered, res.recovery.site_ids.size(), res.recovery.max_accuracy_gap());
            std::printf("total %.1fs\n", res.wall_seconds);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ArtifactError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArtifact;
    }
    return kExitOk;
}
