#pragma once

#include "pg/backbone.hpp"
#include "pg/experts.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace pg {

inline constexpr double kStdEps = 1e-8;

// (x - mean) / max(population std, 1e-8). Throws DimensionError for n < 2.
std::vector<double> standardize(std::span<const double> x);

enum class Scoring {
    standardized,  // alpha = standardize(v) . standardize(u)
    absolute_raw,  // alpha = |v . u| (Arrow)
};

struct SiteRouter {
    std::string site_id;
    std::vector<std::string> expert_ids;
    Tensor gates;  // [Z x n]; rows already standardized for Scoring::standardized
    std::size_t n = 0;
    std::size_t k = 1;
    Scoring scoring = Scoring::standardized;

    [[nodiscard]] std::size_t pool_size() const { return expert_ids.size(); }
};

struct RouterDecision {
    std::vector<double> alpha;          // one affinity per expert
    std::vector<std::size_t> selected;  // expert indices, best first
    std::vector<double> weights;        // aligned with selected
};

// Builds a router from raw gate rows. Standardized scoring standardizes each row.
SiteRouter make_site_router(std::string site_id, std::vector<std::string> expert_ids,
                            const std::vector<std::vector<double>>& rows, std::size_t k,
                            Scoring scoring = Scoring::standardized);

// Router over the experts' gate vectors v at one site.
SiteRouter build_router(const std::vector<const LoraExpert*>& experts, const std::string& site_id, std::size_t k);

std::vector<double> affinities(const SiteRouter& router, std::span<const double> u);
RouterDecision route_token(const SiteRouter& router, std::span<const double> u);
// Softmax of alpha / sqrt(n) over the whole pool; analysis only.
std::vector<double> full_routing_probabilities(const SiteRouter& router, std::span<const double> u);

// Top-k indices of `scores`, largest first, ties to the lower index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

enum class RouterKind { phatgoose, avg_act, arrow };

const char* router_kind_name(RouterKind k);
RouterKind parse_router_kind(const std::string& s);

// One SiteRouter per backbone site, all sharing the same expert order and k.
struct Router {
    RouterKind kind = RouterKind::phatgoose;
    std::size_t k = 2;
    std::vector<std::string> expert_ids;
    std::string backbone_fingerprint;
    std::vector<SiteRouter> sites;

    [[nodiscard]] const SiteRouter& at(const std::string& site_id) const;
};

Router build_phatgoose_router(const Backbone& backbone, const std::vector<const LoraExpert*>& experts, std::size_t k);

// Per-site record of routing decisions for real (unmasked) tokens.
struct SiteRoutingRecord {
    std::string site_id;
    std::size_t pool = 0;
    std::vector<double> probabilities;  // [tokens x pool], full-softmax
    std::vector<std::size_t> top1;
};

struct RoutingTrace {
    std::vector<SiteRoutingRecord> sites;

    SiteRoutingRecord& site(const std::string& site_id, std::size_t pool);
    [[nodiscard]] const SiteRoutingRecord* find(const std::string& site_id) const;
};

// Wu + sum_{z in E_t} w_{t,z} B_z A_z u for every token; no gate sigmoid.
// `loras` is aligned with router.expert_ids.
SiteHook routed_forward_hook(const SiteRouter& router, std::vector<const SiteLora*> loras,
                             RoutingTrace* trace = nullptr);

// Hooks for every routed site. Expert order must equal router.expert_ids.
HookMap routed_hooks(const Router& router, const std::vector<const LoraExpert*>& experts,
                     RoutingTrace* trace = nullptr);

}  // namespace pg
