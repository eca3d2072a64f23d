#pragma once

#include "pg/routing.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pg {

inline constexpr double kKlEps = 1e-9;

// Token-mean routing probabilities per site, plus a per-layer aggregate.
struct RoutingDistribution {
    std::vector<std::string> expert_ids;
    std::vector<std::string> site_ids;
    std::vector<std::vector<double>> per_site;   // aligned with site_ids
    std::vector<std::string> layer_ids;          // e.g. "encoder.0"
    std::vector<std::vector<double>> per_layer;  // mean of the layer's site vectors
};

// "encoder.1.attn.q" -> "encoder.1".
std::string layer_of(const std::string& site_id);

RoutingDistribution routing_distribution(const RoutingTrace& trace, const std::vector<std::string>& expert_ids);

// Every site gets the same one-hot vector on `expert`.
RoutingDistribution one_hot_distribution(const std::vector<std::string>& site_ids,
                                         const std::vector<std::string>& expert_ids, std::size_t expert);

// sum p ln(p / q) after adding 1e-9 to both and renormalizing.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct KlResult {
    std::vector<double> per_site;
    double aggregate = 0.0;  // mean over sites
};

// Per-site KL(p || q). Throws ContractError on mismatched expert or site order.
KlResult kl_divergence(const RoutingDistribution& p, const RoutingDistribution& q);

// Pearson correlation; nullopt when either series has zero variance. Needs >= 3 points.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

}  // namespace pg
