#include "pg/analysis.hpp"

#include "pg/error.hpp"

#include <cmath>
#include <map>

namespace pg {

std::string layer_of(const std::string& site_id) {
    const auto first = site_id.find('.');
    if (first == std::string::npos) return site_id;
    const auto second = site_id.find('.', first + 1);
    return second == std::string::npos ? site_id : site_id.substr(0, second);
}

namespace {

void fill_layers(RoutingDistribution& d) {
    d.layer_ids.clear();
    d.per_layer.clear();
    std::vector<std::size_t> counts;
    for (std::size_t s = 0; s < d.site_ids.size(); ++s) {
        const std::string layer = layer_of(d.site_ids[s]);
        std::size_t li = 0;
        while (li < d.layer_ids.size() && d.layer_ids[li] != layer) ++li;
        if (li == d.layer_ids.size()) {
            d.layer_ids.push_back(layer);
            d.per_layer.emplace_back(d.expert_ids.size(), 0.0);
            counts.push_back(0);
        }
        for (std::size_t z = 0; z < d.expert_ids.size(); ++z) d.per_layer[li][z] += d.per_site[s][z];
        ++counts[li];
    }
    for (std::size_t li = 0; li < d.layer_ids.size(); ++li) {
        for (double& x : d.per_layer[li]) x /= static_cast<double>(counts[li]);
    }
}

}  // namespace

RoutingDistribution routing_distribution(const RoutingTrace& trace, const std::vector<std::string>& expert_ids) {
    if (trace.sites.empty()) throw ContractError("routing distribution of an empty trace");
    RoutingDistribution d;
    d.expert_ids = expert_ids;
    const std::size_t Z = expert_ids.size();
    for (const auto& rec : trace.sites) {
        if (rec.pool != Z) throw ContractError("trace at '" + rec.site_id + "' has a different expert pool");
        const std::size_t tokens = rec.probabilities.size() / Z;
        if (tokens == 0) throw ContractError("trace at '" + rec.site_id + "' recorded no tokens");
        std::vector<double> mean(Z, 0.0);
        for (std::size_t t = 0; t < tokens; ++t) {
            for (std::size_t z = 0; z < Z; ++z) mean[z] += rec.probabilities[t * Z + z];
        }
        for (double& x : mean) x /= static_cast<double>(tokens);
        d.site_ids.push_back(rec.site_id);
        d.per_site.push_back(std::move(mean));
    }
    fill_layers(d);
    return d;
}

RoutingDistribution one_hot_distribution(const std::vector<std::string>& site_ids,
                                         const std::vector<std::string>& expert_ids, std::size_t expert) {
    if (expert >= expert_ids.size()) throw ContractError("one-hot expert index out of range");
    RoutingDistribution d;
    d.expert_ids = expert_ids;
    d.site_ids = site_ids;
    std::vector<double> v(expert_ids.size(), 0.0);
    v[expert] = 1.0;
    d.per_site.assign(site_ids.size(), v);
    fill_layers(d);
    return d;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) throw ContractError("KL divergence needs equal, non-empty supports");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw DomainError("KL divergence of a negative probability");
        sp += p[i] + kKlEps;
        sq += q[i] + kKlEps;
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double a = (p[i] + kKlEps) / sp;
        const double b = (q[i] + kKlEps) / sq;
        kl += a * std::log(a / b);
    }
    return std::max(kl, 0.0);
}

KlResult kl_divergence(const RoutingDistribution& p, const RoutingDistribution& q) {
    if (p.expert_ids != q.expert_ids) throw ContractError("KL divergence: expert orders differ");
    if (p.site_ids != q.site_ids) throw ContractError("KL divergence: site orders differ");
    if (p.site_ids.empty()) throw ContractError("KL divergence of empty distributions");
    KlResult r;
    for (std::size_t s = 0; s < p.site_ids.size(); ++s) {
        r.per_site.push_back(kl_divergence(p.per_site[s], q.per_site[s]));
        r.aggregate += r.per_site.back();
    }
    r.aggregate /= static_cast<double>(r.per_site.size());
    return r;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ContractError("pearson: series lengths differ");
    if (x.size() < 3) throw ContractError("pearson needs at least 3 points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace pg
