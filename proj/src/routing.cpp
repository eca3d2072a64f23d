#include "pg/routing.hpp"

#include "pg/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pg {

std::vector<double> standardize(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n < 2) throw DimensionError("standardize needs at least 2 entries, got " + std::to_string(n));
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    std::vector<double> out(n);
    // Epsilon only guards near-constant vectors; a constant vector maps to exactly zero.
    const double denom = std::max(sd, kStdEps);
    for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) / denom;
    return out;
}

SiteRouter make_site_router(std::string site_id, std::vector<std::string> expert_ids,
                            const std::vector<std::vector<double>>& rows, std::size_t k, Scoring scoring) {
    if (rows.empty() || rows.size() != expert_ids.size()) {
        throw ContractError("router for '" + site_id + "' needs one gate row per expert");
    }
    if (k < 1 || k > rows.size()) {
        throw ContractError("k = " + std::to_string(k) + " is outside [1, " + std::to_string(rows.size()) + "]");
    }
    SiteRouter r;
    r.site_id = std::move(site_id);
    r.expert_ids = std::move(expert_ids);
    r.n = rows.front().size();
    r.k = k;
    r.scoring = scoring;
    r.gates = Tensor({rows.size(), r.n});
    for (std::size_t z = 0; z < rows.size(); ++z) {
        if (rows[z].size() != r.n) {
            throw DimensionError("gate width mismatch at '" + r.site_id + "': expert '" + r.expert_ids[z] + "' has " +
                                 std::to_string(rows[z].size()) + ", expected " + std::to_string(r.n));
        }
        const std::vector<double> row = scoring == Scoring::standardized ? standardize(rows[z]) : rows[z];
        std::copy(row.begin(), row.end(), r.gates.row(z).begin());
    }
    return r;
}

SiteRouter build_router(const std::vector<const LoraExpert*>& experts, const std::string& site_id, std::size_t k) {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    for (const LoraExpert* e : experts) {
        if (!e->has_site(site_id)) {
            throw ContractError("expert '" + e->expert_id + "' has no gate at site '" + site_id + "'");
        }
        ids.push_back(e->expert_id);
        rows.push_back(e->at(site_id).v.values());
    }
    return make_site_router(site_id, std::move(ids), rows, k, Scoring::standardized);
}

std::vector<double> affinities(const SiteRouter& router, std::span<const double> u) {
    if (u.size() != router.n) {
        throw DimensionError("activation width " + std::to_string(u.size()) + " does not match router width " +
                             std::to_string(router.n) + " at '" + router.site_id + "'");
    }
    std::vector<double> alpha(router.pool_size());
    if (router.scoring == Scoring::standardized) {
        const std::vector<double> ub = standardize(u);
        for (std::size_t z = 0; z < alpha.size(); ++z) {
            auto g = router.gates.row(z);
            alpha[z] = std::inner_product(g.begin(), g.end(), ub.begin(), 0.0);
        }
    } else {
        for (std::size_t z = 0; z < alpha.size(); ++z) {
            auto g = router.gates.row(z);
            alpha[z] = std::abs(std::inner_product(g.begin(), g.end(), u.begin(), 0.0));
        }
    }
    return alpha;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    idx.resize(k);
    return idx;
}

namespace {

std::vector<double> softmax_of(const std::vector<double>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - mx);
    for (double& x : p) x /= s;
    return p;
}

}  // namespace

RouterDecision route_token(const SiteRouter& router, std::span<const double> u) {
    RouterDecision d;
    d.alpha = affinities(router, u);
    d.selected = top_k(d.alpha, router.k);
    const double scale = 1.0 / std::sqrt(static_cast<double>(router.n));
    std::vector<double> logits;
    for (std::size_t z : d.selected) logits.push_back(d.alpha[z] * scale);
    d.weights = softmax_of(logits);
    return d;
}

std::vector<double> full_routing_probabilities(const SiteRouter& router, std::span<const double> u) {
    std::vector<double> logits = affinities(router, u);
    const double scale = 1.0 / std::sqrt(static_cast<double>(router.n));
    for (double& a : logits) a *= scale;
    return softmax_of(logits);
}

const char* router_kind_name(RouterKind k) {
    switch (k) {
        case RouterKind::phatgoose: return "phatgoose";
        case RouterKind::avg_act: return "avg-act";
        case RouterKind::arrow: return "arrow";
    }
    return "?";
}

RouterKind parse_router_kind(const std::string& s) {
    if (s == "phatgoose") return RouterKind::phatgoose;
    if (s == "avg-act") return RouterKind::avg_act;
    if (s == "arrow") return RouterKind::arrow;
    throw ConfigError("unknown router kind '" + s + "' (expected phatgoose, avg-act or arrow)");
}

const SiteRouter& Router::at(const std::string& site_id) const {
    for (const auto& s : sites) {
        if (s.site_id == site_id) return s;
    }
    throw ContractError("router has no entry for site '" + site_id + "'");
}

Router build_phatgoose_router(const Backbone& backbone, const std::vector<const LoraExpert*>& experts, std::size_t k) {
    if (experts.empty()) throw ContractError("cannot build a router over an empty expert pool");
    Router r;
    r.kind = RouterKind::phatgoose;
    r.k = k;
    for (const LoraExpert* e : experts) r.expert_ids.push_back(e->expert_id);
    r.backbone_fingerprint = backbone.fingerprint();
    for (const auto& ms : backbone.sites()) {
        SiteRouter sr = build_router(experts, ms.site_id, k);
        if (sr.n != ms.n) throw DimensionError("gate width does not match site '" + ms.site_id + "'");
        r.sites.push_back(std::move(sr));
    }
    return r;
}

SiteRoutingRecord& RoutingTrace::site(const std::string& site_id, std::size_t pool) {
    for (auto& s : sites) {
        if (s.site_id == site_id) return s;
    }
    sites.push_back({site_id, pool, {}, {}});
    return sites.back();
}

const SiteRoutingRecord* RoutingTrace::find(const std::string& site_id) const {
    for (const auto& s : sites) {
        if (s.site_id == site_id) return &s;
    }
    return nullptr;
}

SiteHook routed_forward_hook(const SiteRouter& router, std::vector<const SiteLora*> loras, RoutingTrace* trace) {
    if (loras.size() != router.pool_size()) {
        throw ContractError("routed hook at '" + router.site_id + "': " + std::to_string(loras.size()) +
                            " experts for a pool of " + std::to_string(router.pool_size()));
    }
    for (const SiteLora* l : loras) {
        if (l->n() != router.n) throw DimensionError("expert width does not match router at '" + router.site_id + "'");
    }
    return [&router, loras = std::move(loras), trace](const SiteContext& ctx, Var u, Var base) {
        const Tensor& uv = u.value();
        const std::size_t T = uv.dim(0), n = uv.dim(1), d = ctx.site.d;
        if (n != router.n) throw DimensionError("routed hook width mismatch at '" + router.site_id + "'");
        Tensor delta({T, d});
        std::vector<double> au;
        SiteRoutingRecord* rec = trace ? &trace->site(router.site_id, router.pool_size()) : nullptr;
        for (std::size_t t = 0; t < T; ++t) {
            auto ut = uv.row(t);
            const RouterDecision dec = route_token(router, ut);
            auto out = delta.row(t);
            for (std::size_t j = 0; j < dec.selected.size(); ++j) {
                const SiteLora& l = *loras[dec.selected[j]];
                const std::size_t r = l.rank();
                au.assign(r, 0.0);
                for (std::size_t a = 0; a < r; ++a) {
                    auto arow = l.A.row(a);
                    au[a] = std::inner_product(arow.begin(), arow.end(), ut.begin(), 0.0);
                }
                const double w = dec.weights[j];
                for (std::size_t i = 0; i < d; ++i) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < r; ++a) s += l.B[i * r + a] * au[a];
                    out[i] += w * s;
                }
            }
            if (rec && (ctx.token_mask.empty() || ctx.token_mask[t])) {
                const auto p = full_routing_probabilities(router, ut);
                rec->probabilities.insert(rec->probabilities.end(), p.begin(), p.end());
                rec->top1.push_back(dec.selected.front());
            }
        }
        return add(base, u.tape->value(std::move(delta)));
    };
}

HookMap routed_hooks(const Router& router, const std::vector<const LoraExpert*>& experts, RoutingTrace* trace) {
    if (experts.size() != router.expert_ids.size()) {
        throw ContractError("router expects " + std::to_string(router.expert_ids.size()) + " experts, got " +
                            std::to_string(experts.size()));
    }
    for (std::size_t z = 0; z < experts.size(); ++z) {
        if (experts[z]->expert_id != router.expert_ids[z]) {
            throw ContractError("expert order mismatch: router slot " + std::to_string(z) + " is '" +
                                router.expert_ids[z] + "', got '" + experts[z]->expert_id + "'");
        }
    }
    HookMap hooks;
    for (const auto& sr : router.sites) {
        std::vector<const SiteLora*> loras;
        for (const LoraExpert* e : experts) loras.push_back(&e->at(sr.site_id));
        hooks[sr.site_id] = routed_forward_hook(sr, std::move(loras), trace);
    }
    return hooks;
}

}  // namespace pg
