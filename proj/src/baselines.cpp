#include "pg/baselines.hpp"

#include "pg/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pg {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;

CMap as_mat(const Tensor& t) { return CMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))); }

// min(cap, size) distinct indices drawn without replacement, in sorted order.
std::vector<std::size_t> sample_indices(std::size_t size, std::size_t cap, Rng& rng) {
    std::vector<std::size_t> idx(size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (cap >= size) return idx;
    shuffle(idx, rng);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    return idx;
}

taskgen::ExampleSet subset(const taskgen::ExampleSet& set, const std::vector<std::size_t>& idx) {
    taskgen::ExampleSet out;
    out.task_id = set.task_id;
    out.split = set.split;
    for (std::size_t i : idx) out.examples.push_back(set.examples[i]);
    return out;
}

constexpr std::size_t kChunk = 100;

}  // namespace

ActivationStats collect_activation_stats(const Backbone& backbone, const LoraExpert& expert,
                                         const taskgen::ExampleSet& train, std::size_t cap, std::uint64_t seed) {
    if (train.examples.empty() || cap == 0) {
        throw ContractError("average activation for '" + expert.expert_id + "' needs a non-empty trace");
    }
    Rng rng = Rng(seed).split("avg-act").split(expert.expert_id);
    const taskgen::ExampleSet sample = subset(train, sample_indices(train.examples.size(), cap, rng));

    ActivationStats stats;
    stats.expert_id = expert.expert_id;
    stats.samples = sample.examples.size();
    std::map<std::string, std::size_t> counts;
    for (const auto& ms : backbone.sites()) stats.mean[ms.site_id].assign(ms.n, 0.0);

    const HookMap hooks = lora_hooks(expert);
    ForwardOptions opts;
    opts.hooks = &hooks;
    opts.trace = true;
    for (std::size_t b = 0; b < sample.examples.size(); b += kChunk) {
        SeqBatch batch = taskgen::batch_of(sample, b, std::min(sample.examples.size(), b + kChunk));
        Tape tape;
        auto fr = backbone.forward(tape, batch, opts);
        const ActivationTrace& tr = *fr.trace;
        for (std::size_t s = 0; s < tr.site_ids.size(); ++s) {
            auto& acc = stats.mean[tr.site_ids[s]];
            const Tensor& x = tr.inputs[s];
            for (std::size_t t = 0; t < x.dim(0); ++t) {
                auto row = x.row(t);
                for (std::size_t j = 0; j < row.size(); ++j) acc[j] += row[j];
            }
            counts[tr.site_ids[s]] += x.dim(0);
        }
    }
    for (auto& [site, acc] : stats.mean) {
        const double c = static_cast<double>(counts[site]);
        for (double& x : acc) x /= c;
    }
    return stats;
}

SiteRouter average_activation_router(const std::vector<const ActivationStats*>& stats, const std::string& site_id,
                                     std::size_t k) {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    for (const ActivationStats* s : stats) {
        auto it = s->mean.find(site_id);
        if (s->samples == 0 || it == s->mean.end()) {
            throw ContractError("no activation trace for expert '" + s->expert_id + "' at site '" + site_id + "'");
        }
        ids.push_back(s->expert_id);
        rows.push_back(it->second);
    }
    return make_site_router(site_id, std::move(ids), rows, k, Scoring::standardized);
}

Router build_average_activation_router(const Backbone& backbone, const std::vector<const ActivationStats*>& stats,
                                       std::size_t k) {
    if (stats.empty()) throw ContractError("cannot build a router over an empty expert pool");
    Router r;
    r.kind = RouterKind::avg_act;
    r.k = k;
    for (const auto* s : stats) r.expert_ids.push_back(s->expert_id);
    r.backbone_fingerprint = backbone.fingerprint();
    for (const auto& ms : backbone.sites()) r.sites.push_back(average_activation_router(stats, ms.site_id, k));
    return r;
}

PowerIterationResult top_right_singular_vector(const Tensor& B, const Tensor& A, double tol, long max_iters) {
    if (A.ndim() != 2 || B.ndim() != 2 || B.dim(1) != A.dim(0)) {
        throw DimensionError("power iteration: B " + shape_str(B.shape()) + " and A " + shape_str(A.shape()) +
                             " do not compose");
    }
    const Mat a = as_mat(A);
    const Mat gram = as_mat(B).transpose() * as_mat(B);  // r x r
    const auto n = a.cols();

    // Deterministic start with no special alignment to any axis.
    Eigen::VectorXd x(n);
    Rng rng(0x6172726f77ULL);
    for (Eigen::Index i = 0; i < n; ++i) x[i] = rng.normal();
    x.normalize();

    PowerIterationResult res;
    double change = 0.0;
    for (long it = 1; it <= max_iters; ++it) {
        Eigen::VectorXd y = a.transpose() * (gram * (a * x));
        const double norm = y.norm();
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw NumericError("power iteration: (BA)^T(BA) annihilates the iterate (zero update?)");
        }
        y /= norm;
        if (y.dot(x) < 0.0) y = -y;
        change = (y - x).norm();
        x = std::move(y);
        if (change < tol) {
            res.iterations = it;
            res.vector.assign(x.data(), x.data() + n);
            res.singular_value = std::sqrt(norm);
            return res;
        }
    }
    const Eigen::VectorXd mx = a.transpose() * (gram * (a * x));
    const double residual = (mx - x.dot(mx) * x).norm();
    throw NumericError("power iteration did not converge in " + std::to_string(max_iters) +
                       " iterations (last step " + std::to_string(change) + ", residual " + std::to_string(residual) +
                       ")");
}

SiteRouter arrow_router(const std::vector<const LoraExpert*>& experts, const std::string& site_id, std::size_t k) {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    for (const LoraExpert* e : experts) {
        const SiteLora& l = e->at(site_id);
        ids.push_back(e->expert_id);
        rows.push_back(top_right_singular_vector(l.B, l.A).vector);
    }
    return make_site_router(site_id, std::move(ids), rows, k, Scoring::absolute_raw);
}

Router build_arrow_router(const Backbone& backbone, const std::vector<const LoraExpert*>& experts, std::size_t k) {
    if (experts.empty()) throw ContractError("cannot build a router over an empty expert pool");
    Router r;
    r.kind = RouterKind::arrow;
    r.k = k;
    for (const auto* e : experts) r.expert_ids.push_back(e->expert_id);
    r.backbone_fingerprint = backbone.fingerprint();
    for (const auto& ms : backbone.sites()) r.sites.push_back(arrow_router(experts, ms.site_id, k));
    return r;
}

Tensor embed_inputs(const Backbone& backbone, const SeqBatch& batch) {
    Tape tape;
    auto fr = backbone.forward(tape, batch);
    const Tensor& enc = fr.encoder_out.value();
    const std::size_t d = enc.dim(1);
    Tensor out({batch.size, d});
    for (std::size_t b = 0; b < batch.size; ++b) {
        std::size_t cnt = 0;
        auto dst = out.row(b);
        for (std::size_t t = 0; t < batch.enc_len; ++t) {
            if (!batch.enc_mask[b * batch.enc_len + t]) continue;
            auto src = enc.row(b * batch.enc_len + t);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            ++cnt;
        }
        for (double& x : dst) x /= static_cast<double>(cnt);
    }
    return out;
}

EmbeddingIndex build_index(const Backbone& backbone, const std::vector<std::string>& expert_ids,
                           const std::vector<const taskgen::ExampleSet*>& train_sets, std::size_t cap,
                           std::uint64_t seed) {
    if (expert_ids.empty() || expert_ids.size() != train_sets.size()) {
        throw ContractError("retrieval index needs one training set per expert");
    }
    EmbeddingIndex idx;
    idx.expert_ids = expert_ids;
    idx.backbone_fingerprint = backbone.fingerprint();
    std::vector<double> rows;
    const std::size_t d = backbone.config().d_model;
    for (std::size_t z = 0; z < expert_ids.size(); ++z) {
        Rng rng = Rng(seed).split("retrieval").split(expert_ids[z]);
        const auto sample = subset(*train_sets[z], sample_indices(train_sets[z]->examples.size(), cap, rng));
        for (std::size_t b = 0; b < sample.examples.size(); b += kChunk) {
            const Tensor e = embed_inputs(backbone, taskgen::batch_of(sample, b, std::min(sample.examples.size(), b + kChunk)));
            rows.insert(rows.end(), e.values().begin(), e.values().end());
            idx.owner.insert(idx.owner.end(), e.dim(0), z);
        }
    }
    idx.embeddings = Tensor({idx.owner.size(), d}, std::move(rows));
    return idx;
}

std::size_t retrieval_route(const EmbeddingIndex& index, std::span<const double> query) {
    if (index.size() == 0) throw ContractError("retrieval index is empty");
    const std::size_t d = index.embeddings.dim(1);
    if (query.size() != d) throw DimensionError("query width does not match the index");
    const double qn = std::sqrt(std::inner_product(query.begin(), query.end(), query.begin(), 0.0));
    if (qn == 0.0) throw DomainError("retrieval query has zero norm");
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        auto row = index.embeddings.row(i);
        const double rn = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
        if (rn == 0.0) throw DomainError("stored embedding " + std::to_string(i) + " has zero norm");
        const double c = std::inner_product(row.begin(), row.end(), query.begin(), 0.0) / (rn * qn);
        if (c > best) {
            best = c;
            arg = i;
        }
    }
    return index.owner[arg];
}

const Tensor& MergedExpert::at(const std::string& site_id) const {
    for (std::size_t i = 0; i < site_ids.size(); ++i) {
        if (site_ids[i] == site_id) return deltas[i];
    }
    throw ContractError("merged expert has no delta for site '" + site_id + "'");
}

MergedExpert merge_experts(const std::vector<const LoraExpert*>& experts, MergeMode mode) {
    if (experts.empty()) throw ContractError("cannot merge an empty expert pool");
    const LoraExpert& first = *experts.front();
    for (const LoraExpert* e : experts) {
        bool same = e->sites.size() == first.sites.size();
        for (std::size_t i = 0; same && i < first.sites.size(); ++i) same = e->sites[i].site_id == first.sites[i].site_id;
        if (!same) {
            throw ContractError("site coverage of '" + e->expert_id + "' differs from '" + first.expert_id + "'");
        }
    }
    MergedExpert m;
    m.name = mode == MergeMode::post_product ? "merged" : "merged-param-avg";
    const double inv = 1.0 / static_cast<double>(experts.size());
    // Mean as x0 + sum(x_z - x0) / Z, so identical inputs average to themselves bit for bit.
    auto mean_of = [&](auto&& get) {
        const Mat x0 = get(*experts.front());
        Mat acc = Mat::Zero(x0.rows(), x0.cols());
        for (std::size_t z = 1; z < experts.size(); ++z) acc += get(*experts[z]) - x0;
        return Mat(x0 + acc * inv);
    };
    for (std::size_t i = 0; i < first.sites.size(); ++i) {
        const SiteLora& s0 = first.sites[i];
        Mat D;
        if (mode == MergeMode::post_product) {
            D = mean_of([i](const LoraExpert& e) { return Mat(as_mat(e.sites[i].B) * as_mat(e.sites[i].A)); });
        } else {
            for (const LoraExpert* e : experts) {
                if (e->sites[i].rank() != s0.rank()) {
                    throw ContractError("parameter averaging needs equal ranks at '" + s0.site_id + "'");
                }
            }
            const Mat Bm = mean_of([i](const LoraExpert& e) { return Mat(as_mat(e.sites[i].B)); });
            const Mat Am = mean_of([i](const LoraExpert& e) { return Mat(as_mat(e.sites[i].A)); });
            D = Bm * Am;
        }
        m.site_ids.push_back(s0.site_id);
        m.deltas.emplace_back(Shape{s0.d(), s0.n()}, std::vector<double>(D.data(), D.data() + D.size()));
    }
    return m;
}

HookMap merged_hooks(const MergedExpert& merged) {
    HookMap hooks;
    for (std::size_t i = 0; i < merged.site_ids.size(); ++i) {
        const Tensor* D = &merged.deltas[i];
        hooks[merged.site_ids[i]] = [D](const SiteContext& ctx, Var u, Var base) {
            if (D->dim(0) != ctx.site.d || D->dim(1) != ctx.site.n) {
                throw DimensionError("merged delta does not fit site '" + ctx.site.site_id + "'");
            }
            return add(base, matmul_nt(u, u.tape->constant(*D)));
        };
    }
    return hooks;
}

std::size_t oracle_route(std::span<const double> scores) {
    if (scores.empty()) throw ContractError("oracle routing needs at least one expert score");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[arg]) arg = i;
    }
    return arg;
}

std::size_t best_individual(const std::vector<std::vector<double>>& scores) {
    if (scores.empty()) throw ContractError("best-individual selection needs at least one expert");
    std::vector<double> means;
    for (const auto& row : scores) {
        if (row.empty()) throw ContractError("best-individual selection needs at least one dataset");
        means.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
    }
    return oracle_route(means);
}

}  // namespace pg
