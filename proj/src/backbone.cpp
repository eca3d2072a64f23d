#include "pg/backbone.hpp"

#include "pg/error.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <set>
#include <sstream>

namespace pg {

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.values()) x = stddev * rng.normal();
    return t;
}

std::pair<Tensor, Tensor> norm_params(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d}, 0.0)}; }

std::uint64_t fnv_bytes(std::uint64_t h, const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

const char* kEncSites[] = {"attn.q", "attn.k", "attn.v", "attn.o", "ff.1", "ff.2"};
const char* kDecSites[] = {"self.q",  "self.k",  "self.v", "self.o", "cross.q",
                           "cross.k", "cross.v", "cross.o", "ff.1",  "ff.2"};

}  // namespace

void BackboneConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || n_encoder_layers < 1 || n_decoder_layers < 1 ||
        max_seq_len < 1) {
        throw ConfigError("backbone config: every extent must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("backbone config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
}

const Tensor& ActivationTrace::at(const std::string& site_id) const {
    for (std::size_t i = 0; i < site_ids.size(); ++i) {
        if (site_ids[i] == site_id) return inputs[i];
    }
    throw ContractError("site '" + site_id + "' was not traced");
}

Backbone Backbone::build(const BackboneConfig& cfg) {
    cfg.validate();
    Backbone bb;
    bb.cfg_ = cfg;
    Rng rng = Rng(cfg.seed).split("backbone-init");
    const std::size_t d = cfg.d_model, f = cfg.d_ff;

    bb.tok_emb_ = gaussian({cfg.vocab_size, d}, 1.0, rng);
    bb.enc_pos_ = gaussian({cfg.max_seq_len, d}, 0.5, rng);
    bb.dec_pos_ = gaussian({cfg.max_seq_len, d}, 0.5, rng);

    auto add_site = [&](const std::string& id, std::size_t out, std::size_t in) {
        ModuleSite s;
        s.site_id = id;
        s.n = in;
        s.d = out;
        s.W = gaussian({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
        bb.site_lookup_[id] = bb.sites_.size();
        bb.sites_.push_back(std::move(s));
        return bb.sites_.size() - 1;
    };

    for (std::size_t l = 0; l < cfg.n_encoder_layers; ++l) {
        Layer layer;
        const std::string p = "encoder." + std::to_string(l) + ".";
        for (const char* name : kEncSites) {
            const std::string n = name;
            const std::size_t out = n == "ff.1" ? f : d;
            const std::size_t in = n == "ff.2" ? f : d;
            layer.sites.push_back(add_site(p + n, out, in));
        }
        layer.norms = {norm_params(d), norm_params(d)};
        bb.enc_layers_.push_back(std::move(layer));
    }
    for (std::size_t l = 0; l < cfg.n_decoder_layers; ++l) {
        Layer layer;
        const std::string p = "decoder." + std::to_string(l) + ".";
        for (const char* name : kDecSites) {
            const std::string n = name;
            const std::size_t out = n == "ff.1" ? f : d;
            const std::size_t in = n == "ff.2" ? f : d;
            layer.sites.push_back(add_site(p + n, out, in));
        }
        layer.norms = {norm_params(d), norm_params(d), norm_params(d)};
        bb.dec_layers_.push_back(std::move(layer));
    }
    bb.enc_final_ = norm_params(d);
    bb.dec_final_ = norm_params(d);
    bb.out_proj_ = gaussian({cfg.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    return bb;
}

const ModuleSite& Backbone::site(const std::string& site_id) const { return sites_[site_index(site_id)]; }

std::size_t Backbone::site_index(const std::string& site_id) const {
    auto it = site_lookup_.find(site_id);
    if (it == site_lookup_.end()) throw ContractError("unknown site '" + site_id + "'");
    return it->second;
}

bool Backbone::has_site(const std::string& site_id) const { return site_lookup_.count(site_id) != 0; }

std::vector<std::pair<std::string, const Tensor*>> Backbone::parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb_);
    out.emplace_back("enc_pos", &enc_pos_);
    out.emplace_back("dec_pos", &dec_pos_);
    auto layers = [&](const std::vector<Layer>& ls, const std::string& prefix) {
        for (std::size_t l = 0; l < ls.size(); ++l) {
            for (std::size_t i = 0; i < ls[l].norms.size(); ++i) {
                const std::string p = prefix + std::to_string(l) + ".ln" + std::to_string(i + 1);
                out.emplace_back(p + ".gamma", &ls[l].norms[i].first);
                out.emplace_back(p + ".beta", &ls[l].norms[i].second);
            }
            for (std::size_t s : ls[l].sites) out.emplace_back(sites_[s].site_id, &sites_[s].W);
        }
    };
    layers(enc_layers_, "encoder.");
    layers(dec_layers_, "decoder.");
    out.emplace_back("encoder.final_ln.gamma", &enc_final_.first);
    out.emplace_back("encoder.final_ln.beta", &enc_final_.second);
    out.emplace_back("decoder.final_ln.gamma", &dec_final_.first);
    out.emplace_back("decoder.final_ln.beta", &dec_final_.second);
    out.emplace_back("out_proj", &out_proj_);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Backbone::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).parameters()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

void Backbone::set_trainable(bool on) {
    trainable_ = on;
    for (auto& [name, t] : parameters()) {
        t->requires_grad = on;
        if (!on) t->zero_grad();
    }
}

std::string Backbone::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const std::size_t cfgv[] = {cfg_.vocab_size,       cfg_.d_model,          cfg_.n_heads,    cfg_.d_ff,
                                cfg_.n_encoder_layers, cfg_.n_decoder_layers, cfg_.max_seq_len};
    h = fnv_bytes(h, cfgv, sizeof(cfgv));
    for (const auto& [name, t] : parameters()) {
        h = fnv_bytes(h, name.data(), name.size());
        for (auto s : t->shape()) h = fnv_bytes(h, &s, sizeof(s));
        h = fnv_bytes(h, t->data().data(), t->numel() * sizeof(double));
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void check_batch(const Backbone& backbone, const SeqBatch& batch) {
    const auto& cfg = backbone.config();
    if (batch.enc_len > cfg.max_seq_len || batch.dec_len > cfg.max_seq_len) {
        throw DimensionError("sequence length exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    auto check = [&](const std::vector<std::int32_t>& ids) {
        for (auto id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
                throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                                     std::to_string(cfg.vocab_size));
            }
        }
    };
    check(batch.enc_ids);
    check(batch.dec_ids);
    check(batch.dec_targets);
}

template <typename Bind>
ForwardResult Backbone::run(Tape&, const SeqBatch& batch, const ForwardOptions& opts, Bind bind) const {
    check_batch(*this, batch);
    if (batch.size == 0) throw ContractError("forward: empty batch");
    if (opts.hooks) {
        for (const auto& [id, hook] : *opts.hooks) {
            if (!has_site(id)) throw ContractError("hook attached to unknown site '" + id + "'");
        }
    }

    ForwardResult result;
    std::vector<std::size_t> trace_slot(sites_.size(), SIZE_MAX);
    if (opts.trace) {
        result.trace.emplace();
        auto& tr = *result.trace;
        auto want = [&](const std::string& id) {
            if (opts.trace_sites.empty()) return true;
            for (const auto& s : opts.trace_sites) {
                if (s == id) return true;
            }
            return false;
        };
        for (const auto& s : opts.trace_sites) (void)site_index(s);
        for (std::size_t i = 0; i < sites_.size(); ++i) {
            if (!want(sites_[i].site_id)) continue;
            trace_slot[i] = tr.site_ids.size();
            tr.site_ids.push_back(sites_[i].site_id);
            tr.inputs.emplace_back();
            tr.example_index.emplace_back();
        }
    }

    const std::size_t B = batch.size, Te = batch.enc_len, Td = batch.dec_len, H = cfg_.n_heads;

    auto apply_site = [&](std::size_t idx, Var u, std::span<const std::uint8_t> mask, std::size_t seq_len) {
        const ModuleSite& s = sites_[idx];
        Var base = matmul_nt(u, bind(s.W));
        if (trace_slot[idx] != SIZE_MAX) {
            const Tensor& uv = u.value();
            std::size_t real = 0;
            for (auto m : mask) real += m != 0;
            Tensor rows({real, s.n});
            std::vector<std::size_t> ex;
            ex.reserve(real);
            std::size_t r = 0;
            for (std::size_t i = 0; i < mask.size(); ++i) {
                if (!mask[i]) continue;
                std::memcpy(&rows[r * s.n], &uv[i * s.n], s.n * sizeof(double));
                ex.push_back(i / seq_len);
                ++r;
            }
            auto& tr = *result.trace;
            tr.inputs[trace_slot[idx]] = std::move(rows);
            tr.example_index[trace_slot[idx]] = std::move(ex);
        }
        if (opts.hooks) {
            auto it = opts.hooks->find(s.site_id);
            if (it != opts.hooks->end() && it->second) {
                SiteContext ctx{s, idx, mask};
                return it->second(ctx, u, base);
            }
        }
        return base;
    };

    auto ln = [&](Var x, const std::pair<Tensor, Tensor>& p) { return layer_norm(x, bind(p.first), bind(p.second)); };

    auto positions = [](std::size_t b, std::size_t len) {
        std::vector<std::int32_t> pos(b * len);
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % len);
        return pos;
    };

    Var tok = bind(tok_emb_);
    const std::span<const std::uint8_t> emask(batch.enc_mask);
    const std::span<const std::uint8_t> dmask(batch.dec_mask);

    // encoder
    const auto epos = positions(B, Te);
    Var x = add(embedding(tok, batch.enc_ids), embedding(bind(enc_pos_), epos));
    AttentionLayout enc_attn{B, Te, Te, H, false, emask};
    for (const Layer& L : enc_layers_) {
        Var h = ln(x, L.norms[0]);
        Var q = apply_site(L.sites[0], h, emask, Te);
        Var k = apply_site(L.sites[1], h, emask, Te);
        Var v = apply_site(L.sites[2], h, emask, Te);
        Var a = attention(q, k, v, enc_attn);
        x = add(x, apply_site(L.sites[3], a, emask, Te));
        h = ln(x, L.norms[1]);
        Var f = relu(apply_site(L.sites[4], h, emask, Te));
        x = add(x, apply_site(L.sites[5], f, emask, Te));
    }
    Var enc_out = ln(x, enc_final_);
    result.encoder_out = enc_out;

    // decoder
    const auto dpos = positions(B, Td);
    Var y = add(embedding(tok, batch.dec_ids), embedding(bind(dec_pos_), dpos));
    AttentionLayout self_attn{B, Td, Td, H, true, dmask};
    AttentionLayout cross_attn{B, Td, Te, H, false, emask};
    for (const Layer& L : dec_layers_) {
        Var h = ln(y, L.norms[0]);
        Var q = apply_site(L.sites[0], h, dmask, Td);
        Var k = apply_site(L.sites[1], h, dmask, Td);
        Var v = apply_site(L.sites[2], h, dmask, Td);
        y = add(y, apply_site(L.sites[3], attention(q, k, v, self_attn), dmask, Td));
        h = ln(y, L.norms[1]);
        Var cq = apply_site(L.sites[4], h, dmask, Td);
        Var ck = apply_site(L.sites[5], enc_out, emask, Te);
        Var cv = apply_site(L.sites[6], enc_out, emask, Te);
        y = add(y, apply_site(L.sites[7], attention(cq, ck, cv, cross_attn), dmask, Td));
        h = ln(y, L.norms[2]);
        Var f = relu(apply_site(L.sites[8], h, dmask, Td));
        y = add(y, apply_site(L.sites[9], f, dmask, Td));
    }
    y = ln(y, dec_final_);
    result.logits = matmul_nt(y, bind(out_proj_));
    return result;
}

ForwardResult Backbone::forward(Tape& tape, const SeqBatch& batch, const ForwardOptions& opts) const {
    return run(tape, batch, opts, [&tape](const Tensor& t) { return tape.constant(t); });
}

ForwardResult Backbone::forward_trainable(Tape& tape, const SeqBatch& batch, const ForwardOptions& opts) {
    return run(tape, batch, opts, [&tape](const Tensor& t) { return tape.param(const_cast<Tensor&>(t)); });
}

Var sequence_loss(const ForwardResult& fr, const SeqBatch& batch) {
    return cross_entropy(fr.logits, batch.dec_targets, batch.dec_mask);
}

PretrainReport pretrain_backbone(Backbone& backbone, const BatchSource& source, const SeqBatch& heldout,
                                 const TrainConfig& cfg, Rng rng) {
    auto heldout_loss = [&] {
        Tape tape;
        auto fr = backbone.forward(tape, heldout);
        return sequence_loss(fr, heldout).value().item();
    };

    PretrainReport report;
    report.initial_heldout_loss = heldout_loss();
    backbone.set_trainable(true);
    std::vector<Tensor*> params;
    for (auto& [name, t] : backbone.parameters()) params.push_back(t);
    AdamW opt(params, cfg.adamw);

    for (long step = 0; step < cfg.steps; ++step) {
        SeqBatch batch = source(rng);
        check_batch(backbone, batch);
        Tape tape;
        auto fr = backbone.forward_trainable(tape, batch);
        Var loss = sequence_loss(fr, batch);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) {
            backbone.set_trainable(false);
            throw NumericError("pretraining diverged at step " + std::to_string(step) + ": loss " + std::to_string(lv) +
                               " (previous " + (report.loss_curve.empty() ? std::string("n/a")
                                                                           : std::to_string(report.loss_curve.back())) +
                               ")");
        }
        report.loss_curve.push_back(lv);
        tape.backward(loss);
        opt.step(scheduled_lr(cfg.adamw.lr, cfg.warmup_ratio, step, cfg.steps));
    }
    backbone.set_trainable(false);
    report.steps = cfg.steps;
    report.final_heldout_loss = heldout_loss();
    return report;
}

}  // namespace pg
