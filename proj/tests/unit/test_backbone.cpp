#include "fd.hpp"

#include "pg/backbone.hpp"
#include "pg/error.hpp"
#include "pg/taskgen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

using namespace pg;
using namespace pg::testing;

namespace {

BackboneConfig tiny_config(std::uint64_t seed = 1) {
    BackboneConfig c;
    c.vocab_size = 20;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.n_encoder_layers = 1;
    c.n_decoder_layers = 1;
    c.max_seq_len = 10;
    c.seed = seed;
    return c;
}

SeqBatch tiny_batch() {
    const TokenSeq i0{3, 4, 5, 6}, t0{7, 8, 9};
    const TokenSeq i1{10, 11}, t1{12};
    const std::vector<SeqPair> pairs{{i0, t0}, {i1, t1}};
    return make_batch(pairs);
}

}  // namespace

TEST_CASE("default backbone exposes 32 module sites", "[backbone]") {
    const Backbone bb = Backbone::build(BackboneConfig{});
    CHECK(bb.sites().size() == 32);
    CHECK(bb.has_site("encoder.0.ff.1"));
    CHECK(bb.site("encoder.0.ff.1").d == 256);
    CHECK(bb.site("encoder.0.ff.2").n == 256);
    for (const auto& s : bb.sites()) CHECK(s.W.shape() == Shape{s.d, s.n});
}

TEST_CASE("forward shapes", "[backbone]") {
    const Backbone bb = Backbone::build(tiny_config());
    const SeqBatch b = tiny_batch();
    Tape tape;
    const ForwardResult fr = bb.forward(tape, b);
    CHECK(fr.logits.shape() == Shape{b.size * b.dec_len, 20});
    CHECK(fr.encoder_out.shape() == Shape{b.size * b.enc_len, 8});
    CHECK_FALSE(fr.trace.has_value());
    CHECK(std::isfinite(sequence_loss(fr, b).value().item()));
}

TEST_CASE("initialization and fingerprint are deterministic in the seed", "[backbone]") {
    const Backbone a = Backbone::build(tiny_config(4));
    const Backbone b = Backbone::build(tiny_config(4));
    const Backbone c = Backbone::build(tiny_config(5));
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
    CHECK(a.sites()[0].W.values() == b.sites()[0].W.values());
}

TEST_CASE("an identity hook leaves the forward pass bit-identical", "[backbone]") {
    const Backbone bb = Backbone::build(tiny_config());
    const SeqBatch b = tiny_batch();
    HookMap hooks;
    for (const auto& s : bb.sites()) hooks[s.site_id] = [](const SiteContext&, Var, Var base) { return base; };
    Tape t1, t2;
    const auto plain = bb.forward(t1, b).logits.value().values();
    ForwardOptions opts;
    opts.hooks = &hooks;
    CHECK(bb.forward(t2, b, opts).logits.value().values() == plain);
}

TEST_CASE("hooks see the traced site inputs and the token mask", "[backbone]") {
    const Backbone bb = Backbone::build(tiny_config());
    const SeqBatch b = tiny_batch();
    std::map<std::string, std::pair<Tensor, std::vector<std::uint8_t>>> seen;
    HookMap hooks;
    for (const auto& s : bb.sites()) {
        hooks[s.site_id] = [&seen](const SiteContext& ctx, Var u, Var base) {
            seen[ctx.site.site_id] = {u.value(), std::vector<std::uint8_t>(ctx.token_mask.begin(), ctx.token_mask.end())};
            return base;
        };
    }
    ForwardOptions opts;
    opts.hooks = &hooks;
    opts.trace = true;
    Tape tape;
    const auto fr = bb.forward(tape, b, opts);
    REQUIRE(fr.trace);
    REQUIRE(fr.trace->site_ids.size() == bb.sites().size());
    for (const auto& id : fr.trace->site_ids) {
        const auto& [u, mask] = seen.at(id);
        const Tensor& rows = fr.trace->at(id);
        const std::size_t real = static_cast<std::size_t>(std::accumulate(mask.begin(), mask.end(), 0));
        REQUIRE(rows.dim(0) == real);
        const bool encoder_side = mask.size() == b.size * b.enc_len;
        const std::size_t len = encoder_side ? b.enc_len : b.dec_len;
        std::size_t r = 0;
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            for (std::size_t c = 0; c < rows.dim(1); ++c) CHECK(rows.at(r, c) == u.at(i, c));
            CHECK(fr.trace->example_index[&id - fr.trace->site_ids.data()][r] == i / len);
            ++r;
        }
    }
    CHECK(fr.trace->at("encoder.0.attn.q").dim(0) == 6);
    CHECK(fr.trace->at("decoder.0.self.q").dim(0) == 4);
    CHECK(fr.trace->at("decoder.0.cross.k").dim(0) == 6);
}

TEST_CASE("trace restricted to named sites", "[backbone]") {
    const Backbone bb = Backbone::build(tiny_config());
    ForwardOptions opts;
    opts.trace = true;
    opts.trace_sites = {"decoder.0.ff.2"};
    Tape tape;
    const auto fr = bb.forward(tape, tiny_batch(), opts);
    REQUIRE(fr.trace->site_ids.size() == 1);
    CHECK(fr.trace->at("decoder.0.ff.2").dim(1) == 12);
    CHECK_THROWS_AS(fr.trace->at("encoder.0.ff.1"), ContractError);
    opts.trace_sites = {"nope"};
    Tape other;
    CHECK_THROWS_AS(bb.forward(other, tiny_batch(), opts), ContractError);
}

TEST_CASE("padding does not change the outputs of real tokens", "[backbone]") {
    const Backbone bb = Backbone::build(tiny_config());
    const TokenSeq i1{10, 11}, t1{12};
    const std::vector<SeqPair> alone{{i1, t1}};
    const SeqBatch single = make_batch(alone);
    const SeqBatch padded = tiny_batch();
    Tape t1p, t2p;
    const Tensor& a = bb.forward(t1p, single).logits.value();
    const Tensor& b = bb.forward(t2p, padded).logits.value();
    for (std::size_t c = 0; c < 20; ++c) CHECK(a.at(0, c) == Catch::Approx(b.at(padded.dec_len, c)).epsilon(1e-12));
}

TEST_CASE("backbone gradients match finite differences", "[backbone][fd]") {
    Backbone bb = Backbone::build(tiny_config());
    const SeqBatch b = tiny_batch();
    bb.set_trainable(true);
    {
        Tape tape;
        tape.backward(sequence_loss(bb.forward_trainable(tape, b), b));
    }
    auto loss = [&]() {
        Tape tape;
        return sequence_loss(bb.forward(tape, b), b).value().item();
    };
    for (const char* name : {"tok_emb", "encoder.0.attn.v", "decoder.0.cross.k", "decoder.0.ff.1"}) {
        Tensor* p = nullptr;
        for (auto& [n, t] : bb.parameters()) {
            if (n == name) p = t;
        }
        REQUIRE(p != nullptr);
        REQUIRE(p->grad);
        const std::vector<double> analytic = *p->grad;
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < p->numel(); i += 3) {
            const double keep = (*p)[i];
            (*p)[i] = keep + 1e-6;
            const double up = loss();
            (*p)[i] = keep - 1e-6;
            const double down = loss();
            (*p)[i] = keep;
            const double numeric = (up - down) / 2e-6;
            diff += (analytic[i] - numeric) * (analytic[i] - numeric);
            na += analytic[i] * analytic[i];
            nn += numeric * numeric;
        }
        INFO(name);
        CHECK(std::sqrt(diff) / (std::sqrt(na) + std::sqrt(nn)) < 1e-5);
    }
}

TEST_CASE("pretraining lowers held-out loss and freezes the backbone", "[backbone]") {
    Backbone bb = Backbone::build(tiny_config());
    taskgen::VocabLayout v;
    v.vocab_size = 20;
    v.template_count = 4;
    const auto src = taskgen::PretrainSource::make(v, 2, 2, 4);
    Rng hr(7);
    const SeqBatch heldout = src.batch(32, hr);
    TrainConfig tc;
    tc.steps = 60;
    tc.batch_size = 16;
    tc.adamw.lr = 1e-2;
    const auto report = pretrain_backbone(bb, [&](Rng& r) { return src.batch(16, r); }, heldout, tc, Rng(3));
    CHECK(report.final_heldout_loss < report.initial_heldout_loss - 0.1);
    CHECK(report.loss_curve.size() == 60);
    CHECK_FALSE(bb.trainable());
}

TEST_CASE("backbone errors", "[backbone][errors]") {
    BackboneConfig c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(Backbone::build(c), ConfigError);
    c = tiny_config();
    c.d_model = 0;
    CHECK_THROWS_AS(Backbone::build(c), ConfigError);

    const Backbone bb = Backbone::build(tiny_config());
    const TokenSeq bad{3, 25}, t{4};
    const std::vector<SeqPair> pairs{{bad, t}};
    Tape tape;
    CHECK_THROWS_AS(bb.forward(tape, make_batch(pairs)), DimensionError);
    const TokenSeq long_in(11, 3);
    const std::vector<SeqPair> long_pairs{{long_in, t}};
    CHECK_THROWS_AS(check_batch(bb, make_batch(long_pairs)), DimensionError);
    CHECK_THROWS_AS(bb.site("encoder.9.ff.1"), ContractError);
}
