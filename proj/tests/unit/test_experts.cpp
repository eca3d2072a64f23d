#include "fd.hpp"

#include "pg/error.hpp"
#include "pg/experts.hpp"
#include "pg/taskgen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace pg;
using namespace pg::testing;

namespace {

BackboneConfig small_backbone() {
    BackboneConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 24;
    c.n_encoder_layers = 1;
    c.n_decoder_layers = 1;
    return c;
}

const taskgen::Suite& suite() {
    static const taskgen::Suite s = [] {
        taskgen::SuiteConfig c;
        c.seed = 2;
        c.train_size = 64;
        c.validation_size = 16;
        c.test_size = 16;
        return taskgen::generate_suite(c);
    }();
    return s;
}

void randomize(LoraExpert& e, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& s : e.sites) {
        for (auto& x : s.B.values()) x = 0.3 * rng.normal();
        for (auto& x : s.v.values()) x = 0.5 * rng.normal();
    }
}

// Worst norm-wise relative error between backprop and central differences over
// the A, B and v tensors of the listed sites.
double expert_fd_error(const Backbone& bb, LoraExpert& e, bool gated, const SeqBatch& batch,
                       const std::vector<std::string>& sites) {
    e.set_trainable(true, gated);
    auto loss = [&](bool train) {
        const HookMap hooks = gated ? gated_hooks(e) : lora_hooks(e);
        ForwardOptions opts;
        opts.hooks = &hooks;
        Tape tape;
        Var l = sequence_loss(bb.forward(tape, batch, opts), batch);
        if (train) tape.backward(l);
        return l.value().item();
    };
    loss(true);
    double worst = 0.0;
    for (const auto& id : sites) {
        SiteLora& s = e.at(id);
        std::vector<Tensor*> leaves{&s.A, &s.B};
        if (gated) leaves.push_back(&s.v);
        for (Tensor* t : leaves) {
            REQUIRE(t->grad);
            const std::vector<double> analytic = *t->grad;
            double diff = 0.0, na = 0.0, nn = 0.0;
            for (std::size_t i = 0; i < t->numel(); ++i) {
                const double keep = (*t)[i];
                (*t)[i] = keep + 1e-6;
                const double up = loss(false);
                (*t)[i] = keep - 1e-6;
                const double down = loss(false);
                (*t)[i] = keep;
                const double numeric = (up - down) / 2e-6;
                diff += (analytic[i] - numeric) * (analytic[i] - numeric);
                na += analytic[i] * analytic[i];
                nn += numeric * numeric;
            }
            const double denom = std::sqrt(na) + std::sqrt(nn);
            if (denom > 0.0) worst = std::max(worst, std::sqrt(diff) / denom);
        }
    }
    e.set_trainable(false, false);
    return worst;
}

bool same_backbone(const Backbone& a, const Backbone& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].second->values() != pb[i].second->values()) return false;
    }
    return true;
}

ExpertTrainConfig quick_train() {
    ExpertTrainConfig c;
    c.steps = 6;
    c.gate_steps = 6;
    c.batch_size = 8;
    c.eval_every = 3;
    return c;
}

}  // namespace

TEST_CASE("initialization follows the zero-update convention", "[experts]") {
    const Backbone bb = Backbone::build(small_backbone());
    const LoraExpert e = init_expert(bb, 4, 11, "x");
    REQUIRE(e.sites.size() == bb.sites().size());
    double sum_sq = 0.0;
    std::size_t count = 0;
    for (const auto& s : e.sites) {
        CHECK(s.A.shape() == Shape{4, bb.site(s.site_id).n});
        CHECK(s.B.shape() == Shape{bb.site(s.site_id).d, 4});
        for (double x : s.B.values()) CHECK(x == 0.0);
        for (double x : s.v.values()) CHECK(x == 0.0);
        for (double x : s.A.values()) sum_sq += x * x * static_cast<double>(s.n());
        count += s.A.numel();
    }
    CHECK(sum_sq / static_cast<double>(count) == Catch::Approx(1.0).epsilon(0.1));  // Var[A] = 1/n
    const LoraExpert again = init_expert(bb, 4, 11, "x");
    CHECK(again.sites[3].A.values() == e.sites[3].A.values());
}

TEST_CASE("a fresh expert leaves the base forward bit-identical", "[experts]") {
    const Backbone bb = Backbone::build(small_backbone());
    const LoraExpert e = init_expert(bb, 4, 1, "x");
    const SeqBatch batch = taskgen::batch_of(suite().examples("h0_perm", taskgen::Split::train), 0, 4);
    Tape t0, t1, t2;
    const auto base = bb.forward(t0, batch).logits.value().values();
    const HookMap lh = lora_hooks(e), gh = gated_hooks(e);
    ForwardOptions o1, o2;
    o1.hooks = &lh;
    o2.hooks = &gh;
    CHECK(bb.forward(t1, batch, o1).logits.value().values() == base);
    CHECK(bb.forward(t2, batch, o2).logits.value().values() == base);
}

TEST_CASE("hook outputs match the closed form", "[experts]") {
    const Backbone bb = Backbone::build(small_backbone());
    LoraExpert e = init_expert(bb, 3, 5, "x");
    randomize(e, 6);
    const SiteLora& s = e.at("encoder.0.attn.q");
    const ModuleSite& site = bb.site("encoder.0.attn.q");
    Rng rng(9);
    const Tensor u = random_tensor({4, s.n()}, rng);
    const std::vector<std::uint8_t> mask(4, 1);
    Tape tape;
    Var uv = tape.constant(u);
    Var base = matmul_nt(uv, tape.constant(site.W));
    const SiteContext ctx{site, bb.site_index(site.site_id), mask};
    const Tensor& plain = lora_forward_hook(s)(ctx, uv, base).value();
    const Tensor& gated = gated_forward_hook(s)(ctx, uv, base).value();
    for (std::size_t t = 0; t < 4; ++t) {
        double logit = 0.0;
        for (std::size_t j = 0; j < s.n(); ++j) logit += s.v[j] * u.at(t, j);
        const double g = 1.0 / (1.0 + std::exp(-logit));
        for (std::size_t o = 0; o < s.d(); ++o) {
            double w = 0.0, delta = 0.0;
            for (std::size_t j = 0; j < s.n(); ++j) w += site.W.at(o, j) * u.at(t, j);
            for (std::size_t r = 0; r < s.rank(); ++r) {
                double au = 0.0;
                for (std::size_t j = 0; j < s.n(); ++j) au += s.A.at(r, j) * u.at(t, j);
                delta += s.B.at(o, r) * au;
            }
            CHECK(plain.at(t, o) == Catch::Approx(w + delta).epsilon(1e-12));
            CHECK(gated.at(t, o) == Catch::Approx(w + g * delta).epsilon(1e-12));
        }
    }
}

TEST_CASE("expert gradients match finite differences", "[experts][fd]") {
    const Backbone bb = Backbone::build(small_backbone());
    LoraExpert e = init_expert(bb, 2, 3, "x");
    randomize(e, 4);
    const SeqBatch batch = taskgen::batch_of(suite().examples("h1_affix", taskgen::Split::train), 0, 3);
    const std::vector<std::string> sites{"encoder.0.attn.k", "decoder.0.cross.v", "decoder.0.ff.2"};
    CHECK(expert_fd_error(bb, e, false, batch, sites) < 1e-4);
    CHECK(expert_fd_error(bb, e, true, batch, sites) < 1e-4);
}

TEST_CASE("training phases touch only their own parameters", "[experts]") {
    const Backbone bb = Backbone::build(small_backbone());
    const Backbone reference = Backbone::build(small_backbone());
    const auto& train = suite().examples("h2_perm", taskgen::Split::train);
    const auto& val = suite().examples("h2_perm", taskgen::Split::validation);
    LoraExpert e = init_expert(bb, 4, 8, "h2_perm");

    train_expert(bb, e, train, val, quick_train(), 21);
    bool b_moved = false;
    for (const auto& s : e.sites) {
        for (double x : s.v.values()) CHECK(x == 0.0);
        for (double x : s.B.values()) b_moved = b_moved || x != 0.0;
    }
    CHECK(b_moved);
    CHECK(same_backbone(bb, reference));

    const LoraExpert before = e;
    train_gate(bb, e, train, val, quick_train(), 22);
    bool v_moved = false;
    for (std::size_t i = 0; i < e.sites.size(); ++i) {
        CHECK(e.sites[i].A.values() == before.sites[i].A.values());
        CHECK(e.sites[i].B.values() == before.sites[i].B.values());
        for (double x : e.sites[i].v.values()) v_moved = v_moved || x != 0.0;
    }
    CHECK(v_moved);
    CHECK(same_backbone(bb, reference));

    LoraExpert j = init_expert(bb, 4, 8, "h2_perm");
    train_joint(bb, j, train, val, quick_train(), 23);
    CHECK(same_backbone(bb, reference));
}

TEST_CASE("expert training is deterministic in its seed", "[experts]") {
    const Backbone bb = Backbone::build(small_backbone());
    const auto& train = suite().examples("h3_copy", taskgen::Split::train);
    const auto& val = suite().examples("h3_copy", taskgen::Split::validation);
    LoraExpert a = init_expert(bb, 2, 1, "a"), b = init_expert(bb, 2, 1, "b");
    const auto ra = train_expert(bb, a, train, val, quick_train(), 5);
    const auto rb = train_expert(bb, b, train, val, quick_train(), 5);
    CHECK(ra.loss_curve == rb.loss_curve);
    CHECK(a.sites[7].B.values() == b.sites[7].B.values());
}

TEST_CASE("expert validation", "[experts][errors]") {
    const Backbone bb = Backbone::build(small_backbone());
    CHECK_THROWS_AS(init_expert(bb, 0, 1, "x"), ContractError);
    CHECK_THROWS_AS(init_expert(bb, 17, 1, "x"), ContractError);
    LoraExpert e = init_expert(bb, 2, 1, "x");
    e.sites[0].v = Tensor({3});
    CHECK_THROWS_AS(e.validate(bb), ContractError);
    CHECK_THROWS_AS(e.at("nope"), ContractError);
}
