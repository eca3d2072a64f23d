#include "fd.hpp"

#include "pg/error.hpp"
#include "pg/routing.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

using namespace pg;
using namespace pg::testing;

namespace {

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0, double shift = 0.0) {
    std::vector<double> x(n);
    for (auto& v : x) v = shift + scale * rng.normal();
    return x;
}

SiteRouter random_router(std::size_t pool, std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::vector<double>> rows;
    std::vector<std::string> ids;
    for (std::size_t z = 0; z < pool; ++z) {
        rows.push_back(random_vector(n, rng));
        ids.push_back("e" + std::to_string(z));
    }
    return make_site_router("s", ids, rows, k);
}

}  // namespace

TEST_CASE("standardize yields zero mean and unit population std", "[routing]") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = random_vector(2 + rng.below(40), rng, 0.1 + 10.0 * rng.uniform(), 5.0 * rng.normal());
        const auto s = standardize(x);
        const double n = static_cast<double>(s.size());
        const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
        double var = 0.0;
        for (double v : s) var += (v - mean) * (v - mean) / n;
        CHECK(std::abs(mean) < 1e-8);
        CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-8);
    }
}

TEST_CASE("standardize is idempotent", "[routing]") {
    Rng rng(2);
    const auto once = standardize(random_vector(17, rng, 3.0, 1.0));
    const auto twice = standardize(once);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(once[i] - twice[i]) < 1e-10);
    const auto ex = standardize(std::vector<double>{1.0, 2.0, 3.0});
    CHECK(ex[0] == Catch::Approx(-1.2247).margin(1e-4));
    CHECK(ex[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(ex[2] == Catch::Approx(1.2247).margin(1e-4));
}

TEST_CASE("constant vectors standardize to zero through epsilon", "[routing]") {
    const std::vector<double> c(8, 3.25);
    for (double v : standardize(c)) CHECK(v == 0.0);
    const std::vector<double> nearly{1.0, 1.0 + 1e-12};
    for (double v : standardize(nearly)) CHECK(std::abs(v) < 1e-3);
    CHECK_THROWS_AS(standardize(std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("affinities are bounded by n and self-affinity equals n", "[routing]") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(60);
        const SiteRouter r = random_router(1 + rng.below(8), n, 1, rng);
        const auto u = random_vector(n, rng, 4.0, 1.0);
        for (double a : affinities(r, u)) CHECK(std::abs(a) <= static_cast<double>(n) + 1e-12);
        const std::vector<double> v = random_vector(n, rng, 0.01 + rng.uniform());
        const SiteRouter self = make_site_router("s", {"a"}, {v}, 1);
        CHECK(std::abs(affinities(self, v)[0] - static_cast<double>(n)) <= 1e-8);
    }
}

TEST_CASE("routing weights sum to one over min(k, pool) experts", "[routing]") {
    Rng rng(4);
    for (std::size_t pool = 1; pool <= 6; ++pool) {
        for (std::size_t k = 1; k <= std::min<std::size_t>(pool, 4); ++k) {
            const SiteRouter r = random_router(pool, 12, k, rng);
            const auto u = random_vector(12, rng);
            const RouterDecision d = route_token(r, u);
            CHECK(d.selected.size() == std::min(k, pool));
            CHECK(std::abs(std::accumulate(d.weights.begin(), d.weights.end(), 0.0) - 1.0) <= 1e-12);
            for (std::size_t i = 1; i < d.selected.size(); ++i) {
                CHECK(d.alpha[d.selected[i - 1]] >= d.alpha[d.selected[i]]);
                CHECK(d.weights[i - 1] >= d.weights[i]);
            }
            const auto p = full_routing_probabilities(r, u);
            CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("weights are a softmax of alpha over sqrt(n)", "[routing]") {
    Rng rng(5);
    const SiteRouter r = random_router(4, 9, 2, rng);
    const auto u = random_vector(9, rng);
    const RouterDecision d = route_token(r, u);
    const double a = d.alpha[d.selected[0]] / 3.0, b = d.alpha[d.selected[1]] / 3.0;
    CHECK(d.weights[0] == Catch::Approx(1.0 / (1.0 + std::exp(b - a))).epsilon(1e-12));
}

TEST_CASE("hand-computed routing cases", "[routing]") {
    const SiteRouter two = make_site_router("s", {"a"}, {{0.0, 2.0}}, 1);
    CHECK(affinities(two, std::vector<double>{0.0, 4.0})[0] == Catch::Approx(2.0).epsilon(1e-12));

    // Gates whose standardized affinities against u are (2, 0) at n = 4.
    const SiteRouter four = make_site_router("s", {"a", "b"}, {{-1.0, -1.0, 1.0, 1.0}, {-1.0, 1.0, 1.0, -1.0}}, 2);
    const RouterDecision d = route_token(four, std::vector<double>{-1.0, -1.0, 1.0, 1.0});
    CHECK(d.alpha[0] == Catch::Approx(4.0).epsilon(1e-12));
    CHECK(d.alpha[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(d.weights[0] == Catch::Approx(0.8808).margin(1e-4));  // softmax(4/2, 0)

    const SiteRouter three = make_site_router("s", {"a", "b", "c"}, {{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}}, 2);
    for (double p : full_routing_probabilities(three, std::vector<double>{3.0, -1.0})) {
        CHECK(p == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("top-k breaks ties toward the lower index", "[routing]") {
    const std::vector<double> s{0.5, 2.0, 2.0, -1.0, 2.0};
    CHECK(top_k(s, 2) == std::vector<std::size_t>{1, 2});
    CHECK(top_k(s, 4) == std::vector<std::size_t>{1, 2, 4, 0});
    CHECK(top_k(s, 9).size() == 5);
    const std::vector<std::vector<double>> same(3, std::vector<double>{1.0, 2.0, 3.0});
    const SiteRouter r = make_site_router("s", {"a", "b", "c"}, same, 2);
    const std::vector<double> u{0.0, 1.0, 5.0};
    CHECK(route_token(r, u).selected == std::vector<std::size_t>{0, 1});
}

TEST_CASE("routing decisions are invariant to positive affine maps of the token", "[routing]") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 4 + rng.below(30);
        const SiteRouter r = random_router(2 + rng.below(7), n, 2, rng);
        const auto u = random_vector(n, rng);
        const double a = 0.1 + 5.0 * rng.uniform(), b = 10.0 * rng.normal();
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) w[i] = a * u[i] + b;
        const auto d1 = route_token(r, u), d2 = route_token(r, w);
        CHECK(d1.selected == d2.selected);
        for (std::size_t z = 0; z < d1.alpha.size(); ++z) CHECK(std::abs(d1.alpha[z] - d2.alpha[z]) < 1e-10);
        for (std::size_t i = 0; i < d1.weights.size(); ++i) CHECK(std::abs(d1.weights[i] - d2.weights[i]) < 1e-10);
    }
}

TEST_CASE("arrow scoring uses the absolute raw projection", "[routing]") {
    const SiteRouter r = make_site_router("s", {"a", "b"}, {{1.0, 0.0}, {0.0, 1.0}}, 1, Scoring::absolute_raw);
    const std::vector<double> u{-3.0, 2.0};
    const auto a = affinities(r, u);
    CHECK(a[0] == 3.0);
    CHECK(a[1] == 2.0);
    CHECK(route_token(r, u).selected == std::vector<std::size_t>{0});
}

TEST_CASE("a single routed expert reproduces its plain LoRA output", "[routing]") {
    BackboneConfig c;
    c.vocab_size = 20;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.n_encoder_layers = 1;
    c.n_decoder_layers = 1;
    c.max_seq_len = 10;
    const Backbone bb = Backbone::build(c);
    LoraExpert e = init_expert(bb, 2, 3, "e");
    Rng rng(7);
    for (auto& s : e.sites) {
        for (auto& x : s.B.values()) x = rng.normal();
        for (auto& x : s.v.values()) x = rng.normal();
    }
    const std::vector<const LoraExpert*> pool{&e};
    const Router router = build_phatgoose_router(bb, pool, 1);
    RoutingTrace trace;
    const HookMap routed = routed_hooks(router, pool, &trace), plain = lora_hooks(e);
    const TokenSeq in{3, 4, 5}, out{6, 7};
    const std::vector<SeqPair> pairs{{in, out}};
    const SeqBatch batch = make_batch(pairs);
    ForwardOptions o1, o2;
    o1.hooks = &routed;
    o2.hooks = &plain;
    Tape t1, t2;
    const auto a = bb.forward(t1, batch, o1).logits.value().values();
    const auto b = bb.forward(t2, batch, o2).logits.value().values();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).epsilon(1e-12));
    REQUIRE(trace.sites.size() == bb.sites().size());
    for (const auto& s : trace.sites) {
        for (double p : s.probabilities) CHECK(p == 1.0);
    }
}

TEST_CASE("routing errors", "[routing][errors]") {
    Rng rng(8);
    const SiteRouter r = random_router(3, 5, 2, rng);
    CHECK_THROWS_AS(affinities(r, random_vector(4, rng)), DimensionError);
    CHECK_THROWS_AS(make_site_router("s", {"a"}, {{1.0, 2.0}, {3.0, 4.0}}, 1), ContractError);
    CHECK_THROWS_AS(make_site_router("s", {}, {}, 1), ContractError);
    CHECK_THROWS_AS(make_site_router("s", {"a"}, {{1.0, 2.0}}, 0), ContractError);
    CHECK_THROWS_AS(make_site_router("s", {"a"}, {{1.0, 2.0}}, 2), ContractError);
    CHECK_THROWS_AS(make_site_router("s", {"a", "b"}, {{1.0, 2.0}, {1.0, 2.0, 3.0}}, 1), DimensionError);
    CHECK_THROWS_AS(parse_router_kind("nope"), ConfigError);
}
