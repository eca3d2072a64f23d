#include "fd.hpp"

#include "pg/analysis.hpp"
#include "pg/error.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace pg;

namespace {

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
    std::vector<double> p(n);
    double s = 0.0;
    for (auto& x : p) s += (x = rng.uniform() + (rng.uniform() < 0.2 ? 0.0 : 0.1));
    for (auto& x : p) x /= s;
    return p;
}

}  // namespace

TEST_CASE("KL divergence hand cases", "[analysis]") {
    CHECK(std::abs(kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}) - std::log(2.0)) < 1e-6);
    const std::vector<double> p{0.2, 0.3, 0.5};
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0}) ==
          Catch::Approx(0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-9)).epsilon(1e-6));
}

TEST_CASE("KL divergence is non-negative", "[analysis]") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const std::size_t n = 2 + rng.below(10);
        CHECK(kl_divergence(random_simplex(n, rng), random_simplex(n, rng)) >= 0.0);
    }
}

TEST_CASE("routing distributions average token probabilities", "[analysis]") {
    RoutingTrace trace;
    auto& rec = trace.site("encoder.0.attn.q", 2);
    rec.probabilities = {0.9, 0.1, 0.5, 0.5};
    rec.top1 = {0, 0};
    auto& other = trace.site("encoder.0.ff.1", 2);
    other.probabilities = {0.1, 0.9};
    other.top1 = {1};
    const RoutingDistribution d = routing_distribution(trace, {"a", "b"});
    REQUIRE(d.site_ids.size() == 2);
    CHECK(d.per_site[0][0] == Catch::Approx(0.7).epsilon(1e-12));
    CHECK(d.per_site[0][1] == Catch::Approx(0.3).epsilon(1e-12));
    REQUIRE(d.layer_ids == std::vector<std::string>{"encoder.0"});
    CHECK(d.per_layer[0][0] == Catch::Approx(0.4).epsilon(1e-12));
    for (const auto& row : d.per_site) CHECK(std::abs(row[0] + row[1] - 1.0) <= 1e-9);
    CHECK_THROWS_AS(routing_distribution(trace, {"a", "b", "c"}), ContractError);
    CHECK_THROWS_AS(routing_distribution(RoutingTrace{}, {"a"}), ContractError);
}

TEST_CASE("identical token routing yields that vector; one-hot oracle", "[analysis]") {
    RoutingTrace trace;
    auto& rec = trace.site("decoder.1.ff.2", 3);
    for (int t = 0; t < 5; ++t) rec.probabilities.insert(rec.probabilities.end(), {0.2, 0.5, 0.3});
    const RoutingDistribution d = routing_distribution(trace, {"a", "b", "c"});
    CHECK(d.per_site[0][1] == Catch::Approx(0.5).epsilon(1e-12));
    const RoutingDistribution oracle = one_hot_distribution(d.site_ids, d.expert_ids, 1);
    CHECK(oracle.per_site[0] == std::vector<double>{0.0, 1.0, 0.0});
    const KlResult kl = kl_divergence(d, oracle);
    CHECK(kl.aggregate == Catch::Approx(kl_divergence(d.per_site[0], oracle.per_site[0])));
    CHECK_THROWS_AS(one_hot_distribution(d.site_ids, d.expert_ids, 3), ContractError);
    RoutingDistribution swapped = oracle;
    swapped.expert_ids = {"c", "b", "a"};
    CHECK_THROWS_AS(kl_divergence(d, swapped), ContractError);
}

TEST_CASE("layer names", "[analysis]") {
    CHECK(layer_of("encoder.1.attn.q") == "encoder.1");
    CHECK(layer_of("decoder.0.cross.k") == "decoder.0");
    CHECK(layer_of("plain") == "plain");
}

TEST_CASE("pearson correlation", "[analysis]") {
    const std::vector<double> x{1.0, 2.0, 3.0, 4.0, 5.0};
    std::vector<double> up, down;
    for (double v : x) {
        up.push_back(3.0 * v - 2.0);
        down.push_back(-0.5 * v + 7.0);
    }
    CHECK(*pearson(x, up) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(*pearson(x, down) == Catch::Approx(-1.0).epsilon(1e-12));
    CHECK_FALSE(pearson(x, std::vector<double>(5, 2.0)).has_value());
    CHECK_THROWS_AS(pearson(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0, 2.0}), ContractError);
    CHECK_THROWS_AS(pearson(x, std::vector<double>{1.0, 2.0, 3.0}), ContractError);
}

TEST_CASE("KL errors", "[analysis][errors]") {
    CHECK_THROWS_AS(kl_divergence(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}), ContractError);
    CHECK_THROWS_AS(kl_divergence(std::vector<double>{-0.1, 1.1}, std::vector<double>{0.5, 0.5}), DomainError);
}
