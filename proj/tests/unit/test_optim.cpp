#include "pg/error.hpp"
#include "pg/optim.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

using namespace pg;
using Catch::Approx;

TEST_CASE("first AdamW step moves each coordinate by lr against the gradient sign", "[optim]") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    std::vector<double> p{1.0, -2.0, 0.5};
    const std::vector<double> g{0.3, -4.0, 1e-3};
    AdamState st;
    adamw_step(p, g, st, 0.1, cfg);
    // m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
    CHECK(p[0] == Approx(1.0 - 0.1 * 0.3 / (0.3 + 1e-8)).epsilon(1e-14));
    CHECK(p[1] == Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));
    CHECK(p[2] == Approx(0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("two AdamW steps match a hand computation with decoupled decay", "[optim]") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.1;
    std::vector<double> p{2.0};
    AdamState st;
    adamw_step(p, std::vector<double>{1.0}, st, 0.01, cfg);
    adamw_step(p, std::vector<double>{-0.5}, st, 0.01, cfg);

    double x = 2.0, m = 0.0, v = 0.0;
    const double grads[] = {1.0, -0.5};
    for (int t = 1; t <= 2; ++t) {
        const double g = grads[t - 1];
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        x = x * (1 - 0.01 * 0.1) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(p[0] == Approx(x).epsilon(1e-14));
}

TEST_CASE("non-finite gradients are rejected without touching parameters", "[optim]") {
    Tensor a({2}, 1.0), b({2}, 1.0);
    a.grad = std::vector<double>{0.1, 0.1};
    b.grad = std::vector<double>{0.1, std::numeric_limits<double>::quiet_NaN()};
    AdamW opt({&a, &b}, AdamWConfig{});
    CHECK_THROWS_AS(opt.step(0.1), NumericError);
    CHECK(a[0] == 1.0);
    CHECK(b[0] == 1.0);
}

TEST_CASE("warmup then linear decay", "[optim]") {
    // 100 steps, 6% warmup -> 6 warmup steps.
    CHECK(scheduled_lr(1.0, 0.06, 0, 100) == Approx(1.0 / 6.0));
    CHECK(scheduled_lr(1.0, 0.06, 5, 100) == Approx(1.0));
    CHECK(scheduled_lr(1.0, 0.06, 6, 100) == Approx(1.0));
    CHECK(scheduled_lr(1.0, 0.06, 53, 100) == Approx(47.0 / 94.0));
    CHECK(scheduled_lr(1.0, 0.06, 99, 100) == Approx(1.0 / 94.0));
    CHECK(scheduled_lr(1.0, 0.0, 0, 10) == Approx(1.0));
    for (long s = 0; s < 100; ++s) CHECK(scheduled_lr(1.0, 0.06, s, 100) > 0.0);
}

TEST_CASE("size mismatches throw", "[optim][errors]") {
    std::vector<double> p{1.0, 2.0};
    AdamState st;
    CHECK_THROWS_AS(adamw_step(p, std::vector<double>{1.0}, st, 0.1, AdamWConfig{}), DimensionError);
}
