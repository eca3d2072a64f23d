#pragma once

#include "pg/rng.hpp"
#include "pg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace pg::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.values()) x = scale * rng.normal();
    return t;
}

// Builds a scalar loss on a fresh tape from the bound leaves (same order as `leaves`).
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double loss_value(const std::vector<Tensor*>& leaves, const LossFn& f) {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor* t : leaves) vars.push_back(tape.param(*t));
    return f(tape, vars).value().item();
}

// Per leaf, ||analytic - numeric|| / (||analytic|| + ||numeric||) with central
// differences of step h. Returns the worst leaf.
inline double fd_relative_error(const std::vector<Tensor*>& leaves, const LossFn& f, double h = 1e-6) {
    for (Tensor* t : leaves) t->requires_grad = true;
    {
        Tape tape;
        std::vector<Var> vars;
        for (Tensor* t : leaves) vars.push_back(tape.param(*t));
        tape.backward(f(tape, vars));
    }
    double worst = 0.0;
    for (Tensor* t : leaves) {
        const std::vector<double> analytic = t->grad.value_or(std::vector<double>(t->numel(), 0.0));
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < t->numel(); ++i) {
            const double keep = (*t)[i];
            (*t)[i] = keep + h;
            const double up = loss_value(leaves, f);
            (*t)[i] = keep - h;
            const double down = loss_value(leaves, f);
            (*t)[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric) * (analytic[i] - numeric);
            na += analytic[i] * analytic[i];
            nn += numeric * numeric;
        }
        const double denom = std::sqrt(na) + std::sqrt(nn);
        if (denom > 0.0) worst = std::max(worst, std::sqrt(diff) / denom);
    }
    for (Tensor* t : leaves) {
        t->requires_grad = false;
        t->zero_grad();
    }
    return worst;
}

// sum(x * R) for a fixed random R of x's shape: a generic scalar readout.
inline Var readout(Tape& tape, Var x, std::uint64_t seed = 99) {
    Rng rng(seed);
    return sum(mul(x, tape.value(random_tensor(x.shape(), rng))));
}

}  // namespace pg::testing
