#include "pg/optim.hpp"

#include "pg/error.hpp"

#include <algorithm>
#include <cmath>

namespace pg {

void adamw_step(std::span<double> param, std::span<const double> grad, AdamState& state, double lr,
                const AdamWConfig& cfg) {
    if (param.size() != grad.size()) throw DimensionError("adamw_step: parameter and gradient sizes differ");
    if (state.m.empty()) {
        state.m.assign(param.size(), 0.0);
        state.v.assign(param.size(), 0.0);
    }
    if (state.m.size() != param.size() || state.v.size() != param.size()) {
        throw DimensionError("adamw_step: optimizer state does not match parameter size");
    }
    for (double g : grad) {
        if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient, step rejected");
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        param[i] = param[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

double scheduled_lr(double base_lr, double warmup_ratio, long step, long total_steps) {
    if (total_steps <= 0) return base_lr;
    const long warmup = static_cast<long>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const long remaining = total_steps - warmup;
    if (remaining <= 0) return base_lr;
    const double frac = static_cast<double>(total_steps - step) / static_cast<double>(remaining);
    return base_lr * std::clamp(frac, 0.0, 1.0);
}

AdamW::AdamW(std::vector<Tensor*> params, AdamWConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {}

void AdamW::step(double lr) {
    // Validate everything first so a rejected step leaves all parameters untouched.
    for (Tensor* p : params_) {
        if (!p->grad) continue;
        for (double g : *p->grad) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient, optimizer step rejected");
        }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor* p = params_[i];
        if (!p->grad) continue;
        adamw_step(p->data(), *p->grad, states_[i], lr, cfg_);
    }
}

void AdamW::zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
}

}  // namespace pg
