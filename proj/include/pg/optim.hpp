#pragma once

#include "pg/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace pg {

struct AdamWConfig {
    double lr = 5e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

// One decoupled-weight-decay Adam update of `param` in place. Throws NumericError
// (leaving param and state untouched) if any gradient entry is non-finite.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamState& state, double lr,
                const AdamWConfig& cfg);

// Linear warmup over ceil(warmup_ratio * total) steps, then linear decay to zero.
double scheduled_lr(double base_lr, double warmup_ratio, long step, long total_steps);

// AdamW over a fixed list of tensors, reading each tensor's .grad.
class AdamW {
public:
    AdamW(std::vector<Tensor*> params, AdamWConfig cfg);

    void step(double lr);
    void zero_grad();

    [[nodiscard]] const AdamWConfig& config() const { return cfg_; }

private:
    std::vector<Tensor*> params_;
    std::vector<AdamState> states_;
    AdamWConfig cfg_;
};

}  // namespace pg
