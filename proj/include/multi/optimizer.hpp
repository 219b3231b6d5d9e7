#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "multi/common.hpp"
#include "multi/tensor.hpp"

namespace multi {

// Decoupled weight decay: the decay multiplies the weights directly and
// never flows through the moment estimates. Frozen parameters (no grads)
// are skipped entirely, decay included.
struct OptimState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
    Index step_count = 0;

    struct Moments {
        std::vector<double> m, v;
    };
    std::unordered_map<TensorNode*, Moments> moments;
};

inline void adamw_step(const std::vector<Tensor>& params, OptimState& state) {
    bool any = false;
    for (const auto& p : params) {
        if (p.requires_grad() && !p.grad().empty()) {
            any = true;
            break;
        }
    }
    if (!any) {
        throw ContractError("adamw_step: no populated gradients");
    }
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (const auto& p : params) {
        if (!p.requires_grad() || p.grad().empty()) {
            continue;
        }
        auto& mom = state.moments[p.node()];
        if (mom.m.size() != p.data().size()) {
            mom.m.assign(p.data().size(), 0.0);
            mom.v.assign(p.data().size(), 0.0);
        }
        auto& data = p.data();
        const auto& grad = p.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            data[i] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * data[i]);
        }
    }
}

// Linear warmup to base_lr, then linear decay to zero at total_steps.
struct Schedule {
    Index warmup_steps = 0;
    Index total_steps = 1;
    double base_lr = 1e-4;

    double lr_at(Index step) const {
        if (total_steps < 1 || step < 0) {
            throw ContractError("Schedule: invalid step/total");
        }
        if (warmup_steps > 0 && step < warmup_steps) {
            return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
        }
        if (step >= total_steps) {
            return 0.0;
        }
        const double remaining = static_cast<double>(total_steps - step);
        const double span = static_cast<double>(total_steps - warmup_steps);
        return span <= 0.0 ? base_lr : base_lr * remaining / span;
    }
};

}  // namespace multi
