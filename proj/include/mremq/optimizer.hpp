#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "mremq/error.hpp"
#include "mremq/tensor.hpp"

namespace mremq {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// eta0 * (1 - t/T)
inline double linear_lr(int64_t t, int64_t total, double eta0) {
    if (t < 0 || t > total) throw ContractError("linear_lr: t must lie in [0, T]");
    return eta0 * (1.0 - static_cast<double>(t) / static_cast<double>(total));
}

// Decoupled-weight-decay Adam with bias correction. State is keyed by
// parameter name; each parameter's moments live exactly as long as this
// optimizer instance.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void update(const std::string& name, Tensor& param, const Tensor& grad, double eta) {
        require_same_shape(param, grad, "adamw_update");
        for (float g : grad.v)
            if (!std::isfinite(g))
                throw TrainingError("non-finite gradient for parameter '" + name + "'");
        State& s = state_[name];
        if (s.m.numel() == 0) {
            s.m = Tensor(param.shape);
            s.v = Tensor(param.shape);
        }
        ++s.steps;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.steps));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.steps));
        const float b1 = static_cast<float>(cfg_.beta1);
        const float b2 = static_cast<float>(cfg_.beta2);
        for (int64_t i = 0; i < param.numel(); ++i) {
            const float g = grad.v[i];
            s.m.v[i] = b1 * s.m.v[i] + (1.0f - b1) * g;
            s.v.v[i] = b2 * s.v.v[i] + (1.0f - b2) * g * g;
            const double mhat = s.m.v[i] / bc1;
            const double vhat = s.v.v[i] / bc2;
            const double delta = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * param.v[i];
            param.v[i] = static_cast<float>(param.v[i] - eta * delta);
        }
    }

    int64_t steps(const std::string& name) const {
        auto it = state_.find(name);
        return it == state_.end() ? 0 : it->second.steps;
    }

private:
    struct State {
        Tensor m, v;
        int64_t steps = 0;
    };
    AdamWConfig cfg_;
    std::map<std::string, State> state_;
};

}  // namespace mremq
