#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "mremq/optimizer.hpp"
#include "mremq/partition.hpp"
#include "mremq/quantizers.hpp"
#include "mremq/transformer.hpp"

namespace mremq {

struct Schedule {
    int total_steps = 2000;           // T
    int teacher_forcing_steps = 800;  // T0
    double eta0 = 1e-4;

    void validate() const {
        if (teacher_forcing_steps < 0 || teacher_forcing_steps > total_steps)
            throw ContractError("schedule: need 0 <= T0 <= T");
        if (!(eta0 > 0)) throw ContractError("schedule: eta0 must be positive");
    }
};

// lambda_t = max(1 - t/T0, 0); a horizon of zero disables the correction.
inline double lambda_schedule(int64_t t, int64_t t0_steps) {
    if (t < 0) throw ContractError("lambda_schedule: t must be non-negative");
    if (t0_steps <= 0) return 0.0;
    return std::max(1.0 - static_cast<double>(t) / static_cast<double>(t0_steps), 0.0);
}

// Convex mix lambda*f + (1-lambda)*fhat, computed as fhat + lambda*(f - fhat)
// so equal inputs pass through bit-exactly; the endpoints return their
// argument unchanged.
template <class T>
TensorT<T> teacher_force(const TensorT<T>& f, const TensorT<T>& fhat, double lambda) {
    require_same_shape(f, fhat, "teacher_force");
    if (lambda < 0.0 || lambda > 1.0)
        throw ContractError("teacher_force: lambda must lie in [0,1], got " +
                            std::to_string(lambda));
    if (lambda == 1.0) return f;
    if (lambda == 0.0) return fhat;
    TensorT<T> out(f.shape);
    const T lam = static_cast<T>(lambda);
    for (int64_t i = 0; i < f.numel(); ++i) out.v[i] = fhat.v[i] + lam * (f.v[i] - fhat.v[i]);
    return out;
}

// Mean squared error between one matmul output pair.
template <class T>
T rem_loss(const TensorT<T>& quant_out, const TensorT<T>& fp_out) {
    require_same_shape(quant_out, fp_out, "rem_loss");
    T acc = T(0);
    for (int64_t i = 0; i < quant_out.numel(); ++i) {
        const T d = quant_out.v[i] - fp_out.v[i];
        acc += d * d;
    }
    return acc / static_cast<T>(quant_out.numel());
}

// Sum of per-tensor MSE over a module's output list (embedding output and
// logits ride along in the lists for the first and last module).
template <class T>
T mrem_loss(const std::vector<TensorT<T>>& quant_outs, const std::vector<TensorT<T>>& fp_outs) {
    if (quant_outs.size() != fp_outs.size())
        throw ContractError("mrem_loss: list length mismatch: " +
                            std::to_string(quant_outs.size()) + " vs " +
                            std::to_string(fp_outs.size()));
    T acc = T(0);
    for (size_t i = 0; i < quant_outs.size(); ++i) acc += rem_loss(quant_outs[i], fp_outs[i]);
    return acc;
}

// ---- single-module training step (float path) ----

struct TokenBatch {
    std::vector<int32_t> tokens;  // batch*len, row-major
    int batch = 0;
    int len = 0;
};

// Inputs for one step: module 1 consumes tokens, later modules consume the
// paired boundary states.
struct StepInputs {
    const TokenBatch* tokens = nullptr;
    const Tensor* f_in = nullptr;
    const Tensor* fhat_in = nullptr;
};

// Precomputed full-precision targets for a module over one batch (used by the
// sequential trainer, where the frozen targets are cached per module).
struct ModuleTargets {
    std::vector<Tensor> outputs;  // embedding output first when present, then f_l per layer
    Tensor logits;                // only for the last module
    bool has_logits = false;
};

struct StepResult {
    Tensor f_out;     // FP output at the module's exit boundary
    Tensor fhat_out;  // quantized output computed from the (possibly mixed) input
    double loss = 0.0;
    double lambda = 0.0;
    double lr = 0.0;
};

// Plain (no-gradient) module forward for cache advance and evaluation.
struct ModuleForward {
    std::vector<Tensor> outputs;  // per-layer outputs (embedding output first for module 1)
    Tensor logits;
    bool has_logits = false;
};

ModuleForward run_module_fp(const Model& fp, const ModuleView& view, const StepInputs& in);
ModuleForward run_module_quantized(const QuantizedModel& qm, const ModuleView& view,
                                   const StepInputs& in);

// Owns one module's optimization: Alg. 2's MREM step with annealed teacher
// forcing. Updates only the module's parameters and step sizes.
class ModuleTrainer {
public:
    ModuleTrainer(const Model& fp, QuantizedModel& qm, ModuleView view, Schedule sched,
                  AdamWConfig opt_cfg, bool teacher_forcing);

    // One optimizer step at time t (0-based). When cached targets are given,
    // the full-precision subgraph is skipped and f_out is taken from them.
    StepResult step(const StepInputs& in, int t, const ModuleTargets* cached_targets = nullptr);

    const ModuleView& view() const { return view_; }
    const std::set<std::string>& trainable() const { return trainable_; }

private:
    const Model& fp_;
    QuantizedModel& qm_;
    ModuleView view_;
    Schedule sched_;
    AdamW opt_;
    bool teacher_forcing_;
    std::set<std::string> trainable_;
    std::map<std::string, Tensor*> storage_;  // name -> live parameter tensor
};

// Clamp a step-size tensor to the positive floor after an optimizer update.
inline void clamp_steps_positive(Tensor& step) {
    for (auto& s : step.v)
        if (s < static_cast<float>(kStepFloor)) s = static_cast<float>(kStepFloor);
}

}  // namespace mremq
