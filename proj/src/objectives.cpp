#include "mremq/objectives.hpp"

#include <cmath>

namespace mremq {

namespace {

// Shared forward over one module's layer range. Returns node ids of the
// outputs that enter the MREM loss (embedding output first for module 1,
// then every layer output) plus the logits node for the last module.
struct ModuleNodes {
    std::vector<int> outputs;
    int logits = -1;
    int exit_state = -1;  // last hidden state (boundary tensor)
};

ModuleNodes build_module(GraphBuilder<float>& gb, const ModuleView& view, const StepInputs& in,
                         int input_leaf) {
    ModuleNodes out;
    int x;
    if (view.has_embedding) {
        if (!in.tokens) throw ContractError("module 1 requires a token batch");
        x = gb.embed(in.tokens->tokens, in.tokens->batch, in.tokens->len);
        out.outputs.push_back(x);
    } else {
        x = input_leaf;
    }
    for (int l = view.layer_begin; l < view.layer_end; ++l) {
        x = gb.layer(x, l);
        out.outputs.push_back(x);
    }
    out.exit_state = x;
    if (view.has_head) out.logits = gb.head(x);
    return out;
}

ModuleForward run_module(const Model& weights, const QuantizedModel* quant, const ModuleView& view,
                         const StepInputs& in) {
    Tape<float> tape;
    ParamLeaves<float> leaves{&tape};
    GraphBuilder<float> gb(tape, weights, leaves, quant);
    int input_leaf = -1;
    if (!view.has_embedding) {
        const Tensor* state = quant ? in.fhat_in : in.f_in;
        if (!state) throw ContractError("module " + std::to_string(view.index) +
                                        " requires a boundary input state");
        input_leaf = tape.leaf(*state, false);
    }
    const ModuleNodes nodes = build_module(gb, view, in, input_leaf);
    ModuleForward fwd;
    for (int id : nodes.outputs) fwd.outputs.push_back(tape.value(id));
    if (nodes.logits >= 0) {
        fwd.logits = tape.value(nodes.logits);
        fwd.has_logits = true;
    }
    return fwd;
}

}  // namespace

ModuleForward run_module_fp(const Model& fp, const ModuleView& view, const StepInputs& in) {
    return run_module(fp, nullptr, view, in);
}

ModuleForward run_module_quantized(const QuantizedModel& qm, const ModuleView& view,
                                   const StepInputs& in) {
    return run_module(qm.latent, &qm, view, in);
}

ModuleTrainer::ModuleTrainer(const Model& fp, QuantizedModel& qm, ModuleView view, Schedule sched,
                             AdamWConfig opt_cfg, bool teacher_forcing)
    : fp_(fp), qm_(qm), view_(std::move(view)), sched_(sched), opt_(opt_cfg),
      teacher_forcing_(teacher_forcing) {
    sched_.validate();
    for (const auto& name : view_.param_names) trainable_.insert(name);
    for (const auto& site : view_.site_ids) {
        const QuantSpec* spec = qm_.spec_for(site);
        if (spec && spec->enabled() && spec->mode != QuantMode::ternary && spec->learnable)
            trainable_.insert("qspec/" + site);
    }
    for_each_param(qm_.latent,
                   [this](const std::string& name, Tensor& t) { storage_[name] = &t; });
    for (auto& [site, spec] : qm_.specs)
        if (spec.step.numel() > 0) storage_["qspec/" + site] = &spec.step;
}

StepResult ModuleTrainer::step(const StepInputs& in, int t, const ModuleTargets* cached_targets) {
    StepResult res;
    res.lambda = teacher_forcing_ ? lambda_schedule(t, sched_.teacher_forcing_steps) : 0.0;
    res.lr = linear_lr(t, sched_.total_steps, sched_.eta0);

    Tensor mixed;
    const Tensor* quant_input = nullptr;
    if (!view_.has_embedding) {
        if (!in.f_in || !in.fhat_in)
            throw ContractError("module " + std::to_string(view_.index) +
                                " requires paired boundary inputs");
        if (res.lambda > 0.0) {
            mixed = teacher_force(*in.f_in, *in.fhat_in, res.lambda);
            quant_input = &mixed;
        } else {
            quant_input = in.fhat_in;
        }
    }

    Tape<float> tape;

    // Full-precision targets (frozen): either rebuilt here or taken from the
    // per-module cache.
    std::vector<int> target_ids;
    int target_logits = -1;
    if (cached_targets) {
        for (const Tensor& tt : cached_targets->outputs) target_ids.push_back(tape.leaf(tt, false));
        if (view_.has_head) {
            if (!cached_targets->has_logits)
                throw ContractError("cached targets for the last module need logits");
            target_logits = tape.leaf(cached_targets->logits, false);
        }
        res.f_out = cached_targets->outputs.back();
    } else {
        ParamLeaves<float> fp_leaves{&tape};
        GraphBuilder<float> fp_gb(tape, fp_, fp_leaves);
        int fp_input = view_.has_embedding ? -1 : tape.leaf(*in.f_in, false);
        const ModuleNodes fp_nodes = build_module(fp_gb, view_, in, fp_input);
        target_ids = fp_nodes.outputs;
        target_logits = fp_nodes.logits;
        res.f_out = tape.value(fp_nodes.exit_state);
    }

    // Quantized module (trainable).
    ParamLeaves<float> q_leaves{&tape};
    q_leaves.trainable = [this](const std::string& name) { return trainable_.count(name) > 0; };
    GraphBuilder<float> q_gb(tape, qm_.latent, q_leaves, &qm_);
    int q_input = view_.has_embedding ? -1 : tape.leaf(*quant_input, false);
    const ModuleNodes q_nodes = build_module(q_gb, view_, in, q_input);
    res.fhat_out = tape.value(q_nodes.exit_state);

    if (q_nodes.outputs.size() != target_ids.size())
        throw ContractError("module output count mismatch against targets");
    int loss_id = -1;
    for (size_t i = 0; i < q_nodes.outputs.size(); ++i) {
        const int term = tape.mse(q_nodes.outputs[i], target_ids[i]);
        loss_id = loss_id < 0 ? term : tape.add(loss_id, term);
    }
    if (view_.has_head) {
        const int term = tape.mse(q_nodes.logits, target_logits);
        loss_id = tape.add(loss_id, term);
    }
    res.loss = tape.value(loss_id).v[0];
    if (!std::isfinite(res.loss))
        throw TrainingError("module " + std::to_string(view_.index) + " loss diverged at step " +
                            std::to_string(t));

    tape.backward(loss_id);
    for (const std::string& name : trainable_) {
        auto it = q_leaves.ids.find(name);
        if (it == q_leaves.ids.end()) continue;  // site disabled or unused this step
        const Tensor* g = tape.grad(it->second);
        if (!g) continue;
        Tensor* param = storage_.at(name);
        opt_.update(name, *param, *g, res.lr);
        if (name.rfind("qspec/", 0) == 0) clamp_steps_positive(*param);
    }
    return res;
}

}  // namespace mremq
