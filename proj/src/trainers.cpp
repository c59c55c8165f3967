#include "mremq/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "mremq/partition.hpp"
#include "mremq/rng.hpp"

namespace mremq {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <class Fn>
void for_chunks(int total, int chunk, Fn&& fn) {
    for (int start = 0; start < total; start += chunk) fn(start, std::min(chunk, total - start));
}

Tensor alloc_rows_like(const Tensor& chunk, int total_rows) {
    std::vector<int> shape = chunk.shape;
    shape[0] = total_rows;
    return Tensor(shape);
}

void write_rows(Tensor& dst, const Tensor& chunk, int row_offset) {
    const int64_t row_elems = chunk.numel() / chunk.dim(0);
    std::copy(chunk.v.begin(), chunk.v.end(),
              dst.v.begin() + static_cast<int64_t>(row_offset) * row_elems);
}

Tensor gather_rows(const Tensor& all, const std::vector<int>& idx) {
    std::vector<int> shape = all.shape;
    shape[0] = static_cast<int>(idx.size());
    Tensor out(shape);
    const int64_t row = all.numel() / all.dim(0);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(all.v.begin() + idx[i] * row, all.v.begin() + (idx[i] + 1) * row,
                  out.v.begin() + static_cast<int64_t>(i) * row);
    return out;
}

TokenBatch slice_tokens(const std::vector<int32_t>& tokens, int len, int start, int count) {
    TokenBatch b;
    b.batch = count;
    b.len = len;
    b.tokens.assign(tokens.begin() + static_cast<size_t>(start) * len,
                    tokens.begin() + static_cast<size_t>(start + count) * len);
    return b;
}

TokenBatch gather_tokens(const std::vector<int32_t>& tokens, int len, const std::vector<int>& idx) {
    TokenBatch b;
    b.batch = static_cast<int>(idx.size());
    b.len = len;
    b.tokens.resize(idx.size() * static_cast<size_t>(len));
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(tokens.begin() + static_cast<size_t>(idx[i]) * len,
                  tokens.begin() + static_cast<size_t>(idx[i] + 1) * len,
                  b.tokens.begin() + i * static_cast<size_t>(len));
    return b;
}

std::vector<int> sample_indices(Rng& rng, int population, int count) {
    std::vector<int> idx(count);
    for (auto& i : idx) i = rng.next_int(0, population);
    return idx;
}

constexpr int kChunk = 64;

// Full-precision module outputs over an entire calibration set.
struct ModuleTargetsAll {
    std::vector<Tensor> outputs;
    Tensor logits;
    bool has_logits = false;
};

ModuleTargetsAll compute_fp_targets(const Model& fp, const ModuleView& view,
                                    const CalibrationSet& calib, const Tensor* fp_states) {
    ModuleTargetsAll all;
    for_chunks(calib.size, kChunk, [&](int start, int count) {
        StepInputs in;
        TokenBatch tb;
        Tensor f_in;
        if (view.has_embedding) {
            tb = slice_tokens(calib.tokens, calib.len, start, count);
            in.tokens = &tb;
        } else {
            std::vector<int> idx(count);
            for (int i = 0; i < count; ++i) idx[i] = start + i;
            f_in = gather_rows(*fp_states, idx);
            in.f_in = &f_in;
        }
        const ModuleForward fwd = run_module_fp(fp, view, in);
        if (all.outputs.empty()) {
            for (const Tensor& t : fwd.outputs) all.outputs.push_back(alloc_rows_like(t, calib.size));
            if (fwd.has_logits) {
                all.logits = alloc_rows_like(fwd.logits, calib.size);
                all.has_logits = true;
            }
        }
        for (size_t i = 0; i < fwd.outputs.size(); ++i) write_rows(all.outputs[i], fwd.outputs[i], start);
        if (fwd.has_logits) write_rows(all.logits, fwd.logits, start);
    });
    return all;
}

ModuleTargets gather_targets(const ModuleTargetsAll& all, const std::vector<int>& idx) {
    ModuleTargets t;
    for (const Tensor& o : all.outputs) t.outputs.push_back(gather_rows(o, idx));
    if (all.has_logits) {
        t.logits = gather_rows(all.logits, idx);
        t.has_logits = true;
    }
    return t;
}

// Advance the quantized boundary cache through one trained module.
Tensor advance_quantized(const QuantizedModel& qm, const ModuleView& view,
                         const CalibrationSet& calib, const Tensor* q_states) {
    Tensor out;
    for_chunks(calib.size, kChunk, [&](int start, int count) {
        StepInputs in;
        TokenBatch tb;
        Tensor fhat_in;
        if (view.has_embedding) {
            tb = slice_tokens(calib.tokens, calib.len, start, count);
            in.tokens = &tb;
        } else {
            std::vector<int> idx(count);
            for (int i = 0; i < count; ++i) idx[i] = start + i;
            fhat_in = gather_rows(*q_states, idx);
            in.fhat_in = &fhat_in;
        }
        const ModuleForward fwd = run_module_quantized(qm, view, in);
        const Tensor& last = fwd.outputs.back();
        if (out.numel() == 0) out = alloc_rows_like(last, calib.size);
        write_rows(out, last, start);
    });
    return out;
}

}  // namespace

TokenBatch probe_batch(const CalibrationSet& calib, const TrainConfig& cfg) {
    Rng rng(derive_seed(cfg.seed, "probe"));
    return draw_batch(calib, std::min(cfg.batch_size, calib.size), rng);
}

QuantizedModel build_quantized_for(const Model& fp, const TrainConfig& cfg,
                                   const TokenBatch& probe) {
    return make_quantized_model(fp, cfg.bits, cfg.pcq, probe.tokens, probe.batch, probe.len);
}

// ---- full-precision fine-tuning ----

Model train_fp(const ModelConfig& cfg, const Dataset& data, const FpTrainConfig& tc,
               MetricsSink* sink) {
    Model model = make_model_random<float>(cfg, tc.seed);
    AdamW opt;
    Rng rng(derive_seed(tc.seed, "fp-batch"));
    const auto start = Clock::now();
    std::map<std::string, Tensor*> storage;
    for_each_param(model, [&storage](const std::string& name, Tensor& t) { storage[name] = &t; });
    for (int t = 0; t < tc.steps; ++t) {
        std::vector<int32_t> labels;
        const TokenBatch tb = draw_batch(data.train, tc.batch_size, rng, &labels);
        Tape<float> tape;
        ParamLeaves<float> leaves{&tape};
        leaves.trainable = [](const std::string&) { return true; };
        GraphBuilder<float> gb(tape, model, leaves);
        int x = gb.embed(tb.tokens, tb.batch, tb.len);
        for (int l = 0; l < cfg.layers; ++l) x = gb.layer(x, l);
        const int loss_id = tape.softmax_cross_entropy(gb.head(x), labels);
        const double loss = tape.value(loss_id).v[0];
        if (!std::isfinite(loss))
            throw TrainingError("full-precision training diverged at step " + std::to_string(t));
        tape.backward(loss_id);
        const double eta = linear_lr(t, tc.steps, tc.lr);
        for (auto& [name, id] : leaves.ids) {
            const Tensor* g = tape.grad(id);
            if (g) opt.update(name, *storage.at(name), *g, eta);
        }
        if (sink) sink->push({t + 1, t, 0, loss, 0.0, eta, ms_since(start)});
    }
    return model;
}

// ---- greedy REM ----

namespace {

struct RemUnit {
    enum class Kind { embed, weight, scores, ctx };
    Kind kind;
    int layer = -1;
    std::string weight_site;
    std::vector<std::string> act_sites;  // operand sites in visit order
};

std::vector<RemUnit> rem_units(const ModelConfig& cfg) {
    std::vector<RemUnit> units;
    units.push_back({RemUnit::Kind::embed, -1, "embed/table", {}});
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + "/";
        units.push_back({RemUnit::Kind::weight, l, p + "w_q", {p + "a_in"}});
        units.push_back({RemUnit::Kind::weight, l, p + "w_k", {p + "a_in"}});
        units.push_back({RemUnit::Kind::weight, l, p + "w_v", {p + "a_in"}});
        units.push_back({RemUnit::Kind::scores, l, "", {p + "a_q", p + "a_k"}});
        units.push_back({RemUnit::Kind::ctx, l, "", {p + "a_probs", p + "a_v"}});
        units.push_back({RemUnit::Kind::weight, l, p + "w_o", {p + "a_ctx"}});
        units.push_back({RemUnit::Kind::weight, l, p + "w_1", {p + "a_ffn_in"}});
        units.push_back({RemUnit::Kind::weight, l, p + "w_2", {p + "a_gelu"}});
    }
    return units;
}

// Pre-quantization activations at the requested sites while running one layer
// from the cached boundary states.
std::map<std::string, Tensor> capture_layer_sites(const Model& weights, const QuantizedModel* quant,
                                                  int layer, const Tensor& states,
                                                  const std::vector<std::string>& wanted) {
    std::map<std::string, Tensor> out;
    const int total = states.dim(0);
    for_chunks(total, kChunk, [&](int start, int count) {
        std::vector<int> idx(count);
        for (int i = 0; i < count; ++i) idx[i] = start + i;
        const Tensor chunk = gather_rows(states, idx);
        Tape<float> tape;
        ParamLeaves<float> leaves{&tape};
        std::map<std::string, Tensor> cap;
        ForwardHooks<float> hooks;
        hooks.capture = &cap;
        GraphBuilder<float> gb(tape, weights, leaves, quant, hooks);
        gb.layer(tape.leaf(chunk, false), layer);
        for (const std::string& site : wanted) {
            const Tensor& c = cap.at(site);
            if (out.find(site) == out.end()) out.emplace(site, alloc_rows_like(c, total));
            write_rows(out.at(site), c, start);
        }
    });
    return out;
}

Tensor embed_outputs(const Model& weights, const QuantizedModel* quant,
                     const CalibrationSet& calib) {
    Tensor out;
    for_chunks(calib.size, kChunk, [&](int start, int count) {
        const TokenBatch tb = slice_tokens(calib.tokens, calib.len, start, count);
        Tape<float> tape;
        ParamLeaves<float> leaves{&tape};
        GraphBuilder<float> gb(tape, weights, leaves, quant);
        const Tensor& val = tape.value(gb.embed(tb.tokens, tb.batch, tb.len));
        if (out.numel() == 0) out = alloc_rows_like(val, calib.size);
        write_rows(out, val, start);
    });
    return out;
}

Tensor advance_one_layer(const Model& weights, const QuantizedModel* quant, int layer,
                         const Tensor& states) {
    Tensor out;
    const int total = states.dim(0);
    for_chunks(total, kChunk, [&](int start, int count) {
        std::vector<int> idx(count);
        for (int i = 0; i < count; ++i) idx[i] = start + i;
        const Tensor chunk = gather_rows(states, idx);
        Tape<float> tape;
        ParamLeaves<float> leaves{&tape};
        GraphBuilder<float> gb(tape, weights, leaves, quant);
        const Tensor& val = tape.value(gb.layer(tape.leaf(chunk, false), layer));
        if (out.numel() == 0) out = alloc_rows_like(val, total);
        write_rows(out, val, start);
    });
    return out;
}

// Batched matmul on plain tensors via a scratch tape.
Tensor t_matmul_nt(const Tensor& a, const Tensor& b) {
    Tape<float> tape;
    return tape.value(tape.matmul_nt(tape.leaf(a, false), tape.leaf(b, false)));
}

Tensor t_matmul(const Tensor& a, const Tensor& b) {
    Tape<float> tape;
    return tape.value(tape.matmul(tape.leaf(a, false), tape.leaf(b, false)));
}

Tensor& latent_weight(QuantizedModel& qm, const std::string& site) {
    Model& m = qm.latent;
    if (site == "embed/table") return m.embedding;
    // "layer<l>/w_x"
    const size_t slash = site.find('/');
    const int l = std::stoi(site.substr(5, slash - 5));
    const std::string leaf = site.substr(slash + 1);
    auto& lw = m.layers[l];
    if (leaf == "w_q") return lw.w_q;
    if (leaf == "w_k") return lw.w_k;
    if (leaf == "w_v") return lw.w_v;
    if (leaf == "w_o") return lw.w_o;
    if (leaf == "w_1") return lw.w_1;
    if (leaf == "w_2") return lw.w_2;
    throw ContractError("unknown weight site: " + site);
}

const Tensor& fp_weight(const Model& m, const std::string& site) {
    if (site == "embed/table") return m.embedding;
    const size_t slash = site.find('/');
    const int l = std::stoi(site.substr(5, slash - 5));
    const std::string leaf = site.substr(slash + 1);
    const auto& lw = m.layers[l];
    if (leaf == "w_q") return lw.w_q;
    if (leaf == "w_k") return lw.w_k;
    if (leaf == "w_v") return lw.w_v;
    if (leaf == "w_o") return lw.w_o;
    if (leaf == "w_1") return lw.w_1;
    if (leaf == "w_2") return lw.w_2;
    throw ContractError("unknown weight site: " + site);
}

}  // namespace

std::vector<std::string> rem_site_visit_order(const ModelConfig& cfg) {
    std::vector<std::string> order;
    for (const RemUnit& u : rem_units(cfg)) {
        if (u.kind == RemUnit::Kind::embed) {
            order.push_back(u.weight_site);
            continue;
        }
        // a weight unit quantizes its input activation first, then the weight
        if (u.kind == RemUnit::Kind::weight) {
            order.push_back(u.act_sites[0]);
            order.push_back(u.weight_site);
        } else {
            for (const auto& s : u.act_sites) order.push_back(s);
        }
    }
    // a_in feeds the three QKV units; only its first visit counts
    std::vector<std::string> dedup;
    for (const auto& s : order)
        if (std::find(dedup.begin(), dedup.end(), s) == dedup.end()) dedup.push_back(s);
    return dedup;
}

QuantizedModel train_rem(const Model& fp, const CalibrationSet& calib, const TrainConfig& cfg,
                         MetricsSink* sink) {
    cfg.validate();
    QuantizedModel qm = build_quantized_for(fp, cfg, probe_batch(calib, cfg));
    const auto start = Clock::now();
    const std::vector<RemUnit> units = rem_units(fp.cfg);

    // boundary caches at the current layer's entrance
    Tensor fp_states, q_states;
    int current_layer = -1;  // -1: embedding not yet advanced
    int64_t tick = 0;

    Rng batch_rng(derive_seed(cfg.seed, "rem-batch"));

    for (size_t u = 0; u < units.size(); ++u) {
        const RemUnit& unit = units[u];
        const int unit_index = static_cast<int>(u) + 1;

        // advance boundary caches when the previous layer is fully trained
        while (current_layer < unit.layer) {
            if (current_layer == -1) {
                fp_states = embed_outputs(fp, nullptr, calib);
                q_states = embed_outputs(qm.latent, &qm, calib);
            } else {
                fp_states = advance_one_layer(fp, nullptr, current_layer, fp_states);
                q_states = advance_one_layer(qm.latent, &qm, current_layer, q_states);
            }
            ++current_layer;
        }

        // trainable set for this unit
        std::set<std::string> trainable;
        Tensor* weight_storage = nullptr;
        const QuantSpec* wspec = nullptr;
        if (!unit.weight_site.empty()) {
            wspec = qm.spec_for(unit.weight_site);
            if (wspec && wspec->enabled()) {
                trainable.insert(unit.weight_site);
                weight_storage = &latent_weight(qm, unit.weight_site);
                if (wspec->mode != QuantMode::ternary) trainable.insert("qspec/" + unit.weight_site);
            }
        }
        std::vector<const QuantSpec*> aspecs;
        for (const std::string& site : unit.act_sites) {
            const QuantSpec* s = qm.spec_for(site);
            aspecs.push_back(s);
            if (s && s->enabled()) trainable.insert("qspec/" + site);
        }
        if (trainable.empty()) continue;  // fully disabled unit

        // operand/target caches over the calibration set
        Tensor op_q_a, op_q_b, target;
        if (unit.kind == RemUnit::Kind::embed) {
            target = embed_outputs(fp, nullptr, calib);
        } else {
            auto q_ops = capture_layer_sites(qm.latent, &qm, unit.layer, q_states, unit.act_sites);
            auto fp_ops = capture_layer_sites(fp, nullptr, unit.layer, fp_states, unit.act_sites);
            op_q_a = std::move(q_ops.at(unit.act_sites[0]));
            if (unit.act_sites.size() > 1) op_q_b = std::move(q_ops.at(unit.act_sites[1]));
            if (unit.kind == RemUnit::Kind::weight) {
                target = t_matmul_nt(fp_ops.at(unit.act_sites[0]), fp_weight(fp, unit.weight_site));
            } else if (unit.kind == RemUnit::Kind::scores) {
                target = t_matmul_nt(fp_ops.at(unit.act_sites[0]), fp_ops.at(unit.act_sites[1]));
            } else {
                target = t_matmul(fp_ops.at(unit.act_sites[0]), fp_ops.at(unit.act_sites[1]));
            }
        }

        AdamW opt;
        for (int t = 0; t < cfg.rem_steps; ++t) {
            const std::vector<int> idx = sample_indices(batch_rng, calib.size, cfg.batch_size);
            Tape<float> tape;
            std::map<std::string, int> step_leaves;
            auto act_operand = [&](int raw, size_t which) {
                const QuantSpec* s = aspecs.empty() ? nullptr : aspecs[which];
                if (!s || !s->enabled()) return raw;
                const int sid = tape.leaf(s->step, true);
                step_leaves["qspec/" + unit.act_sites[which]] = sid;
                return quantize_node(tape, raw, sid, *s);
            };

            int pred;
            if (unit.kind == RemUnit::Kind::embed) {
                const TokenBatch tb = gather_tokens(calib.tokens, calib.len, idx);
                int w = tape.leaf(qm.latent.embedding, true);
                step_leaves[unit.weight_site] = w;
                int wq = w;
                if (wspec->mode == QuantMode::ternary) {
                    wq = ternarize_node(tape, w, wspec->granularity == Granularity::per_channel);
                } else {
                    const int sid = tape.leaf(wspec->step, true);
                    step_leaves["qspec/" + unit.weight_site] = sid;
                    wq = quantize_node(tape, w, sid, *wspec);
                }
                const int emb = tape.embed_rows(wq, tb.tokens, tb.batch, tb.len);
                pred = tape.add_rows_broadcast(emb, tape.leaf(qm.latent.positional, false));
            } else if (unit.kind == RemUnit::Kind::weight) {
                const int x = act_operand(tape.leaf(gather_rows(op_q_a, idx), false), 0);
                int w = tape.leaf(*weight_storage, true);
                step_leaves[unit.weight_site] = w;
                int wq = w;
                if (wspec->mode == QuantMode::ternary) {
                    wq = ternarize_node(tape, w, wspec->granularity == Granularity::per_channel);
                } else {
                    const int sid = tape.leaf(wspec->step, true);
                    step_leaves["qspec/" + unit.weight_site] = sid;
                    wq = quantize_node(tape, w, sid, *wspec);
                }
                pred = tape.matmul_nt(x, wq);
            } else {
                const int a = act_operand(tape.leaf(gather_rows(op_q_a, idx), false), 0);
                const int b = act_operand(tape.leaf(gather_rows(op_q_b, idx), false), 1);
                pred = unit.kind == RemUnit::Kind::scores ? tape.matmul_nt(a, b) : tape.matmul(a, b);
            }

            const int loss_id = tape.mse(pred, tape.leaf(gather_rows(target, idx), false));
            const double loss = tape.value(loss_id).v[0];
            if (!std::isfinite(loss))
                throw TrainingError("REM unit " + std::to_string(unit_index) +
                                    " loss diverged at step " + std::to_string(t));
            tape.backward(loss_id);
            const double eta = linear_lr(t, cfg.rem_steps, cfg.lr);
            for (const std::string& name : trainable) {
                auto it = step_leaves.find(name);
                if (it == step_leaves.end()) continue;
                const Tensor* g = tape.grad(it->second);
                if (!g) continue;
                Tensor* storage;
                if (name.rfind("qspec/", 0) == 0)
                    storage = &qm.specs.at(name.substr(6)).step;
                else
                    storage = weight_storage;
                opt.update(name, *storage, *g, eta);
                if (name.rfind("qspec/", 0) == 0) clamp_steps_positive(*storage);
            }
            if (sink) sink->push({++tick, t, unit_index, loss, 0.0, eta, ms_since(start)});
        }
    }
    return qm;
}

// ---- sequential MREM ----

QuantizedModel train_mrem_s(const Model& fp, const CalibrationSet& calib, const TrainConfig& cfg,
                            MetricsSink* sink) {
    cfg.validate();
    QuantizedModel qm = build_quantized_for(fp, cfg, probe_batch(calib, cfg));
    const Partition part = partition_layers(fp.cfg.layers, cfg.modules);
    const Schedule sched{cfg.steps, cfg.teacher_forcing_horizon(), cfg.lr};
    const auto start = Clock::now();

    Tensor fp_states, q_states;
    int64_t tick = 0;
    for (int n = 1; n <= part.modules(); ++n) {
        const ModuleView view = module_view(fp.cfg, part, n);
        ModuleTrainer trainer(fp, qm, view, sched, AdamWConfig{}, cfg.teacher_forcing);
        const ModuleTargetsAll targets =
            compute_fp_targets(fp, view, calib, view.has_embedding ? nullptr : &fp_states);
        Rng batch_rng(derive_seed(cfg.seed, "mrem-s-batch", static_cast<uint64_t>(n)));
        for (int t = 0; t < cfg.steps; ++t) {
            const std::vector<int> idx = sample_indices(batch_rng, calib.size, cfg.batch_size);
            const ModuleTargets batch_targets = gather_targets(targets, idx);
            StepInputs in;
            TokenBatch tb;
            Tensor f_in, fhat_in;
            if (view.has_embedding) {
                tb = gather_tokens(calib.tokens, calib.len, idx);
                in.tokens = &tb;
            } else {
                f_in = gather_rows(fp_states, idx);
                fhat_in = gather_rows(q_states, idx);
                in.f_in = &f_in;
                in.fhat_in = &fhat_in;
            }
            const StepResult res = trainer.step(in, t, &batch_targets);
            if (sink) sink->push({++tick, t, n, res.loss, res.lambda, res.lr, ms_since(start)});
        }
        if (n < part.modules()) {
            fp_states = targets.outputs.back();
            q_states = advance_quantized(qm, view, calib, view.has_embedding ? nullptr : &q_states);
        }
    }
    return qm;
}

// ---- QAT ----

QuantizedModel train_qat(const Model& fp, const Dataset& data, const TrainConfig& cfg,
                         MetricsSink* sink) {
    cfg.validate();
    Rng probe_rng(derive_seed(cfg.seed, "probe"));
    const TokenBatch probe =
        draw_batch(data.train, std::min(cfg.batch_size, data.train.num), probe_rng);
    QuantizedModel qm = build_quantized_for(fp, cfg, probe);
    const auto start = Clock::now();

    std::set<std::string> trainable;
    std::map<std::string, Tensor*> storage;
    for_each_param(qm.latent, [&](const std::string& name, Tensor& t) {
        trainable.insert(name);
        storage[name] = &t;
    });
    for (auto& [site, spec] : qm.specs) {
        if (spec.enabled() && spec.mode != QuantMode::ternary && spec.learnable) {
            trainable.insert("qspec/" + site);
            storage["qspec/" + site] = &spec.step;
        }
    }

    AdamW opt;
    Rng batch_rng(derive_seed(cfg.seed, "qat-batch"));
    for (int t = 0; t < cfg.qat_steps; ++t) {
        const TokenBatch tb = draw_batch(data.train, cfg.batch_size, batch_rng);
        Tape<float> tape;
        ParamLeaves<float> fp_leaves{&tape};
        GraphBuilder<float> fp_gb(tape, fp, fp_leaves);
        int xf = fp_gb.embed(tb.tokens, tb.batch, tb.len);
        for (int l = 0; l < fp.cfg.layers; ++l) xf = fp_gb.layer(xf, l);
        const int logits_fp = fp_gb.head(xf);

        ParamLeaves<float> q_leaves{&tape};
        q_leaves.trainable = [&](const std::string& name) { return trainable.count(name) > 0; };
        GraphBuilder<float> q_gb(tape, qm.latent, q_leaves, &qm);
        int xq = q_gb.embed(tb.tokens, tb.batch, tb.len);
        for (int l = 0; l < fp.cfg.layers; ++l) xq = q_gb.layer(xq, l);
        const int logits_q = q_gb.head(xq);

        const int loss_id = tape.mse(logits_q, logits_fp);
        const double loss = tape.value(loss_id).v[0];
        if (!std::isfinite(loss))
            throw TrainingError("QAT diverged at step " + std::to_string(t));
        tape.backward(loss_id);
        const double eta = linear_lr(t, cfg.qat_steps, cfg.lr);
        for (auto& [name, id] : q_leaves.ids) {
            if (!trainable.count(name)) continue;
            const Tensor* g = tape.grad(id);
            if (!g) continue;
            Tensor* p = storage.at(name);
            opt.update(name, *p, *g, eta);
            if (name.rfind("qspec/", 0) == 0) clamp_steps_positive(*p);
        }
        if (sink) sink->push({t + 1, t, 0, loss, 0.0, eta, ms_since(start)});
    }
    return qm;
}

// ---- evaluation ----

Tensor fp_logits(const Model& model, const TokenBatch& batch) {
    return forward_fp(model, batch.tokens, batch.batch, batch.len).logits;
}

Tensor quantized_logits(const QuantizedModel& qm, const TokenBatch& batch) {
    return forward_quantized_full(qm, batch.tokens, batch.batch, batch.len).logits;
}

namespace {

template <class LogitsFn>
double accuracy_with(LogitsFn&& logits_fn, const TokenSplit& split, int batch_size) {
    int correct = 0;
    for_chunks(split.num, batch_size, [&](int start, int count) {
        const TokenBatch tb = slice_tokens(split.tokens, split.len, start, count);
        const Tensor logits = logits_fn(tb);
        const int classes = logits.dim(1);
        for (int i = 0; i < count; ++i) {
            int best = 0;
            for (int c = 1; c < classes; ++c)
                if (logits(i, c) > logits(i, best)) best = c;
            if (best == split.labels[start + i]) ++correct;
        }
    });
    return static_cast<double>(correct) / split.num;
}

}  // namespace

double accuracy_fp(const Model& model, const TokenSplit& split, int batch_size) {
    return accuracy_with([&](const TokenBatch& tb) { return fp_logits(model, tb); }, split,
                         batch_size);
}

double accuracy_quantized(const QuantizedModel& qm, const TokenSplit& split, int batch_size) {
    return accuracy_with([&](const TokenBatch& tb) { return quantized_logits(qm, tb); }, split,
                         batch_size);
}

double logit_mse_between(const Model& fp, const QuantizedModel& qm, const TokenSplit& split,
                         int max_examples, int batch_size) {
    const int num = max_examples > 0 ? std::min(max_examples, split.num) : split.num;
    double sumsq = 0.0;
    int64_t count = 0;
    for_chunks(num, batch_size, [&](int start, int n) {
        const TokenBatch tb = slice_tokens(split.tokens, split.len, start, n);
        const Tensor a = fp_logits(fp, tb);
        const Tensor b = quantized_logits(qm, tb);
        for (int64_t i = 0; i < a.numel(); ++i) {
            const double d = a.v[i] - b.v[i];
            sumsq += d * d;
        }
        count += a.numel();
    });
    return sumsq / static_cast<double>(count);
}

ReconReport reconstruction_report(const Model& fp, const QuantizedModel& qm,
                                  const std::vector<int32_t>& tokens, int num, int len,
                                  int batch_size) {
    ReconReport rep;
    rep.per_layer.assign(fp.cfg.layers + 1, 0.0);
    std::vector<int64_t> counts(fp.cfg.layers + 1, 0);
    double logit_sumsq = 0.0;
    int64_t logit_count = 0;
    for_chunks(num, batch_size, [&](int start, int n) {
        const TokenBatch tb = slice_tokens(tokens, len, start, n);
        const auto f = forward_fp(fp, tb.tokens, tb.batch, tb.len);
        const auto g = forward_quantized_full(qm, tb.tokens, tb.batch, tb.len);
        for (size_t l = 0; l < f.hidden.size(); ++l) {
            for (int64_t i = 0; i < f.hidden[l].numel(); ++i) {
                const double d = f.hidden[l].v[i] - g.hidden[l].v[i];
                rep.per_layer[l] += d * d;
            }
            counts[l] += f.hidden[l].numel();
        }
        for (int64_t i = 0; i < f.logits.numel(); ++i) {
            const double d = f.logits.v[i] - g.logits.v[i];
            logit_sumsq += d * d;
        }
        logit_count += f.logits.numel();
    });
    for (size_t l = 0; l < rep.per_layer.size(); ++l) {
        rep.per_layer[l] /= static_cast<double>(counts[l]);
        rep.total += rep.per_layer[l];
    }
    rep.logit_mse = logit_sumsq / static_cast<double>(logit_count);
    rep.total += rep.logit_mse;
    return rep;
}

}  // namespace mremq
