#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mremq/autograd.hpp"
#include "mremq/quantizers.hpp"
#include "mremq/rng.hpp"
#include "mremq/tensor.hpp"

namespace mremq {

inline constexpr double kLayerNormEps = 1e-12;

struct ModelConfig {
    int layers = 8;
    int d_model = 32;
    int heads = 2;
    int d_ff = 64;
    int vocab = 64;
    int max_seq_len = 16;
    int num_classes = 2;

    void validate() const {
        if (layers < 1 || d_model < 1 || heads < 1 || d_ff < 1 || vocab < 2 || max_seq_len < 1 ||
            num_classes < 2)
            throw ContractError("model config: all dimensions must be positive");
        if (d_model % heads != 0) throw ContractError("model config: d_model must divide by heads");
    }
};

// All weight matrices are stored [out, in] and applied as x * W^T.
template <class T>
struct LayerWeightsT {
    TensorT<T> w_q, w_k, w_v, w_o;  // [d, d]
    TensorT<T> b_q, b_k, b_v, b_o;  // [d]
    TensorT<T> w_1;                 // [d_ff, d]
    TensorT<T> b_1;                 // [d_ff]
    TensorT<T> w_2;                 // [d, d_ff]
    TensorT<T> b_2;                 // [d]
    TensorT<T> ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
};

template <class T>
struct ModelT {
    ModelConfig cfg;
    TensorT<T> embedding;   // [V, d]
    TensorT<T> positional;  // [max_seq_len, d]
    std::vector<LayerWeightsT<T>> layers;
    TensorT<T> head_w;  // [num_classes, d]
    TensorT<T> head_b;  // [num_classes]
};

using Model = ModelT<float>;

template <class T>
ModelT<T> make_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelT<T> m;
    m.cfg = cfg;
    const int d = cfg.d_model;
    m.embedding = TensorT<T>({cfg.vocab, d});
    m.positional = TensorT<T>({cfg.max_seq_len, d});
    m.layers.resize(cfg.layers);
    for (auto& lw : m.layers) {
        lw.w_q = lw.w_k = lw.w_v = lw.w_o = TensorT<T>({d, d});
        lw.b_q = lw.b_k = lw.b_v = lw.b_o = TensorT<T>({d});
        lw.w_1 = TensorT<T>({cfg.d_ff, d});
        lw.b_1 = TensorT<T>({cfg.d_ff});
        lw.w_2 = TensorT<T>({d, cfg.d_ff});
        lw.b_2 = TensorT<T>({d});
        lw.ln1_g = TensorT<T>({d}, T(1));
        lw.ln1_b = TensorT<T>({d});
        lw.ln2_g = TensorT<T>({d}, T(1));
        lw.ln2_b = TensorT<T>({d});
    }
    m.head_w = TensorT<T>({cfg.num_classes, d});
    m.head_b = TensorT<T>({cfg.num_classes});
    return m;
}

template <class T>
ModelT<T> make_model_random(const ModelConfig& cfg, uint64_t seed, double stddev = 0.02) {
    ModelT<T> m = make_model<T>(cfg);
    Rng rng(derive_seed(seed, "model-init"));
    auto fill = [&](TensorT<T>& t) {
        for (auto& e : t.v) e = static_cast<T>(rng.next_normal(0.0, stddev));
    };
    fill(m.embedding);
    fill(m.positional);
    for (auto& lw : m.layers) {
        fill(lw.w_q);
        fill(lw.w_k);
        fill(lw.w_v);
        fill(lw.w_o);
        fill(lw.w_1);
        fill(lw.w_2);
    }
    fill(m.head_w);
    return m;
}

// Canonical parameter enumeration; checkpoint and partition audits key off
// these names.
template <class T, class Fn>
void for_each_param(ModelT<T>& m, Fn&& fn) {
    fn(std::string("embed/table"), m.embedding);
    fn(std::string("embed/pos"), m.positional);
    for (int l = 0; l < m.cfg.layers; ++l) {
        auto& lw = m.layers[l];
        const std::string p = "layer" + std::to_string(l) + "/";
        fn(p + "w_q", lw.w_q);
        fn(p + "b_q", lw.b_q);
        fn(p + "w_k", lw.w_k);
        fn(p + "b_k", lw.b_k);
        fn(p + "w_v", lw.w_v);
        fn(p + "b_v", lw.b_v);
        fn(p + "w_o", lw.w_o);
        fn(p + "b_o", lw.b_o);
        fn(p + "w_1", lw.w_1);
        fn(p + "b_1", lw.b_1);
        fn(p + "w_2", lw.w_2);
        fn(p + "b_2", lw.b_2);
        fn(p + "ln1_g", lw.ln1_g);
        fn(p + "ln1_b", lw.ln1_b);
        fn(p + "ln2_g", lw.ln2_g);
        fn(p + "ln2_b", lw.ln2_b);
    }
    fn(std::string("head/w"), m.head_w);
    fn(std::string("head/b"), m.head_b);
}

template <class T, class Fn>
void for_each_param(const ModelT<T>& m, Fn&& fn) {
    for_each_param(const_cast<ModelT<T>&>(m),
                   [&](const std::string& name, TensorT<T>& t) { fn(name, const_cast<const TensorT<T>&>(t)); });
}

// ---- quantization placement ----

enum class SiteKind { weight, activation_symmetric, activation_asymmetric };

struct Site {
    std::string id;
    SiteKind kind;
    int layer = -1;  // -1 for the embedding site
};

struct PlacementReport {
    std::vector<Site> quantized;     // forward topological order
    std::vector<std::string> skipped;  // full-precision by rule
};

// Weights and both operands of every matmul are quantized; softmax and GeLU
// outputs get the asymmetric grid. Layer norms, residual adds, biases,
// positional embeddings and the classification head stay full precision.
inline PlacementReport placement_sites(const ModelConfig& cfg) {
    PlacementReport r;
    r.quantized.push_back({"embed/table", SiteKind::weight, -1});
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + "/";
        r.quantized.push_back({p + "a_in", SiteKind::activation_symmetric, l});
        r.quantized.push_back({p + "w_q", SiteKind::weight, l});
        r.quantized.push_back({p + "w_k", SiteKind::weight, l});
        r.quantized.push_back({p + "w_v", SiteKind::weight, l});
        r.quantized.push_back({p + "a_q", SiteKind::activation_symmetric, l});
        r.quantized.push_back({p + "a_k", SiteKind::activation_symmetric, l});
        r.quantized.push_back({p + "a_probs", SiteKind::activation_asymmetric, l});
        r.quantized.push_back({p + "a_v", SiteKind::activation_symmetric, l});
        r.quantized.push_back({p + "a_ctx", SiteKind::activation_symmetric, l});
        r.quantized.push_back({p + "w_o", SiteKind::weight, l});
        r.quantized.push_back({p + "a_ffn_in", SiteKind::activation_symmetric, l});
        r.quantized.push_back({p + "w_1", SiteKind::weight, l});
        r.quantized.push_back({p + "a_gelu", SiteKind::activation_asymmetric, l});
        r.quantized.push_back({p + "w_2", SiteKind::weight, l});
        r.skipped.push_back(p + "ln1");
        r.skipped.push_back(p + "ln2");
        r.skipped.push_back(p + "biases");
        r.skipped.push_back(p + "residuals");
    }
    r.skipped.push_back("embed/pos");
    r.skipped.push_back("head");
    return r;
}

struct QuantBits {
    int weights = 4;
    int embedding = 4;
    int activations = 8;

    bool any_enabled() const { return weights != 0 || embedding != 0 || activations != 0; }

    void validate() const {
        for (int b : {weights, embedding, activations})
            if (b != 0 && (b < 2 || b > 8))
                throw ContractError("bit-width must be 0 (disabled) or in [2,8], got " +
                                    std::to_string(b));
    }
};

// Latent full-precision weights plus one QuantSpec per placement site.
// Weights are re-quantized from the latent copy on every forward pass.
template <class T>
struct QuantizedModelT {
    ModelT<T> latent;
    QuantBits bits;
    bool per_channel = false;
    std::map<std::string, QuantSpecT<T>> specs;

    const QuantSpecT<T>* spec_for(const std::string& site) const {
        auto it = specs.find(site);
        return it == specs.end() ? nullptr : &it->second;
    }
};

using QuantizedModel = QuantizedModelT<float>;

// ---- forward graph construction ----

// Creates/caches one tape leaf per parameter name. The trainable predicate
// decides which leaves require gradients.
template <class T>
struct ParamLeaves {
    Tape<T>* tape = nullptr;
    std::function<bool(const std::string&)> trainable = [](const std::string&) { return false; };
    std::map<std::string, int> ids;

    explicit ParamLeaves(Tape<T>* t) : tape(t) {}

    int get(const std::string& name, const TensorT<T>& value) {
        auto it = ids.find(name);
        if (it != ids.end()) return it->second;
        const int id = tape->leaf(value, trainable(name));
        ids.emplace(name, id);
        return id;
    }
};

template <class T>
struct ForwardHooks {
    std::map<std::string, TensorT<T>>* capture = nullptr;  // site id -> pre-quant activation
    std::map<std::string, int>* site_audit = nullptr;      // site id -> quantize count
    std::map<std::string, int>* quant_nodes = nullptr;     // site id -> quantize output node
};

template <class T>
class GraphBuilder {
public:
    GraphBuilder(Tape<T>& tape, const ModelT<T>& model, ParamLeaves<T>& leaves,
                 const QuantizedModelT<T>* quant = nullptr, ForwardHooks<T> hooks = {})
        : tape_(tape), model_(model), leaves_(leaves), quant_(quant), hooks_(hooks) {}

    // f_0: embedding lookup plus learned positional rows.
    int embed(const std::vector<int32_t>& tokens, int batch, int len) {
        if (len > model_.cfg.max_seq_len)
            throw InputError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                             std::to_string(model_.cfg.max_seq_len));
        const int table = weight_site("embed/table", model_.embedding);
        const int emb = tape_.embed_rows(table, tokens, batch, len);
        const int pos = leaves_.get("embed/pos", model_.positional);
        return tape_.add_rows_broadcast(emb, pos);
    }

    // One encoder layer (post-norm); x is f_{l-1}, returns f_l.
    int layer(int x, int l) {
        if (l < 0 || l >= model_.cfg.layers)
            throw ContractError("layer index " + std::to_string(l) + " out of range");
        const auto& lw = model_.layers[l];
        const std::string p = "layer" + std::to_string(l) + "/";
        const int heads = model_.cfg.heads;
        const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(model_.cfg.d_model / heads));

        const int xq = act_site(x, p + "a_in");
        const int q_lin = tape_.add_bias(tape_.matmul_nt(xq, weight_site(p + "w_q", lw.w_q)),
                                         leaves_.get(p + "b_q", lw.b_q));
        const int k_lin = tape_.add_bias(tape_.matmul_nt(xq, weight_site(p + "w_k", lw.w_k)),
                                         leaves_.get(p + "b_k", lw.b_k));
        const int v_lin = tape_.add_bias(tape_.matmul_nt(xq, weight_site(p + "w_v", lw.w_v)),
                                         leaves_.get(p + "b_v", lw.b_v));
        // scale before quantizing the score operand
        const int qh = tape_.split_heads(tape_.scale(q_lin, inv_sqrt_dh), heads);
        const int kh = tape_.split_heads(k_lin, heads);
        const int vh = tape_.split_heads(v_lin, heads);
        const int qq = act_site(qh, p + "a_q");
        const int kq = act_site(kh, p + "a_k");
        const int vq = act_site(vh, p + "a_v");
        const int scores = tape_.matmul_nt(qq, kq);
        const int probs = tape_.softmax_rows(scores);
        const int pq = act_site(probs, p + "a_probs");
        const int ctx = tape_.merge_heads(tape_.matmul(pq, vq));
        const int cq = act_site(ctx, p + "a_ctx");
        const int attn = tape_.add_bias(tape_.matmul_nt(cq, weight_site(p + "w_o", lw.w_o)),
                                        leaves_.get(p + "b_o", lw.b_o));
        const int u = tape_.layer_norm(tape_.add(x, attn), leaves_.get(p + "ln1_g", lw.ln1_g),
                                       leaves_.get(p + "ln1_b", lw.ln1_b),
                                       static_cast<T>(kLayerNormEps));
        const int uq = act_site(u, p + "a_ffn_in");
        const int h1 = tape_.gelu(tape_.add_bias(tape_.matmul_nt(uq, weight_site(p + "w_1", lw.w_1)),
                                                 leaves_.get(p + "b_1", lw.b_1)));
        const int gq = act_site(h1, p + "a_gelu");
        const int ffn = tape_.add_bias(tape_.matmul_nt(gq, weight_site(p + "w_2", lw.w_2)),
                                       leaves_.get(p + "b_2", lw.b_2));
        return tape_.layer_norm(tape_.add(u, ffn), leaves_.get(p + "ln2_g", lw.ln2_g),
                                leaves_.get(p + "ln2_b", lw.ln2_b), static_cast<T>(kLayerNormEps));
    }

    // Mean-pooled classification head (never quantized).
    int head(int x) {
        const int pooled = tape_.mean_seq(x);
        return tape_.add_bias(tape_.matmul_nt(pooled, leaves_.get("head/w", model_.head_w)),
                              leaves_.get("head/b", model_.head_b));
    }

private:
    int weight_site(const std::string& site, const TensorT<T>& value) {
        const int w = leaves_.get(site, value);
        const QuantSpecT<T>* spec = quant_ ? quant_->spec_for(site) : nullptr;
        if (!spec || !spec->enabled()) return w;
        count_site(site);
        int out;
        if (spec->mode == QuantMode::ternary) {
            out = ternarize_node(tape_, w, spec->granularity == Granularity::per_channel);
        } else {
            const int s = leaves_.get("qspec/" + site, spec->step);
            out = quantize_node(tape_, w, s, *spec);
        }
        if (hooks_.quant_nodes) (*hooks_.quant_nodes)[site] = out;
        return out;
    }

    int act_site(int x, const std::string& site) {
        if (hooks_.capture) (*hooks_.capture)[site] = tape_.value(x);
        const QuantSpecT<T>* spec = quant_ ? quant_->spec_for(site) : nullptr;
        if (!spec || !spec->enabled()) return x;
        count_site(site);
        const int s = leaves_.get("qspec/" + site, spec->step);
        const int out = quantize_node(tape_, x, s, *spec);
        if (hooks_.quant_nodes) (*hooks_.quant_nodes)[site] = out;
        return out;
    }

    void count_site(const std::string& site) {
        if (hooks_.site_audit) ++(*hooks_.site_audit)[site];
    }

    Tape<T>& tape_;
    const ModelT<T>& model_;
    ParamLeaves<T>& leaves_;
    const QuantizedModelT<T>* quant_;
    ForwardHooks<T> hooks_;
};

// ---- whole-model forward conveniences ----

template <class T>
struct ForwardOutputs {
    std::vector<TensorT<T>> hidden;  // f_0 .. f_L
    TensorT<T> logits;
};

template <class T>
ForwardOutputs<T> forward_fp(const ModelT<T>& model, const std::vector<int32_t>& tokens, int batch,
                             int len) {
    Tape<T> tape;
    ParamLeaves<T> leaves{&tape};
    GraphBuilder<T> gb(tape, model, leaves);
    ForwardOutputs<T> out;
    int x = gb.embed(tokens, batch, len);
    out.hidden.push_back(tape.value(x));
    for (int l = 0; l < model.cfg.layers; ++l) {
        x = gb.layer(x, l);
        out.hidden.push_back(tape.value(x));
    }
    out.logits = tape.value(gb.head(x));
    return out;
}

// Quantized forward over layers [layer_begin, layer_end) starting from a
// given hidden state; supports mid-network entry for module partitioning.
template <class T>
std::vector<TensorT<T>> forward_quantized(const QuantizedModelT<T>& qm, const TensorT<T>& input,
                                          int layer_begin, int layer_end) {
    if (layer_begin < 0 || layer_end > qm.latent.cfg.layers || layer_begin >= layer_end)
        throw ContractError("forward_quantized: invalid layer range [" +
                            std::to_string(layer_begin) + "," + std::to_string(layer_end) + ")");
    Tape<T> tape;
    ParamLeaves<T> leaves{&tape};
    GraphBuilder<T> gb(tape, qm.latent, leaves, &qm);
    std::vector<TensorT<T>> out;
    int x = tape.leaf(input, false);
    for (int l = layer_begin; l < layer_end; ++l) {
        x = gb.layer(x, l);
        out.push_back(tape.value(x));
    }
    return out;
}

template <class T>
ForwardOutputs<T> forward_quantized_full(const QuantizedModelT<T>& qm,
                                         const std::vector<int32_t>& tokens, int batch, int len,
                                         ForwardHooks<T> hooks = {}) {
    Tape<T> tape;
    ParamLeaves<T> leaves{&tape};
    GraphBuilder<T> gb(tape, qm.latent, leaves, &qm, hooks);
    ForwardOutputs<T> out;
    int x = gb.embed(tokens, batch, len);
    out.hidden.push_back(tape.value(x));
    for (int l = 0; l < qm.latent.cfg.layers; ++l) {
        x = gb.layer(x, l);
        out.hidden.push_back(tape.value(x));
    }
    out.logits = tape.value(gb.head(x));
    return out;
}

// ---- quantized model construction ----

// Captures full-precision activations at every site for LSQ initialization.
template <class T>
std::map<std::string, TensorT<T>> capture_activations(const ModelT<T>& model,
                                                      const std::vector<int32_t>& tokens,
                                                      int batch, int len) {
    Tape<T> tape;
    ParamLeaves<T> leaves{&tape};
    std::map<std::string, TensorT<T>> cap;
    ForwardHooks<T> hooks;
    hooks.capture = &cap;
    GraphBuilder<T> gb(tape, model, leaves, nullptr, hooks);
    int x = gb.embed(tokens, batch, len);
    for (int l = 0; l < model.cfg.layers; ++l) x = gb.layer(x, l);
    gb.head(x);
    return cap;
}

// Builds the quantized twin: latent copy of the weights, a spec per placement
// site, LSQ step initialization from the weights themselves and from one
// probe batch of full-precision activations. 2-bit weight/embedding sites use
// TWN ternarization (no step parameter).
template <class T>
QuantizedModelT<T> make_quantized_model(const ModelT<T>& fp, QuantBits bits, bool per_channel,
                                        const std::vector<int32_t>& probe_tokens, int probe_batch,
                                        int probe_len) {
    bits.validate();
    QuantizedModelT<T> qm;
    qm.latent = fp;
    qm.bits = bits;
    qm.per_channel = per_channel;

    std::map<std::string, TensorT<T>> acts;
    bool need_probe = bits.activations != 0;
    if (need_probe) acts = capture_activations(fp, probe_tokens, probe_batch, probe_len);

    std::map<std::string, const TensorT<T>*> weight_by_site;
    weight_by_site["embed/table"] = &fp.embedding;
    for (int l = 0; l < fp.cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + "/";
        weight_by_site[p + "w_q"] = &fp.layers[l].w_q;
        weight_by_site[p + "w_k"] = &fp.layers[l].w_k;
        weight_by_site[p + "w_v"] = &fp.layers[l].w_v;
        weight_by_site[p + "w_o"] = &fp.layers[l].w_o;
        weight_by_site[p + "w_1"] = &fp.layers[l].w_1;
        weight_by_site[p + "w_2"] = &fp.layers[l].w_2;
    }

    for (const Site& site : placement_sites(fp.cfg).quantized) {
        QuantSpecT<T> spec;
        if (site.kind == SiteKind::weight) {
            const int b = site.id == "embed/table" ? bits.embedding : bits.weights;
            if (b == 0) continue;
            spec.bits = b;
            const TensorT<T>& w = *weight_by_site.at(site.id);
            if (b == 2) {
                spec.mode = QuantMode::ternary;
                spec.granularity = per_channel ? Granularity::per_channel : Granularity::per_tensor;
                spec.learnable = false;  // alpha/delta recomputed each forward
            } else {
                spec.mode = QuantMode::symmetric;
                if (per_channel) {
                    spec.granularity = Granularity::per_channel;
                    const int rows = w.dim(0);
                    spec.step = TensorT<T>({rows});
                    for (int r = 0; r < rows; ++r) {
                        TensorT<T> row({w.dim(1)});
                        for (int j = 0; j < w.dim(1); ++j) row.v[j] = w(r, j);
                        spec.step.v[r] = init_step_size(row, b, QuantMode::symmetric);
                    }
                } else {
                    spec.step = TensorT<T>({1}, init_step_size(w, b, QuantMode::symmetric));
                }
            }
        } else {
            if (bits.activations == 0) continue;
            spec.bits = bits.activations;
            spec.mode = site.kind == SiteKind::activation_asymmetric ? QuantMode::asymmetric
                                                                     : QuantMode::symmetric;
            const auto it = acts.find(site.id);
            if (it == acts.end()) throw ContractError("no probe activation captured for " + site.id);
            spec.step = TensorT<T>({1}, init_step_size(it->second, spec.bits, spec.mode));
        }
        qm.specs.emplace(site.id, std::move(spec));
    }
    return qm;
}

}  // namespace mremq
