#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mremq/autograd.hpp"
#include "mremq/tensor.hpp"

namespace mremq {

enum class QuantMode { symmetric, asymmetric, ternary };
enum class Granularity { per_tensor, per_channel };

// One quantization site: bit-width, grid type, and the (learnable) step
// size(s). bits == 0 is the disabled sentinel: the site passes values through.
template <class T>
struct QuantSpecT {
    int bits = 0;
    QuantMode mode = QuantMode::symmetric;
    Granularity granularity = Granularity::per_tensor;
    TensorT<T> step;  // shape [1], or [d_out] for per-channel
    bool learnable = true;

    bool enabled() const { return bits != 0; }
};

using QuantSpec = QuantSpecT<float>;

template <class T>
struct TernaryResultT {
    TensorT<T> quantized;  // entries in {-alpha, 0, +alpha}
    T alpha = T(0);
    T delta = T(0);
};

// Integer clip range for a b-bit grid: symmetric {-2^(b-1)+1 .. 2^(b-1)-1},
// asymmetric {0 .. 2^b - 1}.
inline std::pair<long, long> clip_range(int bits, QuantMode mode) {
    if (bits < 2 || bits > 16) throw ContractError("quantizer bits out of range: " + std::to_string(bits));
    if (mode == QuantMode::asymmetric) return {0L, (1L << bits) - 1};
    const long qp = (1L << (bits - 1)) - 1;
    return {-qp, qp};
}

// Round half away from zero, the fixed tie rule for all grids.
template <class T>
inline T round_away(T x) {
    return std::round(x);
}

template <class T>
void require_positive_step(const TensorT<T>& step, const char* what) {
    if (step.numel() == 0) throw ContractError(std::string(what) + ": empty step");
    for (T s : step.v)
        if (!(s > T(0))) throw ContractError(std::string(what) + ": step size must be positive");
}

namespace detail {

template <class T>
inline T quantize_one(T x, T s, long qn, long qp) {
    T q = round_away(x / s);
    if (q < static_cast<T>(qn)) q = static_cast<T>(qn);
    if (q > static_cast<T>(qp)) q = static_cast<T>(qp);
    return s * q;
}

}  // namespace detail

// x_hat = s * clip(round(x / s), -2^(b-1)+1, 2^(b-1)-1)
template <class T>
TensorT<T> quantize_symmetric(const TensorT<T>& x, const QuantSpecT<T>& spec) {
    if (spec.mode != QuantMode::symmetric)
        throw ContractError("quantize_symmetric: spec mode is not symmetric");
    require_positive_step(spec.step, "quantize_symmetric");
    const auto [qn, qp] = clip_range(spec.bits, QuantMode::symmetric);
    const T s = spec.step.v[0];
    TensorT<T> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out.v[i] = detail::quantize_one(x.v[i], s, qn, qp);
    return out;
}

// x_hat = s * clip(round(x / s), 0, 2^b - 1); grid anchored at zero.
template <class T>
TensorT<T> quantize_asymmetric(const TensorT<T>& x, const QuantSpecT<T>& spec) {
    if (spec.mode != QuantMode::asymmetric)
        throw ContractError("quantize_asymmetric: spec mode is not asymmetric");
    require_positive_step(spec.step, "quantize_asymmetric");
    const auto [qn, qp] = clip_range(spec.bits, QuantMode::asymmetric);
    const T s = spec.step.v[0];
    TensorT<T> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out.v[i] = detail::quantize_one(x.v[i], s, qn, qp);
    return out;
}

// Row i of W [d_out, d_in] quantized with steps[i] under spec.mode.
template <class T>
TensorT<T> quantize_per_channel(const TensorT<T>& w, const TensorT<T>& steps,
                                const QuantSpecT<T>& spec) {
    if (w.rank() != 2) throw ContractError("quantize_per_channel: weight must be rank 2");
    if (steps.numel() != w.dim(0))
        throw ContractError("quantize_per_channel: got " + std::to_string(steps.numel()) +
                            " steps for " + std::to_string(w.dim(0)) + " output channels");
    require_positive_step(steps, "quantize_per_channel");
    const auto [qn, qp] = clip_range(spec.bits, spec.mode);
    TensorT<T> out(w.shape);
    const int cols = w.dim(1);
    for (int r = 0; r < w.dim(0); ++r) {
        const T s = steps.v[static_cast<size_t>(r)];
        for (int j = 0; j < cols; ++j) out(r, j) = detail::quantize_one(w(r, j), s, qn, qp);
    }
    return out;
}

// TWN ternarization: delta = 0.7 * mean|w|, alpha = mean of |w_i| above delta.
template <class T>
TernaryResultT<T> ternarize_twn(const TensorT<T>& w) {
    if (w.numel() == 0) throw ContractError("ternarize_twn: empty tensor");
    T mean_abs = T(0);
    for (T e : w.v) mean_abs += std::abs(e);
    mean_abs /= static_cast<T>(w.numel());
    const T delta = T(0.7) * mean_abs;
    T alpha = T(0);
    int64_t count = 0;
    for (T e : w.v)
        if (std::abs(e) > delta) {
            alpha += std::abs(e);
            ++count;
        }
    alpha = count > 0 ? alpha / static_cast<T>(count) : T(0);
    TernaryResultT<T> res;
    res.alpha = alpha;
    res.delta = delta;
    res.quantized = TensorT<T>(w.shape);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const T e = w.v[i];
        res.quantized.v[i] = std::abs(e) > delta ? (e > T(0) ? alpha : -alpha) : T(0);
    }
    return res;
}

// Row-wise TWN for per-channel weight quantization.
template <class T>
TensorT<T> ternarize_twn_rows(const TensorT<T>& w) {
    if (w.rank() != 2) throw ContractError("ternarize_twn_rows: weight must be rank 2");
    TensorT<T> out(w.shape);
    const int cols = w.dim(1);
    for (int r = 0; r < w.dim(0); ++r) {
        TensorT<T> row({cols});
        for (int j = 0; j < cols; ++j) row.v[j] = w(r, j);
        const auto t = ternarize_twn(row);
        for (int j = 0; j < cols; ++j) out(r, j) = t.quantized.v[j];
    }
    return out;
}

inline constexpr double kStepFloor = 1e-8;

// LSQ step-size initialization: s = 2 * mean|x| / sqrt(Q_P), floored at 1e-8.
template <class T>
T init_step_size(const TensorT<T>& x, int bits, QuantMode mode) {
    if (x.numel() == 0) throw ContractError("init_step_size: empty tensor");
    const auto [qn, qp] = clip_range(bits, mode);
    (void)qn;
    T mean_abs = T(0);
    for (T e : x.v) mean_abs += std::abs(e);
    mean_abs /= static_cast<T>(x.numel());
    const T s = T(2) * mean_abs / std::sqrt(static_cast<T>(qp));
    return std::max(s, static_cast<T>(kStepFloor));
}

template <class T>
struct SteGrads {
    TensorT<T> grad_x;
    TensorT<T> grad_step;  // shape of spec.step
};

// Straight-through gradients of s * clip(round(x/s), Q_N, Q_P):
//   in range:  d/dx -> pass-through, d/ds -> round(q) - q
//   clipped:   d/dx -> 0,            d/ds -> Q_P (above) or Q_N (below)
// grad_step is summed over all elements the step governs.
template <class T>
SteGrads<T> ste_backward(const TensorT<T>& x, const QuantSpecT<T>& spec,
                         const TensorT<T>& upstream) {
    require_same_shape(x, upstream, "ste_backward");
    require_positive_step(spec.step, "ste_backward");
    const auto [qn, qp] = clip_range(spec.bits, spec.mode);
    SteGrads<T> g;
    g.grad_x = TensorT<T>(x.shape);
    g.grad_step = TensorT<T>(spec.step.shape);
    const bool per_channel = spec.granularity == Granularity::per_channel;
    if (per_channel && (x.rank() != 2 || spec.step.numel() != x.dim(0)))
        throw ContractError("ste_backward: per-channel step count does not match rows");
    const int64_t cols = per_channel ? x.dim(1) : x.numel();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const int64_t ch = per_channel ? i / cols : 0;
        const T s = spec.step.v[static_cast<size_t>(ch)];
        const T q = x.v[i] / s;
        const T up = upstream.v[i];
        if (q < static_cast<T>(qn)) {
            g.grad_step.v[static_cast<size_t>(ch)] += up * static_cast<T>(qn);
        } else if (q > static_cast<T>(qp)) {
            g.grad_step.v[static_cast<size_t>(ch)] += up * static_cast<T>(qp);
        } else {
            g.grad_x.v[i] = up;
            g.grad_step.v[static_cast<size_t>(ch)] += up * (round_away(q) - q);
        }
    }
    return g;
}

// ---- autograd wiring ----

// Inserts a uniform quantize node. x and step are existing tape nodes; the
// STE above supplies both gradients.
template <class T>
typename Tape<T>::Id quantize_node(Tape<T>& tape, typename Tape<T>::Id ix,
                                   typename Tape<T>::Id istep, const QuantSpecT<T>& spec) {
    const TensorT<T>& x = tape.value(ix);
    const TensorT<T>& step = tape.value(istep);
    QuantSpecT<T> local = spec;
    local.step = step;
    TensorT<T> out;
    if (spec.granularity == Granularity::per_channel)
        out = quantize_per_channel(x, step, local);
    else if (spec.mode == QuantMode::symmetric)
        out = quantize_symmetric(x, local);
    else
        out = quantize_asymmetric(x, local);
    auto meta = std::make_shared<QuantSpecT<T>>(std::move(local));
    return tape.push(std::move(out), {ix, istep}, OpKind::quantize, [meta](Tape<T>& t, int id) {
        const auto& nd = t.node(id);
        meta->step = t.value(nd.inputs[1]);
        const auto grads = ste_backward(t.value(nd.inputs[0]), *meta, nd.grad);
        if (t.node(nd.inputs[0]).requires_grad) {
            auto& gx = t.grad_buffer(nd.inputs[0]);
            for (int64_t i = 0; i < gx.numel(); ++i) gx.v[i] += grads.grad_x.v[i];
        }
        if (t.node(nd.inputs[1]).requires_grad) {
            auto& gs = t.grad_buffer(nd.inputs[1]);
            for (int64_t i = 0; i < gs.numel(); ++i) gs.v[i] += grads.grad_step.v[i];
        }
    });
}

// TWN node: alpha and delta are recomputed from the latent weights on every
// forward; the latent receives a pass-through gradient (no clip range).
template <class T>
typename Tape<T>::Id ternarize_node(Tape<T>& tape, typename Tape<T>::Id iw, bool per_channel) {
    const TensorT<T>& w = tape.value(iw);
    TensorT<T> out = per_channel ? ternarize_twn_rows(w) : ternarize_twn(w).quantized;
    return tape.push(std::move(out), {iw}, OpKind::ternarize, [](Tape<T>& t, int id) {
        const auto& nd = t.node(id);
        if (!t.node(nd.inputs[0]).requires_grad) return;
        auto& gw = t.grad_buffer(nd.inputs[0]);
        for (int64_t i = 0; i < gw.numel(); ++i) gw.v[i] += nd.grad.v[i];
    });
}

}  // namespace mremq
