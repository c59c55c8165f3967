#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mremq/tensor.hpp"

namespace mremq {

enum class OpKind {
    leaf,
    matmul,
    matmul_nt,
    add,
    add_bias,
    scale,
    gelu,
    softmax_rows,
    layer_norm,
    embed_rows,
    mean_seq,
    split_heads,
    merge_heads,
    mse,
    sum_all,
    softmax_cross_entropy,
    quantize,
    ternarize,
};

// Reverse-mode tape. A tape is built per forward call, consumed by one
// backward sweep, and discarded. Node ids only ever reference earlier nodes,
// so the graph is acyclic by construction.
template <class T>
class Tape {
public:
    using Id = int;

    struct Node {
        TensorT<T> value;
        TensorT<T> grad;  // allocated lazily during backward
        bool has_grad = false;
        bool requires_grad = false;
        OpKind kind = OpKind::leaf;
        std::vector<Id> inputs;
        std::function<void(Tape&, Id)> backward;
    };

    Id leaf(TensorT<T> value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size()) - 1;
    }

    // Generic insertion point; also used by the quantizer ops.
    Id push(TensorT<T> value, std::vector<Id> inputs, OpKind kind,
            std::function<void(Tape&, Id)> backward) {
        Node n;
        n.value = std::move(value);
        n.kind = kind;
        n.inputs = std::move(inputs);
        for (Id in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size()) - 1;
    }

    const TensorT<T>& value(Id id) const { return nodes_[id].value; }
    const Node& node(Id id) const { return nodes_[id]; }
    size_t size() const { return nodes_.size(); }

    const TensorT<T>* grad(Id id) const {
        return nodes_[id].has_grad ? &nodes_[id].grad : nullptr;
    }

    // Accumulation buffer for backward functions; zero-initialized on first use.
    TensorT<T>& grad_buffer(Id id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = TensorT<T>(n.value.shape);
            n.has_grad = true;
        }
        return n.grad;
    }

    // Reverse sweep from a scalar loss. Gradients accumulate by summation over
    // all paths. Returns the gradient map for reachable grad-requiring leaves.
    std::map<Id, TensorT<T>> backward(Id loss) {
        const Node& ln = nodes_[loss];
        if (ln.value.numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(ln.value.shape));
        grad_buffer(loss).v[0] = T(1);
        for (Id id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.has_grad || !n.requires_grad) continue;
            if (n.backward) n.backward(*this, id);
        }
        std::map<Id, TensorT<T>> out;
        for (Id id = 0; id <= loss; ++id) {
            const Node& n = nodes_[id];
            if (n.kind == OpKind::leaf && n.requires_grad && n.has_grad) out[id] = n.grad;
        }
        return out;
    }

    // ---- ops ----

    // Batched matmul: a [..., m, k] x b [k, n] (rank-2 b broadcast over the
    // leading dims of a) or b [..., k, n] with identical leading dims.
    Id matmul(Id ia, Id ib) {
        const TensorT<T>& a = nodes_[ia].value;
        const TensorT<T>& b = nodes_[ib].value;
        auto [batch, m, k, n] = matmul_dims(a, b, false);
        std::vector<int> oshape(a.shape.begin(), a.shape.end() - 1);
        oshape.push_back(n);
        TensorT<T> out(oshape);
        const bool bcast = b.rank() == 2;
        for (int64_t g = 0; g < batch; ++g) {
            mm_nn(a.data() + g * m * k, b.data() + (bcast ? 0 : g * k * n), out.data() + g * m * n,
                  m, k, n);
        }
        return push(std::move(out), {ia, ib}, OpKind::matmul, [m, k, n, batch, bcast](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            const TensorT<T>& a = t.nodes_[nd.inputs[0]].value;
            const TensorT<T>& b = t.nodes_[nd.inputs[1]].value;
            const TensorT<T>& up = nd.grad;
            if (t.nodes_[nd.inputs[0]].requires_grad) {
                TensorT<T>& ga = t.grad_buffer(nd.inputs[0]);
                TensorT<T> tmp(std::vector<int>{m, k});
                for (int64_t g = 0; g < batch; ++g) {
                    mm_nt(up.data() + g * m * n, b.data() + (bcast ? 0 : g * k * n), tmp.data(), m,
                          n, k);
                    T* dst = ga.data() + g * m * k;
                    for (int64_t i = 0; i < static_cast<int64_t>(m) * k; ++i) dst[i] += tmp.v[i];
                }
            }
            if (t.nodes_[nd.inputs[1]].requires_grad) {
                TensorT<T>& gb = t.grad_buffer(nd.inputs[1]);
                for (int64_t g = 0; g < batch; ++g) {
                    mm_tn_acc(a.data() + g * m * k, up.data() + g * m * n,
                              gb.data() + (bcast ? 0 : g * k * n), k, m, n);
                }
            }
        });
    }

    // Batched a [..., m, k] x b^T with b [n, k] (broadcast) or [..., n, k].
    Id matmul_nt(Id ia, Id ib) {
        const TensorT<T>& a = nodes_[ia].value;
        const TensorT<T>& b = nodes_[ib].value;
        auto [batch, m, k, n] = matmul_dims(a, b, true);
        std::vector<int> oshape(a.shape.begin(), a.shape.end() - 1);
        oshape.push_back(n);
        TensorT<T> out(oshape);
        const bool bcast = b.rank() == 2;
        for (int64_t g = 0; g < batch; ++g) {
            mm_nt(a.data() + g * m * k, b.data() + (bcast ? 0 : g * n * k), out.data() + g * m * n,
                  m, k, n);
        }
        return push(std::move(out), {ia, ib}, OpKind::matmul_nt,
                    [m, k, n, batch, bcast](Tape& t, Id id) {
                        Node& nd = t.nodes_[id];
                        const TensorT<T>& a = t.nodes_[nd.inputs[0]].value;
                        const TensorT<T>& b = t.nodes_[nd.inputs[1]].value;
                        const TensorT<T>& up = nd.grad;
                        if (t.nodes_[nd.inputs[0]].requires_grad) {
                            TensorT<T>& ga = t.grad_buffer(nd.inputs[0]);
                            TensorT<T> tmp(std::vector<int>{m, k});
                            for (int64_t g = 0; g < batch; ++g) {
                                mm_nn(up.data() + g * m * n, b.data() + (bcast ? 0 : g * n * k),
                                      tmp.data(), m, n, k);
                                T* dst = ga.data() + g * m * k;
                                for (int64_t i = 0; i < static_cast<int64_t>(m) * k; ++i)
                                    dst[i] += tmp.v[i];
                            }
                        }
                        if (t.nodes_[nd.inputs[1]].requires_grad) {
                            TensorT<T>& gb = t.grad_buffer(nd.inputs[1]);
                            for (int64_t g = 0; g < batch; ++g) {
                                // dB[j,p] = sum_i up[i,j] * a[i,p]
                                mm_tn_acc(up.data() + g * m * n, a.data() + g * m * k,
                                          gb.data() + (bcast ? 0 : g * n * k), n, m, k);
                            }
                        }
                    });
    }

    Id add(Id ia, Id ib) {
        const TensorT<T>& a = nodes_[ia].value;
        const TensorT<T>& b = nodes_[ib].value;
        require_same_shape(a, b, "add");
        TensorT<T> out(a.shape);
        for (int64_t i = 0; i < a.numel(); ++i) out.v[i] = a.v[i] + b.v[i];
        return push(std::move(out), {ia, ib}, OpKind::add, [](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            for (int s = 0; s < 2; ++s) {
                if (!t.nodes_[nd.inputs[s]].requires_grad) continue;
                TensorT<T>& g = t.grad_buffer(nd.inputs[s]);
                for (int64_t i = 0; i < g.numel(); ++i) g.v[i] += nd.grad.v[i];
            }
        });
    }

    // x [..., d] + bias [d]
    Id add_bias(Id ix, Id ibias) {
        const TensorT<T>& x = nodes_[ix].value;
        const TensorT<T>& b = nodes_[ibias].value;
        const int d = x.shape.back();
        if (b.rank() != 1 || b.dim(0) != d)
            throw ContractError("add_bias: bias shape " + shape_str(b.shape) +
                                " does not match last dim of " + shape_str(x.shape));
        TensorT<T> out(x.shape);
        const int64_t rows = x.numel() / d;
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) out.v[r * d + j] = x.v[r * d + j] + b.v[j];
        return push(std::move(out), {ix, ibias}, OpKind::add_bias, [d](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            const int64_t rows = nd.grad.numel() / d;
            if (t.nodes_[nd.inputs[0]].requires_grad) {
                TensorT<T>& gx = t.grad_buffer(nd.inputs[0]);
                for (int64_t i = 0; i < gx.numel(); ++i) gx.v[i] += nd.grad.v[i];
            }
            if (t.nodes_[nd.inputs[1]].requires_grad) {
                TensorT<T>& gb = t.grad_buffer(nd.inputs[1]);
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) gb.v[j] += nd.grad.v[r * d + j];
            }
        });
    }

    Id scale(Id ix, T c) {
        const TensorT<T>& x = nodes_[ix].value;
        TensorT<T> out(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) out.v[i] = x.v[i] * c;
        return push(std::move(out), {ix}, OpKind::scale, [c](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (!t.nodes_[nd.inputs[0]].requires_grad) return;
            TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
            for (int64_t i = 0; i < g.numel(); ++i) g.v[i] += nd.grad.v[i] * c;
        });
    }

    // Exact Gaussian-CDF GeLU: x * Phi(x).
    Id gelu(Id ix) {
        const TensorT<T>& x = nodes_[ix].value;
        TensorT<T> out(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) out.v[i] = x.v[i] * gauss_cdf(x.v[i]);
        return push(std::move(out), {ix}, OpKind::gelu, [](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (!t.nodes_[nd.inputs[0]].requires_grad) return;
            const TensorT<T>& x = t.nodes_[nd.inputs[0]].value;
            TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const T xi = x.v[i];
                g.v[i] += nd.grad.v[i] * (gauss_cdf(xi) + xi * gauss_pdf(xi));
            }
        });
    }

    // Softmax over the last dim with per-row max subtraction.
    Id softmax_rows(Id ix) {
        const TensorT<T>& x = nodes_[ix].value;
        const int d = x.shape.back();
        TensorT<T> out(x.shape);
        const int64_t rows = x.numel() / d;
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = x.data() + r * d;
            T* or_ = out.data() + r * d;
            T mx = xr[0];
            for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
            T sum = T(0);
            for (int j = 0; j < d; ++j) {
                or_[j] = std::exp(xr[j] - mx);
                sum += or_[j];
            }
            for (int j = 0; j < d; ++j) or_[j] /= sum;
        }
        return push(std::move(out), {ix}, OpKind::softmax_rows, [d](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (!t.nodes_[nd.inputs[0]].requires_grad) return;
            const TensorT<T>& p = nd.value;
            TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
            const int64_t rows = p.numel() / d;
            for (int64_t r = 0; r < rows; ++r) {
                const T* pr = p.data() + r * d;
                const T* ur = nd.grad.data() + r * d;
                T dot = T(0);
                for (int j = 0; j < d; ++j) dot += ur[j] * pr[j];
                T* gr = g.data() + r * d;
                for (int j = 0; j < d; ++j) gr[j] += pr[j] * (ur[j] - dot);
            }
        });
    }

    // Per-row standardization over the last dim (population variance), then
    // an affine map with gamma/beta.
    Id layer_norm(Id ix, Id igamma, Id ibeta, T eps) {
        if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
        const TensorT<T>& x = nodes_[ix].value;
        const TensorT<T>& gamma = nodes_[igamma].value;
        const TensorT<T>& beta = nodes_[ibeta].value;
        const int d = x.shape.back();
        if (gamma.numel() != d || beta.numel() != d)
            throw ContractError("layer_norm: gamma/beta must have length " + std::to_string(d));
        TensorT<T> out(x.shape);
        const int64_t rows = x.numel() / d;
        // cache (mean, inv_std) per row for backward
        auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * 2);
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = x.data() + r * d;
            T mean = T(0);
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<T>(d);
            T var = T(0);
            for (int j = 0; j < d; ++j) {
                const T c = xr[j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T inv_std = T(1) / std::sqrt(var + eps);
            (*stats)[2 * r] = mean;
            (*stats)[2 * r + 1] = inv_std;
            T* orow = out.data() + r * d;
            for (int j = 0; j < d; ++j)
                orow[j] = (xr[j] - mean) * inv_std * gamma.v[j] + beta.v[j];
        }
        return push(std::move(out), {ix, igamma, ibeta}, OpKind::layer_norm,
                    [d, stats](Tape& t, Id id) {
                        Node& nd = t.nodes_[id];
                        const TensorT<T>& x = t.nodes_[nd.inputs[0]].value;
                        const TensorT<T>& gamma = t.nodes_[nd.inputs[1]].value;
                        const int64_t rows = x.numel() / d;
                        const bool need_x = t.nodes_[nd.inputs[0]].requires_grad;
                        const bool need_g = t.nodes_[nd.inputs[1]].requires_grad;
                        const bool need_b = t.nodes_[nd.inputs[2]].requires_grad;
                        TensorT<T>* gx = need_x ? &t.grad_buffer(nd.inputs[0]) : nullptr;
                        TensorT<T>* gg = need_g ? &t.grad_buffer(nd.inputs[1]) : nullptr;
                        TensorT<T>* gb = need_b ? &t.grad_buffer(nd.inputs[2]) : nullptr;
                        for (int64_t r = 0; r < rows; ++r) {
                            const T mean = (*stats)[2 * r];
                            const T inv_std = (*stats)[2 * r + 1];
                            const T* xr = x.data() + r * d;
                            const T* ur = nd.grad.data() + r * d;
                            T dot_u = T(0), dot_ux = T(0);
                            for (int j = 0; j < d; ++j) {
                                const T xhat = (xr[j] - mean) * inv_std;
                                const T ug = ur[j] * gamma.v[j];
                                dot_u += ug;
                                dot_ux += ug * xhat;
                                if (need_g) gg->v[j] += ur[j] * xhat;
                                if (need_b) gb->v[j] += ur[j];
                            }
                            if (need_x) {
                                dot_u /= static_cast<T>(d);
                                dot_ux /= static_cast<T>(d);
                                T* gxr = gx->data() + r * d;
                                for (int j = 0; j < d; ++j) {
                                    const T xhat = (xr[j] - mean) * inv_std;
                                    const T ug = ur[j] * gamma.v[j];
                                    gxr[j] += (ug - dot_u - xhat * dot_ux) * inv_std;
                                }
                            }
                        }
                    });
    }

    // Gather rows of table [V, d] by token id: out [batch, len, d].
    Id embed_rows(Id itable, const std::vector<int32_t>& tokens, int batch, int len) {
        const TensorT<T>& table = nodes_[itable].value;
        const int V = table.dim(0), d = table.dim(1);
        if (static_cast<int64_t>(tokens.size()) != static_cast<int64_t>(batch) * len)
            throw ContractError("embed_rows: token count does not match batch*len");
        TensorT<T> out({batch, len, d});
        for (size_t i = 0; i < tokens.size(); ++i) {
            const int32_t tok = tokens[i];
            if (tok < 0 || tok >= V)
                throw InputError("token id " + std::to_string(tok) + " out of range [0," +
                                 std::to_string(V) + ")");
            const T* src = table.data() + static_cast<size_t>(tok) * d;
            T* dst = out.data() + i * d;
            for (int j = 0; j < d; ++j) dst[j] = src[j];
        }
        auto toks = std::make_shared<std::vector<int32_t>>(tokens);
        return push(std::move(out), {itable}, OpKind::embed_rows, [toks, d](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (!t.nodes_[nd.inputs[0]].requires_grad) return;
            TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
            for (size_t i = 0; i < toks->size(); ++i) {
                T* dst = g.data() + static_cast<size_t>((*toks)[i]) * d;
                const T* src = nd.grad.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }

    // x [batch, len, d] + p[l] added to every x[:, l, :]; p is [P, d], P >= len.
    Id add_rows_broadcast(Id ix, Id ip) {
        const TensorT<T>& x = nodes_[ix].value;
        const TensorT<T>& p = nodes_[ip].value;
        if (x.rank() != 3 || p.rank() != 2 || p.dim(1) != x.dim(2) || p.dim(0) < x.dim(1))
            throw ContractError("add_rows_broadcast: incompatible shapes " + shape_str(x.shape) +
                                " and " + shape_str(p.shape));
        const int batch = x.dim(0), len = x.dim(1), d = x.dim(2);
        TensorT<T> out(x.shape);
        for (int b = 0; b < batch; ++b)
            for (int l = 0; l < len; ++l)
                for (int j = 0; j < d; ++j) out(b, l, j) = x(b, l, j) + p(l, j);
        return push(std::move(out), {ix, ip}, OpKind::add_bias, [batch, len, d](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (t.nodes_[nd.inputs[0]].requires_grad) {
                TensorT<T>& gx = t.grad_buffer(nd.inputs[0]);
                for (int64_t i = 0; i < gx.numel(); ++i) gx.v[i] += nd.grad.v[i];
            }
            if (t.nodes_[nd.inputs[1]].requires_grad) {
                TensorT<T>& gp = t.grad_buffer(nd.inputs[1]);
                for (int b = 0; b < batch; ++b)
                    for (int l = 0; l < len; ++l)
                        for (int j = 0; j < d; ++j) gp(l, j) += nd.grad(b, l, j);
            }
        });
    }

    // Mean over the sequence dim: [batch, len, d] -> [batch, d].
    Id mean_seq(Id ix) {
        const TensorT<T>& x = nodes_[ix].value;
        if (x.rank() != 3) throw ContractError("mean_seq: expected rank-3 input");
        const int batch = x.dim(0), len = x.dim(1), d = x.dim(2);
        TensorT<T> out({batch, d});
        for (int b = 0; b < batch; ++b)
            for (int l = 0; l < len; ++l)
                for (int j = 0; j < d; ++j) out(b, j) += x(b, l, j) / static_cast<T>(len);
        return push(std::move(out), {ix}, OpKind::mean_seq, [batch, len, d](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (!t.nodes_[nd.inputs[0]].requires_grad) return;
            TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
            for (int b = 0; b < batch; ++b)
                for (int l = 0; l < len; ++l)
                    for (int j = 0; j < d; ++j)
                        g.v[(static_cast<size_t>(b) * len + l) * d + j] +=
                            nd.grad(b, j) / static_cast<T>(len);
        });
    }

    // [batch, len, d] -> [batch, heads, len, d/heads]
    Id split_heads(Id ix, int heads) {
        const TensorT<T>& x = nodes_[ix].value;
        const int batch = x.dim(0), len = x.dim(1), d = x.dim(2);
        if (d % heads != 0) throw ContractError("split_heads: d_model not divisible by heads");
        const int dh = d / heads;
        TensorT<T> out({batch, heads, len, dh});
        for (int b = 0; b < batch; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < len; ++l)
                    for (int c = 0; c < dh; ++c)
                        out.v[((static_cast<size_t>(b) * heads + h) * len + l) * dh + c] =
                            x(b, l, h * dh + c);
        return push(std::move(out), {ix}, OpKind::split_heads,
                    [batch, heads, len, dh](Tape& t, Id id) {
                        Node& nd = t.nodes_[id];
                        if (!t.nodes_[nd.inputs[0]].requires_grad) return;
                        TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
                        const int d = heads * dh;
                        for (int b = 0; b < batch; ++b)
                            for (int h = 0; h < heads; ++h)
                                for (int l = 0; l < len; ++l)
                                    for (int c = 0; c < dh; ++c)
                                        g.v[(static_cast<size_t>(b) * len + l) * d + h * dh + c] +=
                                            nd.grad.v[((static_cast<size_t>(b) * heads + h) * len +
                                                       l) * dh + c];
                    });
    }

    // [batch, heads, len, dh] -> [batch, len, heads*dh]
    Id merge_heads(Id ix) {
        const TensorT<T>& x = nodes_[ix].value;
        const int batch = x.dim(0), heads = x.dim(1), len = x.dim(2), dh = x.shape[3];
        TensorT<T> out({batch, len, heads * dh});
        for (int b = 0; b < batch; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < len; ++l)
                    for (int c = 0; c < dh; ++c)
                        out(b, l, h * dh + c) =
                            x.v[((static_cast<size_t>(b) * heads + h) * len + l) * dh + c];
        return push(std::move(out), {ix}, OpKind::merge_heads,
                    [batch, heads, len, dh](Tape& t, Id id) {
                        Node& nd = t.nodes_[id];
                        if (!t.nodes_[nd.inputs[0]].requires_grad) return;
                        TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
                        const int d = heads * dh;
                        for (int b = 0; b < batch; ++b)
                            for (int h = 0; h < heads; ++h)
                                for (int l = 0; l < len; ++l)
                                    for (int c = 0; c < dh; ++c)
                                        g.v[((static_cast<size_t>(b) * heads + h) * len + l) * dh +
                                            c] +=
                                            nd.grad.v[(static_cast<size_t>(b) * len + l) * d +
                                                      h * dh + c];
                    });
    }

    // Mean squared error over all elements -> scalar.
    Id mse(Id ipred, Id itarget) {
        const TensorT<T>& p = nodes_[ipred].value;
        const TensorT<T>& q = nodes_[itarget].value;
        require_same_shape(p, q, "mse");
        T acc = T(0);
        for (int64_t i = 0; i < p.numel(); ++i) {
            const T dlt = p.v[i] - q.v[i];
            acc += dlt * dlt;
        }
        TensorT<T> out({1});
        out.v[0] = acc / static_cast<T>(p.numel());
        return push(std::move(out), {ipred, itarget}, OpKind::mse, [](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            const TensorT<T>& p = t.nodes_[nd.inputs[0]].value;
            const TensorT<T>& q = t.nodes_[nd.inputs[1]].value;
            const T up = nd.grad.v[0];
            const T c = T(2) * up / static_cast<T>(p.numel());
            if (t.nodes_[nd.inputs[0]].requires_grad) {
                TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
                for (int64_t i = 0; i < g.numel(); ++i) g.v[i] += c * (p.v[i] - q.v[i]);
            }
            if (t.nodes_[nd.inputs[1]].requires_grad) {
                TensorT<T>& g = t.grad_buffer(nd.inputs[1]);
                for (int64_t i = 0; i < g.numel(); ++i) g.v[i] -= c * (p.v[i] - q.v[i]);
            }
        });
    }

    Id sum_all(Id ix) {
        const TensorT<T>& x = nodes_[ix].value;
        TensorT<T> out({1});
        T acc = T(0);
        for (int64_t i = 0; i < x.numel(); ++i) acc += x.v[i];
        out.v[0] = acc;
        return push(std::move(out), {ix}, OpKind::sum_all, [](Tape& t, Id id) {
            Node& nd = t.nodes_[id];
            if (!t.nodes_[nd.inputs[0]].requires_grad) return;
            TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
            for (int64_t i = 0; i < g.numel(); ++i) g.v[i] += nd.grad.v[0];
        });
    }

    // Mean cross entropy of logits [batch, classes] against integer labels.
    Id softmax_cross_entropy(Id ilogits, const std::vector<int32_t>& labels) {
        const TensorT<T>& z = nodes_[ilogits].value;
        if (z.rank() != 2) throw ContractError("softmax_cross_entropy: expected rank-2 logits");
        const int batch = z.dim(0), classes = z.dim(1);
        if (static_cast<int>(labels.size()) != batch)
            throw ContractError("softmax_cross_entropy: label count mismatch");
        auto probs = std::make_shared<TensorT<T>>(z.shape);
        T loss = T(0);
        for (int b = 0; b < batch; ++b) {
            const T* zr = z.data() + static_cast<size_t>(b) * classes;
            T mx = zr[0];
            for (int j = 1; j < classes; ++j) mx = std::max(mx, zr[j]);
            T sum = T(0);
            for (int j = 0; j < classes; ++j) {
                (*probs)(b, j) = std::exp(zr[j] - mx);
                sum += (*probs)(b, j);
            }
            for (int j = 0; j < classes; ++j) (*probs)(b, j) /= sum;
            loss -= std::log(std::max((*probs)(b, labels[b]), std::numeric_limits<T>::min()));
        }
        TensorT<T> out({1});
        out.v[0] = loss / static_cast<T>(batch);
        auto labs = std::make_shared<std::vector<int32_t>>(labels);
        return push(std::move(out), {ilogits}, OpKind::softmax_cross_entropy,
                    [probs, labs, batch, classes](Tape& t, Id id) {
                        Node& nd = t.nodes_[id];
                        if (!t.nodes_[nd.inputs[0]].requires_grad) return;
                        TensorT<T>& g = t.grad_buffer(nd.inputs[0]);
                        const T c = nd.grad.v[0] / static_cast<T>(batch);
                        for (int b = 0; b < batch; ++b)
                            for (int j = 0; j < classes; ++j)
                                g(b, j) += c * ((*probs)(b, j) -
                                                (j == (*labs)[b] ? T(1) : T(0)));
                    });
    }

    static T gauss_cdf(T x) {
        return T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    }
    static T gauss_pdf(T x) {
        return T(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
    }

private:
    // Validates shapes and returns (batch, m, k, n). When nt is true, b is
    // [n, k]-shaped (its rows are dotted against rows of a).
    std::tuple<int64_t, int, int, int> matmul_dims(const TensorT<T>& a, const TensorT<T>& b,
                                                   bool nt) const {
        const char* op = nt ? "matmul_nt" : "matmul";
        if (a.rank() < 2 || b.rank() < 2)
            throw ContractError(std::string(op) + ": operands must have rank >= 2, got " +
                                shape_str(a.shape) + " and " + shape_str(b.shape));
        const int m = a.shape[a.rank() - 2];
        const int k = a.shape[a.rank() - 1];
        const int bk = nt ? b.shape[b.rank() - 1] : b.shape[b.rank() - 2];
        const int n = nt ? b.shape[b.rank() - 2] : b.shape[b.rank() - 1];
        if (k != bk)
            throw ContractError(std::string(op) + ": inner dimensions do not match: " +
                                shape_str(a.shape) + " x " + shape_str(b.shape));
        int64_t batch = 1;
        for (int i = 0; i + 2 < a.rank(); ++i) batch *= a.shape[i];
        if (b.rank() != 2) {
            if (b.rank() != a.rank())
                throw ContractError(std::string(op) + ": rank mismatch " + shape_str(a.shape) +
                                    " x " + shape_str(b.shape));
            for (int i = 0; i + 2 < a.rank(); ++i)
                if (a.shape[i] != b.shape[i])
                    throw ContractError(std::string(op) + ": leading dims differ: " +
                                        shape_str(a.shape) + " x " + shape_str(b.shape));
        }
        return {batch, m, k, n};
    }

    std::vector<Node> nodes_;
};

}  // namespace mremq
