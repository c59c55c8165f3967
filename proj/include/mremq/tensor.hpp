#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mremq/error.hpp"

namespace mremq {

// Dense row-major tensor. T is float for training runs and double for the
// 64-bit gradient-check oracles.
template <class T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> v;

    TensorT() = default;
    explicit TensorT(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ContractError("tensor dimension must be positive, got " + std::to_string(d));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator()(int i) { return v[static_cast<size_t>(i)]; }
    T operator()(int i) const { return v[static_cast<size_t>(i)]; }
    T& operator()(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
    T operator()(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }
    T& operator()(int i, int j, int k) {
        return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    T operator()(int i, int j, int k) const {
        return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

template <class T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ContractError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                            shape_str(b.shape));
}

template <class To, class From>
TensorT<To> tensor_cast(const TensorT<From>& x) {
    TensorT<To> out;
    out.shape = x.shape;
    out.v.resize(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) out.v[i] = static_cast<To>(x.v[i]);
    return out;
}

template <class T>
bool all_finite(const TensorT<T>& x) {
    for (T e : x.v)
        if (!std::isfinite(e)) return false;
    return true;
}

// ---- raw matmul kernels (single 2-D tile; callers loop over leading dims) ----
// Accumulation order is fixed, so results are bit-reproducible run to run.

// C[m x n] = A[m x k] * B[k x n]
template <class T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = T(0);
        for (int p = 0; p < k; ++p) {
            const T aip = a[static_cast<size_t>(i) * k + p];
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C[m x n] = A[m x k] * B[n x k]^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <class T>
void mm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T* arow = a + static_cast<size_t>(p) * m;
        const T* brow = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const T api = arow[i];
            T* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace mremq
