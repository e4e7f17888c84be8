#pragma once

// Dense row-major tensors with define-by-run reverse-mode autodiff.
// The operation set is exactly what the mixer models need; kernels are
// single-threaded and accumulate in a fixed order, so a fixed seed gives
// bitwise-reproducible forward+backward passes.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "kanmix/common.hpp"

namespace kanmix {

namespace detail {

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

// ---------------------------------------------------------------------------
// GEMM kernels, row-major, C += A*B variants. Register-tiled with explicit
// SIMD on GNU-compatible compilers; the k loop is blocked but every block is
// walked sequentially, so each C element sees the same accumulation order on
// every run.
// ---------------------------------------------------------------------------

template <typename T>
void mm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#if defined(__GNUC__) || defined(__clang__)
    typedef T V __attribute__((vector_size(32), aligned(1), may_alias));
    constexpr int64_t L = static_cast<int64_t>(32 / sizeof(T));
    constexpr int64_t MR = 4, NV = 4, NR = NV * L;
    constexpr int64_t KB = 512;  // keeps the live B panel inside L2
    for (int64_t p0 = 0; p0 < k; p0 += KB) {
        const int64_t pend = p0 + KB < k ? p0 + KB : k;
        int64_t i = 0;
        for (; i + MR <= m; i += MR) {
            int64_t j = 0;
            for (; j + NR <= n; j += NR) {
                V acc[MR][NV]{};
                const T* __restrict ab = a + i * k;
                const T* bb = b + j;
                for (int64_t p = p0; p < pend; ++p) {
                    const V* brow = reinterpret_cast<const V*>(bb + p * n);
                    for (int64_t r = 0; r < MR; ++r) {
                        const V av = V{} + ab[r * k + p];
                        for (int64_t v = 0; v < NV; ++v) acc[r][v] += av * brow[v];
                    }
                }
                for (int64_t r = 0; r < MR; ++r) {
                    V* crow = reinterpret_cast<V*>(c + (i + r) * n + j);
                    for (int64_t v = 0; v < NV; ++v) crow[v] += acc[r][v];
                }
            }
            for (; j < n; ++j)
                for (int64_t r = 0; r < MR; ++r) {
                    T acc = 0;
                    for (int64_t p = p0; p < pend; ++p) acc += a[(i + r) * k + p] * b[p * n + j];
                    c[(i + r) * n + j] += acc;
                }
        }
        for (; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                T acc = 0;
                for (int64_t p = p0; p < pend; ++p) acc += a[i * k + p] * b[p * n + j];
                c[i * n + j] += acc;
            }
    }
#else
    constexpr int64_t MR = 6, NR = 16;
    int64_t i = 0;
    for (; i + MR <= m; i += MR) {
        int64_t j = 0;
        for (; j + NR <= n; j += NR) {
            T acc[MR][NR] = {};
            for (int64_t p = 0; p < k; ++p) {
                const T* brow = b + p * n + j;
                for (int64_t r = 0; r < MR; ++r) {
                    const T av = a[(i + r) * k + p];
                    for (int64_t cc = 0; cc < NR; ++cc) acc[r][cc] += av * brow[cc];
                }
            }
            for (int64_t r = 0; r < MR; ++r)
                for (int64_t cc = 0; cc < NR; ++cc) c[(i + r) * n + j + cc] += acc[r][cc];
        }
        for (; j < n; ++j) {
            for (int64_t r = 0; r < MR; ++r) {
                T acc = 0;
                for (int64_t p = 0; p < k; ++p) acc += a[(i + r) * k + p] * b[p * n + j];
                c[(i + r) * n + j] += acc;
            }
        }
    }
    for (; i < m; ++i) {
        int64_t j = 0;
        for (; j + NR <= n; j += NR) {
            T acc[NR] = {};
            for (int64_t p = 0; p < k; ++p) {
                const T av = a[i * k + p];
                const T* brow = b + p * n + j;
                for (int64_t cc = 0; cc < NR; ++cc) acc[cc] += av * brow[cc];
            }
            for (int64_t cc = 0; cc < NR; ++cc) c[i * n + j + cc] += acc[cc];
        }
        for (; j < n; ++j) {
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] += acc;
        }
    }
#endif
}

// Below this volume the transpose-and-retile detour costs more than it saves.
constexpr int64_t kSmallGemm = int64_t{1} << 15;

// C[m,n] += A[m,k] * B^T, B stored [n,k]
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    if (m * k * n < kSmallGemm) {
        for (int64_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            for (int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = 0;
                for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                c[i * n + j] += acc;
            }
        }
        return;
    }
    std::vector<T> bt(static_cast<size_t>(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) bt[static_cast<size_t>(p * n + j)] = b[j * k + p];
    mm_nn(a, bt.data(), c, m, k, n);
}

// C[k,n] += A^T * B, A stored [m,k], B stored [m,n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    if (m * k * n < kSmallGemm) {
        for (int64_t i = 0; i < m; ++i) {
            const T* brow = b + i * n;
            for (int64_t p = 0; p < k; ++p) {
                const T av = a[i * k + p];
                T* crow = c + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    std::vector<T> at(static_cast<size_t>(k * m));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) at[static_cast<size_t>(p * m + i)] = a[i * k + p];
    mm_nn(at.data(), b, c, k, m, n);
}

template <typename T>
inline T sigmoid_stable(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::TensorNode<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::TensorNode<T>>()) {
        node_->shape = std::move(shape);
        node_->values.assign(static_cast<size_t>(numel(node_->shape)), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::TensorNode<T>>()) {
        if (numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->values = std::move(data);
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(node_->values.size()); }

    std::span<T> values() { return node_->values; }
    std::span<const T> values() const { return node_->values; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    bool same_node(const Tensor& o) const { return node_ == o.node_; }

    std::shared_ptr<detail::TensorNode<T>> node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode<T>> node_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed ops. One thread-local instance per scalar
// type; a training step owns its thread, parallel folds each get their own.
// ---------------------------------------------------------------------------

template <typename T>
class GradTape {
public:
    static GradTape& active() {
        thread_local GradTape tape;
        return tape;
    }

    bool recording() const { return enabled_; }
    void set_enabled(bool v) { enabled_ = v; }
    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    void record(std::shared_ptr<detail::TensorNode<T>> out, std::function<void()> backward_fn) {
        entries_.push_back(Entry{std::move(out), std::move(backward_fn)});
    }

    // Seeds d(loss)/d(loss)=1 and replays the record once in reverse.
    // Consumes the tape.
    void backward(Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        loss.grad_mut()[0] = T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->out->grad.empty()) continue;  // dead branch
            it->fn();
        }
        clear();
    }

private:
    struct Entry {
        std::shared_ptr<detail::TensorNode<T>> out;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
    bool enabled_ = true;
};

// RAII: disable recording (evaluation, finite-difference probes).
template <typename T>
class GradPause {
public:
    GradPause() : prev_(GradTape<T>::active().recording()) { GradTape<T>::active().set_enabled(false); }
    ~GradPause() { GradTape<T>::active().set_enabled(prev_); }
    GradPause(const GradPause&) = delete;
    GradPause& operator=(const GradPause&) = delete;

private:
    bool prev_;
};

namespace detail {

template <typename T>
inline bool want_tape(const Tensor<T>& a) {
    return GradTape<T>::active().recording() && a.requires_grad();
}

template <typename T>
inline bool want_tape(const Tensor<T>& a, const Tensor<T>& b) {
    return GradTape<T>::active().recording() && (a.requires_grad() || b.requires_grad());
}

template <typename T>
inline void accumulate(const std::shared_ptr<TensorNode<T>>& node, const T* g, int64_t n) {
    node->ensure_grad();
    T* dst = node->grad.data();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace detail

template <typename T>
void backward(Tensor<T> loss) {
    GradTape<T>::active().backward(loss);
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Batched matmul [..,m,k] x [..,k,n] -> [..,m,n]; leading batch extents
// broadcast against each other (equal or 1).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(a.rank() - 2), ka = a.dim(a.rank() - 1);
    const int64_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (ka != kb)
        throw ShapeError("matmul inner extent mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));

    const int batch_rank = std::max(a.rank(), b.rank()) - 2;
    Shape batch(static_cast<size_t>(batch_rank), 1);
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    auto aligned = [&](const Shape& s, int i) -> int64_t {
        const int off = batch_rank - static_cast<int>(s.size());
        return i < off ? 1 : s[static_cast<size_t>(i - off)];
    };
    for (int i = 0; i < batch_rank; ++i) {
        const int64_t da = aligned(abatch, i), db = aligned(bbatch, i);
        if (da != db && da != 1 && db != 1)
            throw ShapeError("matmul batch extents not broadcastable: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
        batch[static_cast<size_t>(i)] = std::max(da, db);
    }

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);

    const int64_t nbatch = numel(batch);
    // For each flat batch index, the matching flat index into a (resp. b)
    // under broadcasting.
    std::vector<int64_t> amap(static_cast<size_t>(nbatch)), bmap(static_cast<size_t>(nbatch));
    for (int64_t f = 0; f < nbatch; ++f) {
        int64_t rem = f, ai = 0, bi = 0;
        for (int i = 0; i < batch_rank; ++i) {
            int64_t stride = 1;
            for (int j = i + 1; j < batch_rank; ++j) stride *= batch[static_cast<size_t>(j)];
            const int64_t idx = rem / stride;
            rem %= stride;
            const int64_t da = aligned(abatch, i), db = aligned(bbatch, i);
            ai = ai * da + (da == 1 ? 0 : idx);
            bi = bi * db + (db == 1 ? 0 : idx);
        }
        amap[static_cast<size_t>(f)] = ai;
        bmap[static_cast<size_t>(f)] = bi;
    }

    const T* ap = a.values().data();
    const T* bp = b.values().data();
    T* cp = out.values().data();
    for (int64_t f = 0; f < nbatch; ++f)
        detail::mm_nn(ap + amap[static_cast<size_t>(f)] * m * ka, bp + bmap[static_cast<size_t>(f)] * ka * n,
                      cp + f * m * n, m, ka, n);

    if (detail::want_tape(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::active().record(on, [an, bn, on, m, ka, n, nbatch, amap, bmap]() {
            const T* dy = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t f = 0; f < nbatch; ++f)
                    detail::mm_nt(dy + f * m * n, bn->values.data() + bmap[static_cast<size_t>(f)] * ka * n,
                                  an->grad.data() + amap[static_cast<size_t>(f)] * m * ka, m, n, ka);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t f = 0; f < nbatch; ++f)
                    detail::mm_tn(an->values.data() + amap[static_cast<size_t>(f)] * m * ka, dy + f * m * n,
                                  bn->grad.data() + bmap[static_cast<size_t>(f)] * ka * n, m, ka, n);
            }
        });
    }
    return out;
}

// Swap the last two axes of a rank-3 tensor: [b,s,c] -> [b,c,s].
template <typename T>
Tensor<T> transpose_tokens(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ShapeError("transpose_tokens requires a rank-3 tensor, got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
    Tensor<T> out(Shape{b, c, s});
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < s; ++j)
            for (int64_t k = 0; k < c; ++k) op[(i * c + k) * s + j] = xp[(i * s + j) * c + k];

    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, b, s, c]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const T* dy = on->grad.data();
            T* dx = xn->grad.data();
            for (int64_t i = 0; i < b; ++i)
                for (int64_t k = 0; k < c; ++k)
                    for (int64_t j = 0; j < s; ++j) dx[(i * s + j) * c + k] += dy[(i * c + k) * s + j];
        });
    }
    return out;
}

// Copying reshape; backward reshapes the gradient back.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    Tensor<T> out(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on]() {
            detail::accumulate(xn, on->grad.data(), static_cast<int64_t>(on->grad.size()));
        });
    }
    return out;
}

// Elementwise sum; b either matches a's shape or is a suffix of it
// (bias-style trailing broadcast).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const int64_t na = a.size(), nb = b.size();
    const bool suffix = b.rank() <= a.rank() &&
                        std::equal(b.shape().begin(), b.shape().end(),
                                   a.shape().end() - b.rank(), a.shape().end());
    if (!suffix)
        throw ShapeError("add shapes incompatible: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    T* op = out.values().data();
    if (na == nb) {
        for (int64_t i = 0; i < na; ++i) op[i] = ap[i] + bp[i];
    } else {
        for (int64_t i = 0; i < na; ++i) op[i] = ap[i] + bp[i % nb];
    }
    if (detail::want_tape(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::active().record(on, [an, bn, on, na, nb]() {
            const T* dy = on->grad.data();
            if (an->requires_grad) detail::accumulate(an, dy, na);
            if (bn->requires_grad) {
                bn->ensure_grad();
                T* db = bn->grad.data();
                for (int64_t i = 0; i < na; ++i) db[i % nb] += dy[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t n = a.size();
    Tensor<T> out(a.shape());
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
    if (detail::want_tape(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::active().record(on, [an, bn, on, n]() {
            const T* dy = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += dy[i] * bn->values[static_cast<size_t>(i)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) bn->grad[static_cast<size_t>(i)] += dy[i] * an->values[static_cast<size_t>(i)];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    const int64_t n = a.size();
    Tensor<T> out(a.shape());
    const T* ap = a.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * c;
    if (detail::want_tape(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        GradTape<T>::active().record(on, [an, on, n, c]() {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(i)] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    const int64_t n = x.size();
    const T* xp = x.values().data();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += xp[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, n]() {
            xn->ensure_grad();
            const T dy = on->grad[0];
            for (int64_t i = 0; i < n; ++i) xn->grad[static_cast<size_t>(i)] += dy;
        });
    }
    return out;
}

// Per-slice standardization over the last axis (biased variance), then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm requires rank >= 1");
    const int64_t d = x.dim(x.rank() - 1);
    if (d == 0) throw ShapeError("layer_norm over an empty last axis");
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm affine params must have extent " + std::to_string(d));
    if (eps < T(0)) throw ShapeError("layer_norm eps must be >= 0");
    const int64_t rows = x.size() / d;

    Tensor<T> out(x.shape());
    std::vector<T> xhat(static_cast<size_t>(x.size()));
    std::vector<T> inv_std(static_cast<size_t>(rows));
    const T* xp = x.values().data();
    const T* gp = gamma.values().data();
    const T* bp = beta.values().data();
    T* op = out.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xp + r * d;
        T mean = 0;
        for (int64_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<T>(d);
        T var = 0;
        for (int64_t i = 0; i < d; ++i) {
            const T c = row[i] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = istd;
        for (int64_t i = 0; i < d; ++i) {
            const T h = (row[i] - mean) * istd;
            xhat[static_cast<size_t>(r * d + i)] = h;
            op[r * d + i] = gp[i] * h + bp[i];
        }
    }

    if (GradTape<T>::active().recording() &&
        (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                                          inv_std = std::move(inv_std)]() {
            const T* dy = on->grad.data();
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        gn->grad[static_cast<size_t>(i)] += dy[r * d + i] * xhat[static_cast<size_t>(r * d + i)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i) bn->grad[static_cast<size_t>(i)] += dy[r * d + i];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                const T* gp2 = gn->values.data();
                for (int64_t r = 0; r < rows; ++r) {
                    // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    T mean_dh = 0, mean_dh_h = 0;
                    for (int64_t i = 0; i < d; ++i) {
                        const T dh = dy[r * d + i] * gp2[i];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[static_cast<size_t>(r * d + i)];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    const T istd = inv_std[static_cast<size_t>(r)];
                    for (int64_t i = 0; i < d; ++i) {
                        const T dh = dy[r * d + i] * gp2[i];
                        const T h = xhat[static_cast<size_t>(r * d + i)];
                        xn->grad[static_cast<size_t>(r * d + i)] += istd * (dh - mean_dh - h * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    const int64_t n = x.size();
    Tensor<T> out(x.shape());
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * detail::sigmoid_stable(xp[i]);
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, n]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const T s = detail::sigmoid_stable(xn->values[static_cast<size_t>(i)]);
                const T d = s * (T(1) + xn->values[static_cast<size_t>(i)] * (T(1) - s));
                xn->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(i)] * d;
            }
        });
    }
    return out;
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T kInvSqrt2 = T(0.70710678118654752440084436210485L);
    constexpr T kInvSqrt2Pi = T(0.39894228040143267793994605993438L);
    const int64_t n = x.size();
    Tensor<T> out(x.shape());
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < n; ++i)
        op[i] = T(0.5) * xp[i] * (T(1) + std::erf(xp[i] * kInvSqrt2));
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, n]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const T v = xn->values[static_cast<size_t>(i)];
                const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
                const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
                xn->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(i)] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    const int64_t n = x.size();
    Tensor<T> out(x.shape());
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, n]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                if (xn->values[static_cast<size_t>(i)] > T(0))
                    xn->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(i)];
        });
    }
    return out;
}

// Inverted dropout: zero with probability `rate`, scale survivors by
// 1/(1-rate). Identity in eval mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw Error(Error::kInvalidArgument, "dropout rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) {
        Tensor<T> out(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
        if (detail::want_tape(x)) {
            out.set_requires_grad(true);
            auto xn = x.node(), on = out.node();
            GradTape<T>::active().record(on, [xn, on]() {
                detail::accumulate(xn, on->grad.data(), static_cast<int64_t>(on->grad.size()));
            });
        }
        return out;
    }
    const int64_t n = x.size();
    const T inv_keep = T(1.0 / (1.0 - rate));
    std::vector<T> mask(static_cast<size_t>(n));
    Tensor<T> out(x.shape());
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < n; ++i) {
        const T m = rng.bernoulli(rate) ? T(0) : inv_keep;
        mask[static_cast<size_t>(i)] = m;
        op[i] = xp[i] * m;
    }
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, n, mask = std::move(mask)]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                xn->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(i)] * mask[static_cast<size_t>(i)];
        });
    }
    return out;
}

// Mean over the token axis: [b,s,c] -> [b,c] (adaptive average pool, output 1).
template <typename T>
Tensor<T> global_mean_pool(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ShapeError("global_mean_pool requires a rank-3 tensor, got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
    Tensor<T> out(Shape{b, c});
    const T* xp = x.values().data();
    T* op = out.values().data();
    const T inv_s = T(1) / static_cast<T>(s);
    for (int64_t i = 0; i < b; ++i)
        for (int64_t k = 0; k < c; ++k) {
            T acc = 0;
            for (int64_t j = 0; j < s; ++j) acc += xp[(i * s + j) * c + k];
            op[i * c + k] = acc * inv_s;
        }
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, b, s, c, inv_s]() {
            xn->ensure_grad();
            const T* dy = on->grad.data();
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < s; ++j)
                    for (int64_t k = 0; k < c; ++k)
                        xn->grad[static_cast<size_t>((i * s + j) * c + k)] += dy[i * c + k] * inv_s;
        });
    }
    return out;
}

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp with
// max subtraction.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("softmax_cross_entropy expects [batch, classes] logits, got " +
                         shape_str(logits.shape()));
    const int64_t b = logits.dim(0), k = logits.dim(1);
    if (b == 0) throw ShapeError("softmax_cross_entropy on an empty batch");
    if (static_cast<int64_t>(labels.size()) != b)
        throw ShapeError("softmax_cross_entropy label count " + std::to_string(labels.size()) +
                         " != batch " + std::to_string(b));
    for (int64_t i = 0; i < b; ++i)
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k)
            throw Error(Error::kInvalidArgument,
                        "label " + std::to_string(labels[static_cast<size_t>(i)]) + " out of range [0," +
                            std::to_string(k) + ") at batch index " + std::to_string(i));

    const T* lp = logits.values().data();
    std::vector<T> softmax(static_cast<size_t>(b * k));
    T loss = 0;
    for (int64_t i = 0; i < b; ++i) {
        const T* row = lp + i * k;
        T mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T denom = 0;
        for (int64_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
        const T log_denom = std::log(denom);
        for (int64_t j = 0; j < k; ++j)
            softmax[static_cast<size_t>(i * k + j)] = std::exp(row[j] - mx) / denom;
        loss += -(row[labels[static_cast<size_t>(i)]] - mx - log_denom);
    }
    loss /= static_cast<T>(b);
    Tensor<T> out = Tensor<T>::scalar(loss);

    if (detail::want_tape(logits)) {
        out.set_requires_grad(true);
        auto ln = logits.node(), on = out.node();
        GradTape<T>::active().record(on, [ln, on, b, k, labels, softmax = std::move(softmax)]() {
            ln->ensure_grad();
            const T dy = on->grad[0];
            const T inv_b = T(1) / static_cast<T>(b);
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < k; ++j) {
                    T g = softmax[static_cast<size_t>(i * k + j)];
                    if (j == labels[static_cast<size_t>(i)]) g -= T(1);
                    ln->grad[static_cast<size_t>(i * k + j)] += dy * g * inv_b;
                }
        });
    }
    return out;
}

// Non-overlapping p x p patches: [b,c,H,W] -> [b,S,p*p*c]. Patches in
// row-major patch order; within a patch channel-major, then row-major.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int64_t p) {
    if (x.rank() != 4)
        throw ShapeError("patchify expects [b,c,H,W], got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (p < 1 || h % p != 0 || w % p != 0)
        throw ShapeError("patchify: extents " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch size " + std::to_string(p));
    const int64_t gh = h / p, gw = w / p, s = gh * gw, d = p * p * c;
    Tensor<T> out(Shape{b, s, d});
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t i = 0; i < b; ++i)
        for (int64_t py = 0; py < gh; ++py)
            for (int64_t px = 0; px < gw; ++px) {
                T* tok = op + (i * s + py * gw + px) * d;
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t y = 0; y < p; ++y)
                        for (int64_t xx = 0; xx < p; ++xx)
                            tok[ch * p * p + y * p + xx] =
                                xp[((i * c + ch) * h + py * p + y) * w + px * p + xx];
            }
    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, b, c, h, w, p, gh, gw, s, d]() {
            xn->ensure_grad();
            const T* dy = on->grad.data();
            for (int64_t i = 0; i < b; ++i)
                for (int64_t py = 0; py < gh; ++py)
                    for (int64_t px = 0; px < gw; ++px) {
                        const T* tok = dy + (i * s + py * gw + px) * d;
                        for (int64_t ch = 0; ch < c; ++ch)
                            for (int64_t y = 0; y < p; ++y)
                                for (int64_t xx = 0; xx < p; ++xx)
                                    xn->grad[static_cast<size_t>(((i * c + ch) * h + py * p + y) * w +
                                                                 px * p + xx)] +=
                                        tok[ch * p * p + y * p + xx];
                    }
        });
    }
    return out;
}

// y = x W^T + bias, W stored [out,in]. Fused so the graph stays small.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (x.rank() != 2 || w.rank() != 2)
        throw ShapeError("linear expects rank-2 input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    const int64_t b = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (w.dim(1) != in)
        throw ShapeError("linear extent mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    if (bias.size() != out_dim)
        throw ShapeError("linear bias extent " + std::to_string(bias.size()) + " != " +
                         std::to_string(out_dim));
    Tensor<T> out(Shape{b, out_dim});
    T* op = out.values().data();
    const T* bp = bias.values().data();
    for (int64_t i = 0; i < b; ++i) std::memcpy(op + i * out_dim, bp, sizeof(T) * static_cast<size_t>(out_dim));
    detail::mm_nt(x.values().data(), w.values().data(), op, b, in, out_dim);

    if (GradTape<T>::active().recording() &&
        (x.requires_grad() || w.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        auto xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, wn, bn, on, b, in, out_dim]() {
            const T* dy = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                detail::mm_nn(dy, wn->values.data(), xn->grad.data(), b, out_dim, in);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                detail::mm_tn(dy, xn->values.data(), wn->grad.data(), b, out_dim, in);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < b; ++i)
                    for (int64_t j = 0; j < out_dim; ++j) bn->grad[static_cast<size_t>(j)] += dy[i * out_dim + j];
            }
        });
    }
    return out;
}

}  // namespace kanmix
