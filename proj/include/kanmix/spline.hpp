#pragma once

// KAN linear layer: per-connection learnable activation expressed as
// silu base path plus a B-spline expansion over a shared uniform grid,
// evaluated batched.

#include <cmath>
#include <vector>

#include "kanmix/common.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

// Uniform knot grid over [x_min, x_max] with G intervals, degree k, and
// k extra knots beyond each end. Inputs outside the range fall onto the
// extension instead of being clamped.
template <typename T>
struct SplineGrid {
    T x_min = T(-1);
    T x_max = T(1);
    int64_t grid_size = 5;  // interval count G
    int64_t degree = 3;     // spline degree k
    std::vector<T> knots;   // G + 2k + 1, strictly increasing

    static SplineGrid make(T x_min, T x_max, int64_t grid_size, int64_t degree) {
        if (grid_size < 1 || degree < 1)
            throw Error(Error::kInvalidArgument,
                        "spline grid needs grid_size >= 1 and degree >= 1, got G=" +
                            std::to_string(grid_size) + " k=" + std::to_string(degree));
        if (!(x_max > x_min))
            throw Error(Error::kInvalidArgument, "spline grid range must have x_max > x_min");
        SplineGrid g;
        g.x_min = x_min;
        g.x_max = x_max;
        g.grid_size = grid_size;
        g.degree = degree;
        const T h = (x_max - x_min) / static_cast<T>(grid_size);
        g.knots.resize(static_cast<size_t>(grid_size + 2 * degree + 1));
        for (int64_t i = 0; i <= grid_size + 2 * degree; ++i)
            g.knots[static_cast<size_t>(i)] = x_min + static_cast<T>(i - degree) * h;
        return g;
    }

    int64_t basis_count() const { return grid_size + degree; }
    T spacing() const { return (x_max - x_min) / static_cast<T>(grid_size); }
};

namespace detail {

// Cox-de Boor triangle: all G+k degree-k basis values at u, plus (optionally)
// their derivatives via the degree-(k-1) level. scratch must hold G+2k slots.
template <typename T>
void basis_row(const SplineGrid<T>& grid, T u, T* out, T* dout, T* scratch) {
    const int64_t k = grid.degree;
    const int64_t m0 = grid.grid_size + 2 * k;  // degree-0 count
    const T* t = grid.knots.data();
    for (int64_t i = 0; i < m0; ++i)
        scratch[i] = (t[i] <= u && u < t[i + 1]) ? T(1) : T(0);
    for (int64_t d = 1; d <= k; ++d) {
        if (dout && d == k) {
            // derivative of the degree-k basis from the degree-(k-1) level
            for (int64_t i = 0; i < m0 - k; ++i)
                dout[i] = static_cast<T>(k) * (scratch[i] / (t[i + k] - t[i]) -
                                               scratch[i + 1] / (t[i + k + 1] - t[i + 1]));
        }
        for (int64_t i = 0; i < m0 - d; ++i) {
            const T left = (u - t[i]) / (t[i + d] - t[i]) * scratch[i];
            const T right = (t[i + d + 1] - u) / (t[i + d + 1] - t[i + 1]) * scratch[i + 1];
            scratch[i] = left + right;
        }
    }
    for (int64_t i = 0; i < m0 - k; ++i) out[i] = scratch[i];
}

}  // namespace detail

// Degree-k B-spline basis values of every input scalar: [b, n_in] ->
// [b, n_in, G+k]. Differentiable w.r.t. x.
template <typename T>
Tensor<T> bspline_basis(const Tensor<T>& x, const SplineGrid<T>& grid) {
    if (x.rank() != 2)
        throw ShapeError("bspline_basis expects [batch, features], got " + shape_str(x.shape()));
    const int64_t rows = x.dim(0) * x.dim(1);
    const int64_t m = grid.basis_count();
    Tensor<T> out(Shape{x.dim(0), x.dim(1), m});
    std::vector<T> scratch(static_cast<size_t>(grid.grid_size + 2 * grid.degree));
    const T* xp = x.values().data();
    T* op = out.values().data();
    for (int64_t r = 0; r < rows; ++r)
        detail::basis_row(grid, xp[r], op + r * m, static_cast<T*>(nullptr), scratch.data());

    if (detail::want_tape(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::active().record(on, [xn, on, grid, rows, m]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            std::vector<T> basis(static_cast<size_t>(m)), dbasis(static_cast<size_t>(m));
            std::vector<T> scratch2(static_cast<size_t>(grid.grid_size + 2 * grid.degree));
            const T* dy = on->grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                detail::basis_row(grid, xn->values[static_cast<size_t>(r)], basis.data(), dbasis.data(),
                                  scratch2.data());
                T acc = 0;
                for (int64_t j = 0; j < m; ++j) acc += dy[r * m + j] * dbasis[static_cast<size_t>(j)];
                xn->grad[static_cast<size_t>(r)] += acc;
            }
        });
    }
    return out;
}

template <typename T>
struct KanLinear {
    int64_t n_in = 0;
    int64_t n_out = 0;
    SplineGrid<T> grid;
    Tensor<T> base_weight;    // [n_out, n_in]
    Tensor<T> spline_weight;  // [n_out, n_in, G+k]

    int64_t param_count() const { return n_out * n_in * (grid.basis_count() + 1); }
};

// base_weight ~ U(-sqrt(6/n_in), +sqrt(6/n_in)); spline coefficients fitted
// (minimum-norm least squares) so that each connection's spline starts as
// small noise: targets ~ U(-noise/2, +noise/2) at the G+1 in-range knots.
template <typename T>
KanLinear<T> init_kan_linear(int64_t n_in, int64_t n_out, const SplineGrid<T>& grid, Rng& rng,
                             double noise = 0.1) {
    if (n_in < 1 || n_out < 1)
        throw Error(Error::kInvalidArgument, "KanLinear extents must be positive");
    KanLinear<T> layer;
    layer.n_in = n_in;
    layer.n_out = n_out;
    layer.grid = grid;
    const int64_t m = grid.basis_count();

    layer.base_weight = Tensor<T>(Shape{n_out, n_in});
    const double bound = std::sqrt(6.0 / static_cast<double>(n_in));
    auto bw = layer.base_weight.values();
    for (int64_t i = 0; i < n_out * n_in; ++i)
        bw[static_cast<size_t>(i)] = static_cast<T>(rng.uniform(-bound, bound));

    // Collocation matrix A [G+1, m] of basis values at the in-range knots is
    // shared by every connection; fold its min-norm pseudo-inverse into
    // M = A^T (A A^T)^{-1} once (computed in double for conditioning).
    const int64_t np = grid.grid_size + 1;
    SplineGrid<double> dgrid = SplineGrid<double>::make(
        static_cast<double>(grid.x_min), static_cast<double>(grid.x_max), grid.grid_size, grid.degree);
    std::vector<double> A(static_cast<size_t>(np * m));
    std::vector<double> scratch(static_cast<size_t>(dgrid.grid_size + 2 * dgrid.degree));
    for (int64_t r = 0; r < np; ++r) {
        const double u = dgrid.knots[static_cast<size_t>(dgrid.degree + r)];
        detail::basis_row(dgrid, u, A.data() + r * m, static_cast<double*>(nullptr), scratch.data());
    }
    // S = A A^T  (np x np, SPD), solve S X = A  ->  M = A^T X^T... we keep
    // X = S^{-1} A [np, m] and use c = A^T (S^{-1} y) per connection instead.
    std::vector<double> S(static_cast<size_t>(np * np), 0.0);
    for (int64_t r = 0; r < np; ++r)
        for (int64_t c = 0; c < np; ++c) {
            double acc = 0;
            for (int64_t j = 0; j < m; ++j) acc += A[static_cast<size_t>(r * m + j)] * A[static_cast<size_t>(c * m + j)];
            S[static_cast<size_t>(r * np + c)] = acc;
        }
    // Cholesky S = L L^T
    std::vector<double> L(S);
    for (int64_t r = 0; r < np; ++r) {
        for (int64_t c = 0; c <= r; ++c) {
            double acc = L[static_cast<size_t>(r * np + c)];
            for (int64_t j = 0; j < c; ++j)
                acc -= L[static_cast<size_t>(r * np + j)] * L[static_cast<size_t>(c * np + j)];
            if (r == c)
                L[static_cast<size_t>(r * np + c)] = std::sqrt(acc);
            else
                L[static_cast<size_t>(r * np + c)] = acc / L[static_cast<size_t>(c * np + c)];
        }
        for (int64_t c = r + 1; c < np; ++c) L[static_cast<size_t>(r * np + c)] = 0.0;
    }
    auto solve_spd = [&](std::vector<double>& y) {
        for (int64_t r = 0; r < np; ++r) {  // L z = y
            double acc = y[static_cast<size_t>(r)];
            for (int64_t j = 0; j < r; ++j) acc -= L[static_cast<size_t>(r * np + j)] * y[static_cast<size_t>(j)];
            y[static_cast<size_t>(r)] = acc / L[static_cast<size_t>(r * np + r)];
        }
        for (int64_t r = np - 1; r >= 0; --r) {  // L^T w = z
            double acc = y[static_cast<size_t>(r)];
            for (int64_t j = r + 1; j < np; ++j) acc -= L[static_cast<size_t>(j * np + r)] * y[static_cast<size_t>(j)];
            y[static_cast<size_t>(r)] = acc / L[static_cast<size_t>(r * np + r)];
        }
    };

    layer.spline_weight = Tensor<T>(Shape{n_out, n_in, m});
    auto sw = layer.spline_weight.values();
    std::vector<double> y(static_cast<size_t>(np));
    for (int64_t o = 0; o < n_out; ++o)
        for (int64_t i = 0; i < n_in; ++i) {
            for (int64_t r = 0; r < np; ++r) y[static_cast<size_t>(r)] = rng.uniform(-noise / 2.0, noise / 2.0);
            solve_spd(y);
            for (int64_t j = 0; j < m; ++j) {
                double acc = 0;
                for (int64_t r = 0; r < np; ++r) acc += A[static_cast<size_t>(r * m + j)] * y[static_cast<size_t>(r)];
                sw[static_cast<size_t>((o * n_in + i) * m + j)] = static_cast<T>(acc);
            }
        }
    return layer;
}

// y = silu(x) base_weight^T + basis(x) spline_weight^T, with a fused backward
// that recomputes the basis instead of keeping it on the tape (the basis
// tensor is m times larger than the activation it derives from).
template <typename T>
Tensor<T> kan_linear_forward(const KanLinear<T>& layer, const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != layer.n_in)
        throw ShapeError("kan_linear_forward: input " + shape_str(x.shape()) + " does not match n_in=" +
                         std::to_string(layer.n_in));
    const int64_t b = x.dim(0), n_in = layer.n_in, n_out = layer.n_out;
    const int64_t m = layer.grid.basis_count();
    const T* xp = x.values().data();

    std::vector<T> silu_x(static_cast<size_t>(b * n_in));
    for (int64_t i = 0; i < b * n_in; ++i) silu_x[static_cast<size_t>(i)] = xp[i] * detail::sigmoid_stable(xp[i]);

    std::vector<T> basis(static_cast<size_t>(b * n_in * m));
    std::vector<T> scratch(static_cast<size_t>(layer.grid.grid_size + 2 * layer.grid.degree));
    for (int64_t r = 0; r < b * n_in; ++r)
        detail::basis_row(layer.grid, xp[r], basis.data() + r * m, static_cast<T*>(nullptr), scratch.data());

    Tensor<T> out(Shape{b, n_out});
    detail::mm_nt(silu_x.data(), layer.base_weight.values().data(), out.values().data(), b, n_in, n_out);
    detail::mm_nt(basis.data(), layer.spline_weight.values().data(), out.values().data(), b, n_in * m, n_out);

    const Tensor<T>& wb = layer.base_weight;
    const Tensor<T>& ws = layer.spline_weight;
    if (GradTape<T>::active().recording() &&
        (x.requires_grad() || wb.requires_grad() || ws.requires_grad())) {
        out.set_requires_grad(true);
        auto xn = x.node(), wbn = wb.node(), wsn = ws.node(), on = out.node();
        const SplineGrid<T> grid = layer.grid;
        GradTape<T>::active().record(on, [xn, wbn, wsn, on, grid, b, n_in, n_out, m]() {
            const T* dy = on->grad.data();
            const T* xv = xn->values.data();

            std::vector<T> basis2(static_cast<size_t>(b * n_in * m));
            std::vector<T> dbasis(static_cast<size_t>(b * n_in * m));
            std::vector<T> scr(static_cast<size_t>(grid.grid_size + 2 * grid.degree));
            for (int64_t r = 0; r < b * n_in; ++r)
                detail::basis_row(grid, xv[r], basis2.data() + r * m, dbasis.data() + r * m, scr.data());

            if (wbn->requires_grad) {
                wbn->ensure_grad();
                std::vector<T> silu2(static_cast<size_t>(b * n_in));
                for (int64_t i = 0; i < b * n_in; ++i)
                    silu2[static_cast<size_t>(i)] = xv[i] * detail::sigmoid_stable(xv[i]);
                detail::mm_tn(dy, silu2.data(), wbn->grad.data(), b, n_out, n_in);
            }
            if (wsn->requires_grad) {
                wsn->ensure_grad();
                detail::mm_tn(dy, basis2.data(), wsn->grad.data(), b, n_out, n_in * m);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<T> g_base(static_cast<size_t>(b * n_in), T(0));
                detail::mm_nn(dy, wbn->values.data(), g_base.data(), b, n_out, n_in);
                std::vector<T> g_spline(static_cast<size_t>(b * n_in * m), T(0));
                detail::mm_nn(dy, wsn->values.data(), g_spline.data(), b, n_out, n_in * m);
                for (int64_t r = 0; r < b * n_in; ++r) {
                    const T s = detail::sigmoid_stable(xv[r]);
                    const T dsilu = s * (T(1) + xv[r] * (T(1) - s));
                    T acc = g_base[static_cast<size_t>(r)] * dsilu;
                    for (int64_t j = 0; j < m; ++j)
                        acc += g_spline[static_cast<size_t>(r * m + j)] * dbasis[static_cast<size_t>(r * m + j)];
                    xn->grad[static_cast<size_t>(r)] += acc;
                }
            }
        });
    }
    return out;
}

}  // namespace kanmix
