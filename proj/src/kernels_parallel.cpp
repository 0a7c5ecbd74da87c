// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels. Work is split over independent output rows or columns so
// every output element is reduced by a single thread in a fixed order; the
// only order-sensitive reduction (sum_all) falls back to a serial loop in
// deterministic mode.

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <vector>

#include "ddit/kernels.hpp"

namespace ddit::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::parallel};
std::atomic<bool> g_deterministic{false};
std::atomic<int64_t> g_flops{0};

// Below this much work, thread startup costs more than it saves.
constexpr int64_t kParallelGrain = 1 << 14;
} // namespace

void set_backend(Backend b) { g_backend = b; }
Backend backend() { return g_backend; }
void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }
int max_threads() { return omp_get_max_threads(); }
void reset_flop_counter() { g_flops = 0; }
int64_t flop_counter() { return g_flops; }

namespace parallel {

namespace {

// Register tile: MR rows of A against NR packed columns of B. NR spans two
// 256-bit vectors for either precision.
template <class T>
struct Tile {
    static constexpr int mr = 6;
    static constexpr int nr = 64 / static_cast<int>(sizeof(T));
};

// A(i, p) and B(p, j) with optional transposition of the stored operand.
template <class T>
inline T elem_a(const T* a, bool trans, int64_t m, int64_t k, int64_t i, int64_t p) {
    return trans ? a[p * m + i] : a[i * k + p];
}
template <class T>
inline T elem_b(const T* b, bool trans, int64_t n, int64_t k, int64_t p, int64_t j) {
    return trans ? b[j * k + p] : b[p * n + j];
}

// out (mr x nr) = packed A block (k x mr) . packed B panel (k x nr). Every
// output element sums over p in increasing order.
template <class T, int MR, int NR>
inline void micro_kernel(const T* __restrict ap, const T* __restrict bp, int64_t k, T* __restrict out) {
    T acc[MR][NR] = {};
    for (int64_t p = 0; p < k; ++p) {
        const T* b = bp + p * NR;
        const T* a = ap + p * MR;
#pragma GCC unroll 8
        for (int r = 0; r < MR; ++r) {
            const T av = a[r];
#pragma omp simd
            for (int j = 0; j < NR; ++j) acc[r][j] += av * b[j];
        }
    }
    std::memcpy(out, acc, sizeof acc);
}

// c (m x n) (+)= op(a) (m x k) . op(b) (k x n), all row-major.
template <class T>
void gemm_impl(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b,
               bool accumulate, bool threaded) {
    constexpr int MR = Tile<T>::mr, NR = Tile<T>::nr;
    if (k == 0) {
        if (!accumulate) std::memset(c, 0, sizeof(T) * static_cast<size_t>(m * n));
        return;
    }
    const int64_t mb = (m + MR - 1) / MR, nb = (n + NR - 1) / NR;
    thread_local std::vector<T> packed_b;
    packed_b.assign(static_cast<size_t>(nb * NR * k), T(0));
    for (int64_t jb = 0; jb < nb; ++jb) {
        T* dst = packed_b.data() + jb * NR * k;
        const int64_t j0 = jb * NR, cols = std::min<int64_t>(NR, n - j0);
        for (int64_t p = 0; p < k; ++p)
            for (int64_t j = 0; j < cols; ++j) dst[p * NR + j] = elem_b(b, trans_b, n, k, p, j0 + j);
    }
    const T* pb = packed_b.data();
#pragma omp parallel for schedule(static) if (threaded)
    for (int64_t ib = 0; ib < mb; ++ib) {
        thread_local std::vector<T> packed_a;
        packed_a.assign(static_cast<size_t>(MR * k), T(0));
        const int64_t i0 = ib * MR, rows = std::min<int64_t>(MR, m - i0);
        for (int64_t p = 0; p < k; ++p)
            for (int64_t r = 0; r < rows; ++r) packed_a[static_cast<size_t>(p * MR + r)] = elem_a(a, trans_a, m, k, i0 + r, p);
        T tile[MR * NR];
        for (int64_t jb = 0; jb < nb; ++jb) {
            micro_kernel<T, MR, NR>(packed_a.data(), pb + jb * NR * k, k, tile);
            const int64_t j0 = jb * NR, cols = std::min<int64_t>(NR, n - j0);
            for (int64_t r = 0; r < rows; ++r) {
                T* cr = c + (i0 + r) * n + j0;
                const T* tr = tile + r * NR;
                if (accumulate)
                    for (int64_t j = 0; j < cols; ++j) cr[j] += tr[j];
                else
                    std::memcpy(cr, tr, sizeof(T) * static_cast<size_t>(cols));
            }
        }
    }
}

} // namespace

template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b,
          bool accumulate) {
    gemm_impl(a, b, c, m, n, k, trans_a, trans_b, accumulate, m * n * k >= kParallelGrain && m >= 8);
}

template <class T>
void batched_gemm(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k, bool trans_a,
                  bool trans_b, bool accumulate) {
#pragma omp parallel for schedule(static) if (batch * m * n * k >= kParallelGrain && batch > 1)
    for (int64_t s = 0; s < batch; ++s)
        gemm_impl(a + s * m * k, b + s * k * n, c + s * m * n, m, n, k, trans_a, trans_b, accumulate, false);
}

template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = y + r * cols;
        T mx = xr[0];
        for (int64_t j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
        T total = 0;
        for (int64_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            total += yr[j];
        }
        const T inv = T(1) / total;
#pragma omp simd
        for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * cols;
        const T* gr = dy + r * cols;
        T dot = 0;
        for (int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
#pragma omp simd
        for (int64_t j = 0; j < cols; ++j) dx[r * cols + j] = yr[j] * (gr[j] - dot);
    }
}

template <class T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int64_t rows,
                    int64_t cols, double eps) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T mu = 0;
        for (int64_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<T>(cols);
        T var = 0;
        for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(cols);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
        mean[r] = mu;
        rstd[r] = rs;
        T* yr = y + r * cols;
        if (gamma && beta) {
#pragma omp simd
            for (int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
        } else {
            for (int64_t j = 0; j < cols; ++j) {
                T v = (xr[j] - mu) * rs;
                if (gamma) v *= gamma[j];
                if (beta) v += beta[j];
                yr[j] = v;
            }
        }
    }
}

template <class T>
void layernorm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx,
                             T* dgamma, T* dbeta, int64_t rows, int64_t cols) {
    const bool threaded = rows * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) if (threaded)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        const T* g = dy + r * cols;
        T sum_g = 0, sum_gx = 0;
        for (int64_t j = 0; j < cols; ++j) {
            const T xhat = (xr[j] - mean[r]) * rstd[r];
            const T gj = gamma ? g[j] * gamma[j] : g[j];
            sum_g += gj;
            sum_gx += gj * xhat;
        }
        const T inv_n = T(1) / static_cast<T>(cols);
        for (int64_t j = 0; j < cols; ++j) {
            const T xhat = (xr[j] - mean[r]) * rstd[r];
            const T gj = gamma ? g[j] * gamma[j] : g[j];
            dx[r * cols + j] = rstd[r] * (gj - inv_n * sum_g - xhat * inv_n * sum_gx);
        }
    }
    if (!dgamma && !dbeta) return;
    // Column sums over rows: one thread per column block, rows in order.
#pragma omp parallel for schedule(static) if (threaded)
    for (int64_t j = 0; j < cols; ++j) {
        T sg = 0, sb = 0;
        for (int64_t r = 0; r < rows; ++r) {
            const T g = dy[r * cols + j];
            sg += g * (x[r * cols + j] - mean[r]) * rstd[r];
            sb += g;
        }
        if (dgamma) dgamma[j] = sg;
        if (dbeta) dbeta[j] = sb;
    }
}

template <class T>
void gelu(const T* x, T* y, int64_t n) {
    const T inv_sqrt2 = T(0.7071067811865476);
#pragma omp parallel for schedule(static) if (n >= kParallelGrain)
    for (int64_t i = 0; i < n; ++i) y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
}

template <class T>
void gelu_backward(const T* x, const T* dy, T* dx, int64_t n) {
    const T inv_sqrt2 = T(0.7071067811865476);
    const T inv_sqrt_2pi = T(0.3989422804014327);
#pragma omp parallel for schedule(static) if (n >= kParallelGrain)
    for (int64_t i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dx[i] = dy[i] * (cdf + x[i] * pdf);
    }
}

template <class T>
void silu(const T* x, T* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParallelGrain)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
}

template <class T>
void silu_backward(const T* x, const T* dy, T* dx, int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParallelGrain)
    for (int64_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        dx[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
    }
}

template <class T>
void reduce_axis(const T* x, T* y, int64_t outer, int64_t n, int64_t inner) {
#pragma omp parallel for schedule(static) if (outer > 1 && outer * n * inner >= kParallelGrain)
    for (int64_t o = 0; o < outer; ++o) {
        T* yo = y + o * inner;
        if (inner == 1) {
            T acc = 0;
            for (int64_t j = 0; j < n; ++j) acc += x[o * n + j];
            yo[0] = acc;
            continue;
        }
        std::memset(yo, 0, sizeof(T) * static_cast<size_t>(inner));
        for (int64_t j = 0; j < n; ++j) {
            const T* xr = x + (o * n + j) * inner;
#pragma omp simd
            for (int64_t i = 0; i < inner; ++i) yo[i] += xr[i];
        }
    }
}

template <class T>
double sum_all(const T* x, int64_t n) {
    double acc = 0;
    if (deterministic() || n < kParallelGrain) {
        for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
        return acc;
    }
#pragma omp parallel for reduction(+ : acc) schedule(static)
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
    return acc;
}

template <class T>
void gather_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width) {
#pragma omp parallel for schedule(static) if (rows * width >= kParallelGrain)
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(dst + r * width, src + index[r] * width, sizeof(T) * static_cast<size_t>(width));
}

template <class T>
void scatter_add_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width) {
    // Rows may repeat an index, so rows stay serial; columns vectorize.
    for (int64_t r = 0; r < rows; ++r) {
        T* d = dst + index[r] * width;
        const T* s = src + r * width;
#pragma omp simd
        for (int64_t j = 0; j < width; ++j) d[j] += s[j];
    }
}

#define DDIT_INSTANTIATE(T)                                                                                   \
    template void gemm<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool, bool, bool);              \
    template void batched_gemm<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, int64_t, bool, bool,    \
                                  bool);                                                                      \
    template void softmax_rows<T>(const T*, T*, int64_t, int64_t);                                           \
    template void softmax_rows_backward<T>(const T*, const T*, T*, int64_t, int64_t);                        \
    template void layernorm_rows<T>(const T*, const T*, const T*, T*, T*, T*, int64_t, int64_t, double);     \
    template void layernorm_rows_backward<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*,   \
                                             int64_t, int64_t);                                               \
    template void gelu<T>(const T*, T*, int64_t);                                                            \
    template void gelu_backward<T>(const T*, const T*, T*, int64_t);                                         \
    template void silu<T>(const T*, T*, int64_t);                                                            \
    template void silu_backward<T>(const T*, const T*, T*, int64_t);                                         \
    template void reduce_axis<T>(const T*, T*, int64_t, int64_t, int64_t);                                   \
    template double sum_all<T>(const T*, int64_t);                                                           \
    template void gather_rows<T>(const T*, const int64_t*, T*, int64_t, int64_t);                            \
    template void scatter_add_rows<T>(const T*, const int64_t*, T*, int64_t, int64_t);

DDIT_INSTANTIATE(float)
DDIT_INSTANTIATE(double)
#undef DDIT_INSTANTIATE

} // namespace parallel

// Backend dispatch.

#define DDIT_DISPATCH(name, ...)                                                                              \
    (g_backend.load(std::memory_order_relaxed) == Backend::reference ? reference::name(__VA_ARGS__)          \
                                                                      : parallel::name(__VA_ARGS__))

template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b,
          bool accumulate) {
    g_flops.fetch_add(2 * m * n * k, std::memory_order_relaxed);
    DDIT_DISPATCH(gemm, a, b, c, m, n, k, trans_a, trans_b, accumulate);
}

template <class T>
void batched_gemm(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k, bool trans_a,
                  bool trans_b, bool accumulate) {
    g_flops.fetch_add(2 * batch * m * n * k, std::memory_order_relaxed);
    DDIT_DISPATCH(batched_gemm, a, b, c, batch, m, n, k, trans_a, trans_b, accumulate);
}

template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
    DDIT_DISPATCH(softmax_rows, x, y, rows, cols);
}

template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, int64_t rows, int64_t cols) {
    DDIT_DISPATCH(softmax_rows_backward, y, dy, dx, rows, cols);
}

template <class T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int64_t rows,
                    int64_t cols, double eps) {
    DDIT_DISPATCH(layernorm_rows, x, gamma, beta, y, mean, rstd, rows, cols, eps);
}

template <class T>
void layernorm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx,
                             T* dgamma, T* dbeta, int64_t rows, int64_t cols) {
    DDIT_DISPATCH(layernorm_rows_backward, x, gamma, mean, rstd, dy, dx, dgamma, dbeta, rows, cols);
}

template <class T>
void gelu(const T* x, T* y, int64_t n) {
    DDIT_DISPATCH(gelu, x, y, n);
}

template <class T>
void gelu_backward(const T* x, const T* dy, T* dx, int64_t n) {
    DDIT_DISPATCH(gelu_backward, x, dy, dx, n);
}

template <class T>
void silu(const T* x, T* y, int64_t n) {
    DDIT_DISPATCH(silu, x, y, n);
}

template <class T>
void silu_backward(const T* x, const T* dy, T* dx, int64_t n) {
    DDIT_DISPATCH(silu_backward, x, dy, dx, n);
}

template <class T>
void reduce_axis(const T* x, T* y, int64_t outer, int64_t n, int64_t inner) {
    DDIT_DISPATCH(reduce_axis, x, y, outer, n, inner);
}

template <class T>
double sum_all(const T* x, int64_t n) {
    return DDIT_DISPATCH(sum_all, x, n);
}

template <class T>
void gather_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width) {
    DDIT_DISPATCH(gather_rows, src, index, dst, rows, width);
}

template <class T>
void scatter_add_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width) {
    DDIT_DISPATCH(scatter_add_rows, src, index, dst, rows, width);
}

#undef DDIT_DISPATCH

#define DDIT_INSTANTIATE(T)                                                                                   \
    template void gemm<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool, bool, bool);              \
    template void batched_gemm<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, int64_t, bool, bool,    \
                                  bool);                                                                      \
    template void softmax_rows<T>(const T*, T*, int64_t, int64_t);                                           \
    template void softmax_rows_backward<T>(const T*, const T*, T*, int64_t, int64_t);                        \
    template void layernorm_rows<T>(const T*, const T*, const T*, T*, T*, T*, int64_t, int64_t, double);     \
    template void layernorm_rows_backward<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*,   \
                                             int64_t, int64_t);                                               \
    template void gelu<T>(const T*, T*, int64_t);                                                            \
    template void gelu_backward<T>(const T*, const T*, T*, int64_t);                                         \
    template void silu<T>(const T*, T*, int64_t);                                                            \
    template void silu_backward<T>(const T*, const T*, T*, int64_t);                                         \
    template void reduce_axis<T>(const T*, T*, int64_t, int64_t, int64_t);                                   \
    template double sum_all<T>(const T*, int64_t);                                                           \
    template void gather_rows<T>(const T*, const int64_t*, T*, int64_t, int64_t);                            \
    template void scatter_add_rows<T>(const T*, const int64_t*, T*, int64_t, int64_t);

DDIT_INSTANTIATE(float)
DDIT_INSTANTIATE(double)
#undef DDIT_INSTANTIATE

} // namespace ddit::kernels
