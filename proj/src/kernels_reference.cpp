// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels. Straight loops, no blocking, no threads.

#include <cmath>

#include "ddit/kernels.hpp"

namespace ddit::kernels::reference {

template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b,
          bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (int64_t p = 0; p < k; ++p) {
                const T av = trans_a ? a[p * m + i] : a[i * k + p];
                const T bv = trans_b ? b[j * k + p] : b[p * n + j];
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
}

template <class T>
void batched_gemm(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k, bool trans_a,
                  bool trans_b, bool accumulate) {
    for (int64_t s = 0; s < batch; ++s)
        gemm(a + s * m * k, b + s * k * n, c + s * m * n, m, n, k, trans_a, trans_b, accumulate);
}

template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
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
        for (int64_t j = 0; j < cols; ++j) yr[j] /= total;
    }
}

template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (int64_t j = 0; j < cols; ++j) dot += y[r * cols + j] * dy[r * cols + j];
        for (int64_t j = 0; j < cols; ++j) dx[r * cols + j] = y[r * cols + j] * (dy[r * cols + j] - dot);
    }
}

template <class T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int64_t rows,
                    int64_t cols, double eps) {
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
        for (int64_t j = 0; j < cols; ++j) {
            T v = (xr[j] - mu) * rs;
            if (gamma) v *= gamma[j];
            if (beta) v += beta[j];
            y[r * cols + j] = v;
        }
    }
}

template <class T>
void layernorm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx,
                             T* dgamma, T* dbeta, int64_t rows, int64_t cols) {
    if (dgamma)
        for (int64_t j = 0; j < cols; ++j) dgamma[j] = 0;
    if (dbeta)
        for (int64_t j = 0; j < cols; ++j) dbeta[j] = 0;
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        const T* g = dy + r * cols;
        T sum_g = 0, sum_gx = 0;
        for (int64_t j = 0; j < cols; ++j) {
            const T xhat = (xr[j] - mean[r]) * rstd[r];
            const T gj = gamma ? g[j] * gamma[j] : g[j];
            sum_g += gj;
            sum_gx += gj * xhat;
            if (dgamma) dgamma[j] += g[j] * xhat;
            if (dbeta) dbeta[j] += g[j];
        }
        const T inv_n = T(1) / static_cast<T>(cols);
        for (int64_t j = 0; j < cols; ++j) {
            const T xhat = (xr[j] - mean[r]) * rstd[r];
            const T gj = gamma ? g[j] * gamma[j] : g[j];
            dx[r * cols + j] = rstd[r] * (gj - inv_n * sum_g - xhat * inv_n * sum_gx);
        }
    }
}

template <class T>
void gelu(const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] / std::sqrt(T(2))));
}

template <class T>
void gelu_backward(const T* x, const T* dy, T* dx, int64_t n) {
    const T inv_sqrt_2pi = T(0.3989422804014327);
    for (int64_t i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] / std::sqrt(T(2))));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dx[i] = dy[i] * (cdf + x[i] * pdf);
    }
}

template <class T>
void silu(const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
}

template <class T>
void silu_backward(const T* x, const T* dy, T* dx, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        dx[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
    }
}

template <class T>
void reduce_axis(const T* x, T* y, int64_t outer, int64_t n, int64_t inner) {
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T acc = 0;
            for (int64_t j = 0; j < n; ++j) acc += x[(o * n + j) * inner + i];
            y[o * inner + i] = acc;
        }
}

template <class T>
double sum_all(const T* x, int64_t n) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
    return acc;
}

template <class T>
void gather_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width) {
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < width; ++j) dst[r * width + j] = src[index[r] * width + j];
}

template <class T>
void scatter_add_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width) {
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < width; ++j) dst[index[r] * width + j] += src[r * width + j];
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

} // namespace ddit::kernels::reference
