// SPDX-License-Identifier: Apache-2.0
//
// Raw numeric kernels behind the differentiable ops. Two implementations
// share one signature set: `reference` is plain serial loops kept as the
// test oracle, `parallel` is the OpenMP/vectorized path used by default.
// Both write their outputs (no accumulation) unless a flag says otherwise.

#pragma once

#include <cstdint>

namespace ddit::kernels {

enum class Backend { reference, parallel };

void set_backend(Backend backend);
Backend backend();

// In deterministic mode every reduction runs in a fixed serial order.
void set_deterministic(bool on);
bool deterministic();

int max_threads();

#define DDIT_KERNEL_DECLS                                                                                    \
    template <class T>                                                                                       \
    void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b,    \
              bool accumulate);                                                                              \
    template <class T>                                                                                       \
    void batched_gemm(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k,         \
                      bool trans_a, bool trans_b, bool accumulate);                                          \
    template <class T>                                                                                       \
    void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);                                         \
    template <class T>                                                                                       \
    void softmax_rows_backward(const T* y, const T* dy, T* dx, int64_t rows, int64_t cols);                  \
    template <class T>                                                                                       \
    void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int64_t rows,    \
                        int64_t cols, double eps);                                                           \
    template <class T>                                                                                       \
    void layernorm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,     \
                                 T* dx, T* dgamma, T* dbeta, int64_t rows, int64_t cols);                    \
    template <class T>                                                                                       \
    void gelu(const T* x, T* y, int64_t n);                                                                  \
    template <class T>                                                                                       \
    void gelu_backward(const T* x, const T* dy, T* dx, int64_t n);                                           \
    template <class T>                                                                                       \
    void silu(const T* x, T* y, int64_t n);                                                                  \
    template <class T>                                                                                       \
    void silu_backward(const T* x, const T* dy, T* dx, int64_t n);                                           \
    template <class T>                                                                                       \
    void reduce_axis(const T* x, T* y, int64_t outer, int64_t n, int64_t inner);                            \
    template <class T>                                                                                       \
    double sum_all(const T* x, int64_t n);                                                                   \
    template <class T>                                                                                       \
    void gather_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width);              \
    template <class T>                                                                                       \
    void scatter_add_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width);

namespace reference {
DDIT_KERNEL_DECLS
}

namespace parallel {
DDIT_KERNEL_DECLS
}

#undef DDIT_KERNEL_DECLS

// Dispatch to the active backend.
template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b,
          bool accumulate);
template <class T>
void batched_gemm(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k, bool trans_a,
                  bool trans_b, bool accumulate);
template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);
template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, int64_t rows, int64_t cols);
template <class T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, int64_t rows,
                    int64_t cols, double eps);
template <class T>
void layernorm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx,
                             T* dgamma, T* dbeta, int64_t rows, int64_t cols);
template <class T>
void gelu(const T* x, T* y, int64_t n);
template <class T>
void gelu_backward(const T* x, const T* dy, T* dx, int64_t n);
template <class T>
void silu(const T* x, T* y, int64_t n);
template <class T>
void silu_backward(const T* x, const T* dy, T* dx, int64_t n);
template <class T>
void reduce_axis(const T* x, T* y, int64_t outer, int64_t n, int64_t inner);
template <class T>
double sum_all(const T* x, int64_t n);
template <class T>
void gather_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width);
template <class T>
void scatter_add_rows(const T* src, const int64_t* index, T* dst, int64_t rows, int64_t width);

// Multiply-add FLOPs (2 per MAC) executed by gemm/batched_gemm since the last reset.
// Counted on every call regardless of backend; used to audit the analytic cost ledger.
void reset_flop_counter();
int64_t flop_counter();

} // namespace ddit::kernels
