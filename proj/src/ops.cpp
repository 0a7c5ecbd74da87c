// SPDX-License-Identifier: Apache-2.0

#include "ddit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <type_traits>

#include "ddit/kernels.hpp"

namespace ddit {

namespace {

using detail::TensorImpl;

constexpr int64_t kGrain = 1 << 14;

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw std::invalid_argument(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                                    dtype_name(b.dtype()));
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

bool tracks(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Marks `out` as produced by `op` from `inputs`.
void link(Tensor& out, std::initializer_list<const Tensor*> inputs, const char* op,
          std::function<void(TensorImpl&)> fn) {
    TensorImpl* o = out.impl();
    o->requires_grad = true;
    o->op = op;
    for (const Tensor* t : inputs) o->inputs.push_back(t->defined() ? t->impl_ptr() : nullptr);
    o->backward = std::move(fn);
}

template <class T>
const T* ptr(const Tensor& t) {
    return t.data<T>().data();
}

template <class T>
T* mptr(Tensor& t) {
    return t.mutable_data<T>().data();
}

template <class T>
T* gptr(TensorImpl* t) {
    return t->grad_values<T>().data();
}

template <class T>
const T* vptr(TensorImpl* t) {
    return t->values<T>().data();
}

// b broadcast against a: b's shape is a suffix of a's, or b is a single element.
int64_t broadcast_width(const Tensor& a, const Tensor& b, const char* op) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (b.numel() == 1) return 1;
    if (sb.size() > sa.size()) shape_fail(op, a, b);
    if (!std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size()))) shape_fail(op, a, b);
    return b.numel();
}

enum class BinOp { add, sub, mul, div };

template <class T>
inline T apply(BinOp op, T x, T y) {
    switch (op) {
    case BinOp::add: return x + y;
    case BinOp::sub: return x - y;
    case BinOp::mul: return x * y;
    case BinOp::div: return x / y;
    }
    return T(0);
}

const char* bin_name(BinOp op) {
    switch (op) {
    case BinOp::add: return "add";
    case BinOp::sub: return "sub";
    case BinOp::mul: return "mul";
    case BinOp::div: return "div";
    }
    return "?";
}

// Calls f with the op as a compile-time constant so inner loops carry no branch.
template <class F>
void with_op(BinOp op, F&& f) {
    switch (op) {
    case BinOp::add: return f(std::integral_constant<BinOp, BinOp::add>{});
    case BinOp::sub: return f(std::integral_constant<BinOp, BinOp::sub>{});
    case BinOp::mul: return f(std::integral_constant<BinOp, BinOp::mul>{});
    case BinOp::div: return f(std::integral_constant<BinOp, BinOp::div>{});
    }
}

Tensor binary(const Tensor& a_in, const Tensor& b_in, BinOp op) {
    const char* name = bin_name(op);
    check_defined(a_in, name);
    check_defined(b_in, name);
    check_same_dtype(a_in, b_in, name);
    // Commutative ops may broadcast either side.
    const bool swap = (op == BinOp::add || op == BinOp::mul) && a_in.numel() < b_in.numel();
    const Tensor& a = swap ? b_in : a_in;
    const Tensor& b = swap ? a_in : b_in;
    const int64_t nb = broadcast_width(a, b, name);
    const int64_t n = a.numel();
    const int64_t reps = n / nb;
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = ptr<T>(a);
        const T* y = ptr<T>(b);
        T* z = mptr<T>(out);
        with_op(op, [&](auto o) {
#pragma omp parallel for schedule(static) if (n >= kGrain)
            for (int64_t r = 0; r < reps; ++r) {
                const T* xr = x + r * nb;
                T* zr = z + r * nb;
#pragma omp simd
                for (int64_t j = 0; j < nb; ++j) zr[j] = apply(o.value, xr[j], y[j]);
            }
        });
    });
    if (!tracks({&a, &b})) return out;
    link(out, {&a, &b}, name, [op, reps, nb](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            const T* x = vptr<T>(ia);
            const T* y = vptr<T>(ib);
            with_op(op, [&](auto o) {
                constexpr BinOp k = decltype(o)::value;
                if (ia->requires_grad) {
                    T* ga = gptr<T>(ia);
#pragma omp parallel for schedule(static) if (reps * nb >= kGrain)
                    for (int64_t r = 0; r < reps; ++r) {
                        const T* gr = g + r * nb;
                        T* gar = ga + r * nb;
#pragma omp simd
                        for (int64_t j = 0; j < nb; ++j) {
                            if constexpr (k == BinOp::add || k == BinOp::sub) gar[j] += gr[j];
                            else if constexpr (k == BinOp::mul) gar[j] += gr[j] * y[j];
                            else gar[j] += gr[j] / y[j];
                        }
                    }
                }
                if (ib->requires_grad) {
                    T* gb = gptr<T>(ib);
                    // Serial over repeats keeps the accumulation order fixed.
                    for (int64_t r = 0; r < reps; ++r) {
                        const T* gr = g + r * nb;
                        const T* xr = x + r * nb;
#pragma omp simd
                        for (int64_t j = 0; j < nb; ++j) {
                            if constexpr (k == BinOp::add) gb[j] += gr[j];
                            else if constexpr (k == BinOp::sub) gb[j] -= gr[j];
                            else if constexpr (k == BinOp::mul) gb[j] += gr[j] * xr[j];
                            else gb[j] -= gr[j] * xr[j] / (y[j] * y[j]);
                        }
                    }
                }
            });
        });
    });
    return out;
}

enum class UnOp { exp, log, sqrt, square, gelu, silu };

const char* un_name(UnOp op) {
    switch (op) {
    case UnOp::exp: return "exp";
    case UnOp::log: return "log";
    case UnOp::sqrt: return "sqrt";
    case UnOp::square: return "square";
    case UnOp::gelu: return "gelu";
    case UnOp::silu: return "silu";
    }
    return "?";
}

Tensor unary(const Tensor& a, UnOp op) {
    check_defined(a, un_name(op));
    const int64_t n = a.numel();
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = ptr<T>(a);
        T* y = mptr<T>(out);
        switch (op) {
        case UnOp::gelu: kernels::gelu(x, y, n); return;
        case UnOp::silu: kernels::silu(x, y, n); return;
        default: break;
        }
#pragma omp parallel for schedule(static) if (n >= kGrain)
        for (int64_t i = 0; i < n; ++i) {
            switch (op) {
            case UnOp::exp: y[i] = std::exp(x[i]); break;
            case UnOp::log: y[i] = std::log(x[i]); break;
            case UnOp::sqrt: y[i] = std::sqrt(x[i]); break;
            case UnOp::square: y[i] = x[i] * x[i]; break;
            default: break;
            }
        }
    });
    if (!tracks({&a})) return out;
    link(out, {&a}, un_name(op), [op, n](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            const T* x = vptr<T>(ia);
            const T* y = vptr<T>(&self);
            T* ga = gptr<T>(ia);
            if (op == UnOp::gelu || op == UnOp::silu) {
                std::vector<T> tmp(static_cast<size_t>(n));
                if (op == UnOp::gelu)
                    kernels::gelu_backward(x, g, tmp.data(), n);
                else
                    kernels::silu_backward(x, g, tmp.data(), n);
                for (int64_t i = 0; i < n; ++i) ga[i] += tmp[static_cast<size_t>(i)];
                return;
            }
#pragma omp parallel for schedule(static) if (n >= kGrain)
            for (int64_t i = 0; i < n; ++i) {
                switch (op) {
                case UnOp::exp: ga[i] += g[i] * y[i]; break;
                case UnOp::log: ga[i] += g[i] / x[i]; break;
                case UnOp::sqrt: ga[i] += g[i] / (T(2) * y[i]); break;
                case UnOp::square: ga[i] += g[i] * T(2) * x[i]; break;
                default: break;
                }
            }
        });
    });
    return out;
}

// dst[perm-ordered index] from src; when accumulate, dst += permuted(src).
template <class T>
void permute_copy(const T* src, const Shape& src_shape, const std::vector<int>& perm, T* dst, bool inverse,
                  bool accumulate) {
    const size_t nd = src_shape.size();
    std::vector<int64_t> src_strides(nd, 1);
    for (size_t i = nd - 1; i-- > 0;) src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    // Iterate over the output in row-major order. Output axis i is source axis perm[i].
    Shape out_shape(nd);
    std::vector<int64_t> step(nd);
    for (size_t i = 0; i < nd; ++i) {
        out_shape[i] = src_shape[static_cast<size_t>(perm[i])];
        step[i] = src_strides[static_cast<size_t>(perm[i])];
    }
    const int64_t n = numel_of(src_shape);
    std::vector<int64_t> idx(nd, 0);
    int64_t off = 0;
    const int64_t inner = out_shape[nd - 1];
    const int64_t inner_step = step[nd - 1];
    for (int64_t o = 0; o < n; o += inner) {
        if (!inverse) {
            if (accumulate)
                for (int64_t j = 0; j < inner; ++j) dst[o + j] += src[off + j * inner_step];
            else
                for (int64_t j = 0; j < inner; ++j) dst[o + j] = src[off + j * inner_step];
        } else {
            // Scatter direction: dst is in source layout, src in output layout.
            if (accumulate)
                for (int64_t j = 0; j < inner; ++j) dst[off + j * inner_step] += src[o + j];
            else
                for (int64_t j = 0; j < inner; ++j) dst[off + j * inner_step] = src[o + j];
        }
        for (size_t ax = nd - 1; ax-- > 0;) {
            off += step[ax];
            if (++idx[ax] < out_shape[ax]) break;
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    check_same_dtype(a, b, "matmul");
    if (b.ndim() != 2 || a.ndim() < 1 || a.dim(-1) != b.dim(0)) shape_fail("matmul", a, b);
    const int64_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out = Tensor::empty(out_shape, a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::gemm(ptr<T>(a), ptr<T>(b), mptr<T>(out), m, n, k, false, false, false);
    });
    if (!tracks({&a, &b})) return out;
    link(out, {&a, &b}, "matmul", [m, n, k](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            if (ia->requires_grad) kernels::gemm(g, vptr<T>(ib), gptr<T>(ia), m, k, n, false, true, true);
            if (ib->requires_grad) kernels::gemm(vptr<T>(ia), g, gptr<T>(ib), k, n, m, true, false, true);
        });
    });
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    check_defined(a, "bmm");
    check_defined(b, "bmm");
    check_same_dtype(a, b, "bmm");
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0)) shape_fail("bmm", a, b);
    const int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const int64_t n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k) shape_fail("bmm", a, b);
    Tensor out = Tensor::empty({batch, m, n}, a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::batched_gemm(ptr<T>(a), ptr<T>(b), mptr<T>(out), batch, m, n, k, false, transpose_b, false);
    });
    if (!tracks({&a, &b})) return out;
    link(out, {&a, &b}, "bmm", [batch, m, n, k, transpose_b](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            if (ia->requires_grad)
                kernels::batched_gemm(g, vptr<T>(ib), gptr<T>(ia), batch, m, k, n, false, !transpose_b, true);
            if (ib->requires_grad) {
                if (transpose_b)
                    kernels::batched_gemm(g, vptr<T>(ia), gptr<T>(ib), batch, n, k, m, true, false, true);
                else
                    kernels::batched_gemm(vptr<T>(ia), g, gptr<T>(ib), batch, k, n, m, true, false, true);
            }
        });
    });
    return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    check_defined(a, "permute");
    const size_t nd = a.shape().size();
    std::vector<int> sorted(perm);
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> iota(nd);
    std::iota(iota.begin(), iota.end(), 0);
    if (perm.size() != nd || sorted != iota)
        throw ShapeError("permute: invalid permutation for shape " + shape_str(a.shape()));
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = a.shape()[static_cast<size_t>(perm[i])];
    Tensor out = Tensor::empty(out_shape, a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        permute_copy(ptr<T>(a), a.shape(), perm, mptr<T>(out), false, false);
    });
    if (!tracks({&a})) return out;
    Shape src_shape = a.shape();
    link(out, {&a}, "permute", [perm, src_shape](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            permute_copy(gptr<T>(&self), src_shape, perm, gptr<T>(ia), true, true);
        });
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    check_defined(a, "transpose");
    if (a.ndim() < 2) throw ShapeError("transpose: needs at least 2 axes, got " + shape_str(a.shape()));
    std::vector<int> perm(static_cast<size_t>(a.ndim()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a, "reshape");
    int64_t known = 1, infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one -1");
            infer = static_cast<int64_t>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && a.numel() % known == 0) shape[static_cast<size_t>(infer)] = a.numel() / known;
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->dtype = a.dtype();
    impl->storage = a.impl()->storage;
    Tensor out(impl);
    if (!tracks({&a})) return out;
    const int64_t n = a.numel();
    link(out, {&a}, "reshape", [n](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            T* ga = gptr<T>(ia);
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div); }

Tensor scale(const Tensor& a, double s) {
    check_defined(a, "scale");
    const int64_t n = a.numel();
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = ptr<T>(a);
        T* y = mptr<T>(out);
        const T f = static_cast<T>(s);
        for (int64_t i = 0; i < n; ++i) y[i] = x[i] * f;
    });
    if (!tracks({&a})) return out;
    link(out, {&a}, "scale", [n, s](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            T* ga = gptr<T>(self.inputs[0].get());
            const T f = static_cast<T>(s);
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * f;
        });
    });
    return out;
}

Tensor mul_rows(const Tensor& a, const Tensor& s) {
    check_defined(a, "mul_rows");
    check_defined(s, "mul_rows");
    check_same_dtype(a, s, "mul_rows");
    const int64_t rows = a.dim(0), width = a.numel() / rows;
    if (s.numel() != rows) shape_fail("mul_rows", a, s);
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = ptr<T>(a);
        const T* f = ptr<T>(s);
        T* y = mptr<T>(out);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < width; ++j) y[r * width + j] = x[r * width + j] * f[r];
    });
    if (!tracks({&a, &s})) return out;
    link(out, {&a, &s}, "mul_rows", [rows, width](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* is = self.inputs[1].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            const T* x = vptr<T>(ia);
            const T* f = vptr<T>(is);
            if (ia->requires_grad) {
                T* ga = gptr<T>(ia);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < width; ++j) ga[r * width + j] += g[r * width + j] * f[r];
            }
            if (is->requires_grad) {
                T* gs = gptr<T>(is);
                for (int64_t r = 0; r < rows; ++r) {
                    T acc = 0;
                    for (int64_t j = 0; j < width; ++j) acc += g[r * width + j] * x[r * width + j];
                    gs[r] += acc;
                }
            }
        });
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    check_defined(a, "add_scalar");
    const int64_t n = a.numel();
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = ptr<T>(a);
        T* y = mptr<T>(out);
        for (int64_t i = 0; i < n; ++i) y[i] = x[i] + static_cast<T>(s);
    });
    if (!tracks({&a})) return out;
    link(out, {&a}, "add_scalar", [n](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            T* ga = gptr<T>(self.inputs[0].get());
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    });
    return out;
}

Tensor exp(const Tensor& a) { return unary(a, UnOp::exp); }
Tensor log(const Tensor& a) { return unary(a, UnOp::log); }
Tensor sqrt(const Tensor& a) { return unary(a, UnOp::sqrt); }
Tensor square(const Tensor& a) { return unary(a, UnOp::square); }
Tensor gelu(const Tensor& a) { return unary(a, UnOp::gelu); }
Tensor silu(const Tensor& a) { return unary(a, UnOp::silu); }

Tensor sum(const Tensor& a, int64_t axis) {
    check_defined(a, "sum");
    const int64_t nd = a.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("sum: axis out of range for " + shape_str(a.shape()));
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < nd; ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t n = s[static_cast<size_t>(axis)];
    Shape out_shape;
    for (int64_t i = 0; i < nd; ++i)
        if (i != axis) out_shape.push_back(s[static_cast<size_t>(i)]);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::reduce_axis(ptr<T>(a), mptr<T>(out), outer, n, inner);
    });
    if (!tracks({&a})) return out;
    link(out, {&a}, "sum_axis", [outer, n, inner](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            T* ga = gptr<T>(self.inputs[0].get());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < inner; ++i) ga[(o * n + j) * inner + i] += g[o * inner + i];
        });
    });
    return out;
}

Tensor mean(const Tensor& a, int64_t axis) {
    const int64_t n = a.dim(axis);
    return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    const int64_t n = a.numel();
    Tensor out = Tensor::zeros({1}, a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        mptr<T>(out)[0] = static_cast<T>(kernels::sum_all(ptr<T>(a), n));
    });
    if (!tracks({&a})) return out;
    link(out, {&a}, "sum_all", [n](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T g = gptr<T>(&self)[0];
            T* ga = gptr<T>(self.inputs[0].get());
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        });
    });
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& a) {
    check_defined(a, "softmax");
    const int64_t cols = a.dim(-1), rows = a.numel() / cols;
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::softmax_rows(ptr<T>(a), mptr<T>(out), rows, cols);
    });
    if (!tracks({&a})) return out;
    link(out, {&a}, "softmax", [rows, cols](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            std::vector<T> tmp(static_cast<size_t>(rows * cols));
            kernels::softmax_rows_backward(vptr<T>(&self), gptr<T>(&self), tmp.data(), rows, cols);
            T* ga = gptr<T>(self.inputs[0].get());
            for (int64_t i = 0; i < rows * cols; ++i) ga[i] += tmp[static_cast<size_t>(i)];
        });
    });
    return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    check_defined(a, "layer_norm");
    const int64_t cols = a.dim(-1), rows = a.numel() / cols;
    for (const Tensor* p : {&gamma, &beta}) {
        if (!p->defined()) continue;
        check_same_dtype(a, *p, "layer_norm");
        if (p->numel() != cols) shape_fail("layer_norm", a, *p);
    }
    Tensor out = Tensor::empty(a.shape(), a.dtype());
    auto stats = std::make_shared<std::vector<double>>();
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> mu(static_cast<size_t>(rows)), rs(static_cast<size_t>(rows));
        kernels::layernorm_rows(ptr<T>(a), gamma.defined() ? ptr<T>(gamma) : nullptr,
                                beta.defined() ? ptr<T>(beta) : nullptr, mptr<T>(out), mu.data(), rs.data(), rows,
                                cols, eps);
        stats->assign(mu.begin(), mu.end());
        stats->insert(stats->end(), rs.begin(), rs.end());
    });
    if (!tracks({&a, &gamma, &beta})) return out;
    link(out, {&a, &gamma, &beta}, "layer_norm", [rows, cols, stats](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ig = self.inputs[1].get();
        TensorImpl* ib = self.inputs[2].get();
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            std::vector<T> mu(stats->begin(), stats->begin() + rows), rs(stats->begin() + rows, stats->end());
            std::vector<T> dx(static_cast<size_t>(rows * cols)), dg(static_cast<size_t>(cols)),
                db(static_cast<size_t>(cols));
            kernels::layernorm_rows_backward(vptr<T>(ia), ig ? vptr<T>(ig) : nullptr, mu.data(), rs.data(),
                                             gptr<T>(&self), dx.data(), ig ? dg.data() : nullptr,
                                             ib ? db.data() : nullptr, rows, cols);
            if (ia->requires_grad) {
                T* ga = gptr<T>(ia);
                for (int64_t i = 0; i < rows * cols; ++i) ga[i] += dx[static_cast<size_t>(i)];
            }
            if (ig && ig->requires_grad) {
                T* gg = gptr<T>(ig);
                for (int64_t j = 0; j < cols; ++j) gg[j] += dg[static_cast<size_t>(j)];
            }
            if (ib && ib->requires_grad) {
                T* gb = gptr<T>(ib);
                for (int64_t j = 0; j < cols; ++j) gb[j] += db[static_cast<size_t>(j)];
            }
        });
    });
    return out;
}

Tensor gather_rows(const Tensor& a, const Index& index) {
    check_defined(a, "gather_rows");
    if (index.empty()) throw ShapeError("gather_rows: empty index list");
    const int64_t rows = a.dim(0), width = a.numel() / rows;
    for (int64_t i : index)
        if (i < 0 || i >= rows)
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<int64_t>(index.size());
    Tensor out = Tensor::empty(out_shape, a.dtype());
    const int64_t m = static_cast<int64_t>(index.size());
    visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::gather_rows(ptr<T>(a), index.data(), mptr<T>(out), m, width);
    });
    if (!tracks({&a})) return out;
    auto idx = std::make_shared<Index>(index);
    link(out, {&a}, "gather_rows", [idx, m, width](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            kernels::scatter_add_rows(gptr<T>(&self), idx->data(), gptr<T>(self.inputs[0].get()), m, width);
        });
    });
    return out;
}

Tensor scatter_add_rows(const Tensor& src, const Index& index, int64_t rows) {
    check_defined(src, "scatter_add_rows");
    const int64_t m = src.dim(0), width = src.numel() / m;
    if (static_cast<int64_t>(index.size()) != m)
        throw ShapeError("scatter_add_rows: " + std::to_string(index.size()) + " indices for " +
                         shape_str(src.shape()));
    for (int64_t i : index)
        if (i < 0 || i >= rows)
            throw ShapeError("scatter_add_rows: index " + std::to_string(i) + " out of range for " +
                             std::to_string(rows) + " rows");
    Shape out_shape = src.shape();
    out_shape[0] = rows;
    Tensor out = Tensor::zeros(out_shape, src.dtype());
    visit_dtype(src.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::scatter_add_rows(ptr<T>(src), index.data(), mptr<T>(out), m, width);
    });
    if (!tracks({&src})) return out;
    auto idx = std::make_shared<Index>(index);
    link(out, {&src}, "scatter_add_rows", [idx, m, width](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            std::vector<T> tmp(static_cast<size_t>(m * width));
            kernels::gather_rows(gptr<T>(&self), idx->data(), tmp.data(), m, width);
            T* gs = gptr<T>(self.inputs[0].get());
            for (int64_t i = 0; i < m * width; ++i) gs[i] += tmp[static_cast<size_t>(i)];
        });
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Tensor& first = parts.front();
    check_defined(first, "concat");
    const int64_t nd = first.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range for " + shape_str(first.shape()));
    Shape out_shape = first.shape();
    out_shape[static_cast<size_t>(axis)] = 0;
    std::vector<int64_t> extents;
    for (const Tensor& p : parts) {
        check_defined(p, "concat");
        check_same_dtype(first, p, "concat");
        if (p.ndim() != nd) shape_fail("concat", first, p);
        for (int64_t i = 0; i < nd; ++i)
            if (i != axis && p.shape()[static_cast<size_t>(i)] != first.shape()[static_cast<size_t>(i)])
                shape_fail("concat", first, p);
        extents.push_back(p.shape()[static_cast<size_t>(axis)]);
        out_shape[static_cast<size_t>(axis)] += extents.back();
    }
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];
    const int64_t total = out_shape[static_cast<size_t>(axis)];
    Tensor out = Tensor::empty(out_shape, first.dtype());
    visit_dtype(first.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* y = mptr<T>(out);
        int64_t offset = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            const T* x = ptr<T>(parts[p]);
            const int64_t len = extents[p] * inner;
            for (int64_t o = 0; o < outer; ++o)
                std::copy(x + o * len, x + (o + 1) * len, y + (o * total + offset) * inner);
            offset += extents[p];
        }
    });
    bool any = false;
    if (grad_enabled())
        for (const Tensor& p : parts) any = any || p.requires_grad();
    if (!any) return out;
    TensorImpl* o = out.impl();
    o->requires_grad = true;
    o->op = "concat";
    for (const Tensor& p : parts) o->inputs.push_back(p.impl_ptr());
    o->backward = [extents, outer, inner, total](TensorImpl& self) {
        visit_dtype(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = gptr<T>(&self);
            int64_t offset = 0;
            for (size_t p = 0; p < extents.size(); ++p) {
                TensorImpl* ip = self.inputs[p].get();
                const int64_t len = extents[p] * inner;
                if (ip->requires_grad) {
                    T* gp = gptr<T>(ip);
                    for (int64_t oo = 0; oo < outer; ++oo)
                        for (int64_t j = 0; j < len; ++j) gp[oo * len + j] += g[(oo * total + offset) * inner + j];
                }
                offset += extents[p];
            }
        });
    };
    return out;
}

} // namespace ddit
