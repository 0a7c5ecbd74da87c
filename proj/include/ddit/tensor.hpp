// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor with a reverse-mode gradient tape.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace ddit {

enum class DType { f32, f64 };

using Shape = std::vector<int64_t>;
using Rng = std::mt19937_64;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

// Leaves elements default-initialized (uninitialized for arithmetic types)
// when a buffer is sized without a fill value.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <class T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

struct Storage {
    std::variant<Buffer<float>, Buffer<double>> buf;

    static std::shared_ptr<Storage> zeros(DType dtype, int64_t n);
    // Contents unspecified; for outputs that are overwritten in full.
    static std::shared_ptr<Storage> uninit(DType dtype, int64_t n);
    DType dtype() const { return buf.index() == 0 ? DType::f32 : DType::f64; }
    int64_t size() const;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f32;
    std::shared_ptr<Storage> storage;
    bool requires_grad = false;
    std::shared_ptr<Storage> grad;
    // Graph edges; empty for leaves.
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl&)> backward;
    const char* op = "leaf";

    template <class T>
    Buffer<T>& values() { return std::get<Buffer<T>>(storage->buf); }
    template <class T>
    Buffer<T>& grad_values();
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dtype = DType::f32);
    // Uninitialized contents; the caller writes every element.
    static Tensor empty(Shape shape, DType dtype = DType::f32);
    static Tensor full(Shape shape, double value, DType dtype = DType::f32);
    static Tensor from_vector(const std::vector<double>& values, Shape shape, DType dtype = DType::f32);
    static Tensor from_floats(std::vector<float> values, Shape shape);
    static Tensor from_doubles(std::vector<double> values, Shape shape);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, DType dtype = DType::f32);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype = DType::f32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t ndim() const { return static_cast<int64_t>(shape().size()); }
    // Negative axes count from the end.
    int64_t dim(int64_t axis) const;
    int64_t numel() const;
    DType dtype() const;

    template <class T>
    std::span<const T> data() const;
    template <class T>
    std::span<T> mutable_data();

    std::vector<double> values() const;
    double item() const;
    double at(int64_t flat_index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    // Zero tensor when no gradient has reached this tensor.
    Tensor grad() const;
    bool has_grad() const;
    void zero_grad();
    template <class T>
    std::span<T> mutable_grad();

    // Shares storage, drops graph history.
    Tensor detach() const;
    Tensor clone() const;
    Tensor to(DType dtype) const;
    // Overwrites values in place; shapes must agree. Used by optimizers and loaders.
    void assign(const Tensor& other);

    // Reverse pass from a scalar; frees the traversed graph.
    void backward() const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Calls f(T{}) with T = float or double.
template <class F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
    if (dtype == DType::f32) return f(float{});
    return f(double{});
}

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

bool bitwise_equal(const Tensor& a, const Tensor& b);

} // namespace ddit
