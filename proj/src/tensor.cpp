// SPDX-License-Identifier: Apache-2.0

#include "ddit/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace ddit {

namespace {
thread_local bool g_grad_enabled = true;

#ifdef __GLIBC__
// Activations of a few MB are allocated and freed on every step. Serving them
// from the heap instead of fresh mmap pages avoids a page fault per page.
[[maybe_unused]] const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif
} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

namespace detail {

std::shared_ptr<Storage> Storage::zeros(DType dtype, int64_t n) {
    auto s = std::make_shared<Storage>();
    if (dtype == DType::f32)
        s->buf = Buffer<float>(static_cast<size_t>(n), 0.0f);
    else
        s->buf = Buffer<double>(static_cast<size_t>(n), 0.0);
    return s;
}

std::shared_ptr<Storage> Storage::uninit(DType dtype, int64_t n) {
    auto s = std::make_shared<Storage>();
    if (dtype == DType::f32)
        s->buf = Buffer<float>(static_cast<size_t>(n));
    else
        s->buf = Buffer<double>(static_cast<size_t>(n));
    return s;
}

int64_t Storage::size() const {
    return std::visit([](const auto& v) { return static_cast<int64_t>(v.size()); }, buf);
}

template <class T>
Buffer<T>& TensorImpl::grad_values() {
    if (!grad) grad = Storage::zeros(dtype, numel_of(shape));
    return std::get<Buffer<T>>(grad->buf);
}

template Buffer<float>& TensorImpl::grad_values<float>();
template Buffer<double>& TensorImpl::grad_values<double>();

} // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dtype, bool zero = true) {
    auto impl = std::make_shared<detail::TensorImpl>();
    const int64_t n = numel_of(shape);
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    impl->storage = zero ? detail::Storage::zeros(dtype, n) : detail::Storage::uninit(dtype, n);
    return impl;
}

void require(const Tensor& t) {
    if (!t.defined()) throw std::logic_error("use of an undefined tensor");
}

} // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(make_impl(std::move(shape), dtype)); }
Tensor Tensor::empty(Shape shape, DType dtype) { return Tensor(make_impl(std::move(shape), dtype, false)); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.mutable_data<T>();
        std::fill(d.begin(), d.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_vector(const std::vector<double>& values, Shape shape, DType dtype) {
    if (static_cast<int64_t>(values.size()) != numel_of(shape))
        throw ShapeError("from_vector: " + std::to_string(values.size()) + " values for shape " +
                         shape_str(shape));
    Tensor t = zeros(std::move(shape), dtype);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.mutable_data<T>();
        std::transform(values.begin(), values.end(), d.begin(), [](double v) { return static_cast<T>(v); });
    });
    return t;
}

Tensor Tensor::from_floats(std::vector<float> values, Shape shape) {
    if (static_cast<int64_t>(values.size()) != numel_of(shape))
        throw ShapeError("from_floats: size mismatch for shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = DType::f32;
    impl->storage = std::make_shared<detail::Storage>();
    impl->storage->buf = detail::Buffer<float>(values.begin(), values.end());
    return Tensor(impl);
}

Tensor Tensor::from_doubles(std::vector<double> values, Shape shape) {
    if (static_cast<int64_t>(values.size()) != numel_of(shape))
        throw ShapeError("from_doubles: size mismatch for shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = DType::f64;
    impl->storage = std::make_shared<detail::Storage>();
    impl->storage->buf = detail::Buffer<double>(values.begin(), values.end());
    return Tensor(impl);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    std::normal_distribution<double> dist(0.0, stddev);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.mutable_data<T>()) v = static_cast<T>(dist(rng));
    });
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    std::uniform_real_distribution<double> dist(lo, hi);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.mutable_data<T>()) v = static_cast<T>(dist(rng));
    });
    return t;
}

const Shape& Tensor::shape() const {
    require(*this);
    return impl_->shape;
}

int64_t Tensor::dim(int64_t axis) const {
    const int64_t n = ndim();
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n)
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    return impl_->shape[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return numel_of(shape()); }

DType Tensor::dtype() const {
    require(*this);
    return impl_->dtype;
}

template <class T>
std::span<const T> Tensor::data() const {
    require(*this);
    if (impl_->dtype != dtype_of<T>())
        throw std::invalid_argument(std::string("tensor dtype is ") + dtype_name(impl_->dtype));
    const auto& v = std::get<detail::Buffer<T>>(impl_->storage->buf);
    return {v.data(), v.size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
    require(*this);
    if (impl_->dtype != dtype_of<T>())
        throw std::invalid_argument(std::string("tensor dtype is ") + dtype_name(impl_->dtype));
    auto& v = std::get<detail::Buffer<T>>(impl_->storage->buf);
    return {v.data(), v.size()};
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

template <class T>
std::span<T> Tensor::mutable_grad() {
    require(*this);
    auto& g = impl_->grad_values<T>();
    return {g.data(), g.size()};
}

template std::span<float> Tensor::mutable_grad<float>();
template std::span<double> Tensor::mutable_grad<double>();

std::vector<double> Tensor::values() const {
    require(*this);
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                      impl_->storage->buf);
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return at(0);
}

double Tensor::at(int64_t flat_index) const {
    require(*this);
    return std::visit([&](const auto& v) { return static_cast<double>(v.at(static_cast<size_t>(flat_index))); },
                      impl_->storage->buf);
}

bool Tensor::requires_grad() const {
    require(*this);
    return impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool flag) {
    require(*this);
    impl_->requires_grad = flag;
    return *this;
}

Tensor Tensor::grad() const {
    require(*this);
    Tensor g = zeros(impl_->shape, impl_->dtype);
    if (impl_->grad) g.impl_->storage->buf = impl_->grad->buf;
    return g;
}

bool Tensor::has_grad() const {
    require(*this);
    return impl_->grad != nullptr;
}

void Tensor::zero_grad() {
    require(*this);
    impl_->grad.reset();
}

Tensor Tensor::detach() const {
    require(*this);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->storage = impl_->storage;
    return Tensor(impl);
}

Tensor Tensor::clone() const {
    require(*this);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->storage = std::make_shared<detail::Storage>(*impl_->storage);
    return Tensor(impl);
}

Tensor Tensor::to(DType dtype) const {
    require(*this);
    if (dtype == impl_->dtype) return clone();
    return from_vector(values(), impl_->shape, dtype);
}

void Tensor::assign(const Tensor& other) {
    require(*this);
    require(other);
    if (other.shape() != shape())
        throw ShapeError("assign: shape " + shape_str(other.shape()) + " into " + shape_str(shape()));
    if (other.dtype() == dtype()) {
        *impl_->storage = *other.impl_->storage;
        return;
    }
    visit_dtype(dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto dst = mutable_data<T>();
        const auto src = other.values();
        for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
    });
}

void Tensor::backward() const {
    require(*this);
    if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    if (!impl_->requires_grad) return;

    // Iterative post-order DFS gives a topological order; each node visited once.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, size_t>> stack{{impl_.get(), 0}};
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::TensorImpl* child = node->inputs[next++].get();
            if (child && child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    visit_dtype(impl_->dtype, [&](auto tag) {
        using T = decltype(tag);
        impl_->grad_values<T>()[0] += T(1);
    });
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backward && node->grad) node->backward(*node);
    }
    // Release the graph: intermediate nodes drop their closures and gradients.
    for (detail::TensorImpl* node : order) {
        if (node->backward) {
            node->backward = nullptr;
            node->inputs.clear();
            node->grad.reset();
        }
    }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    return visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto y = b.data<T>();
        return std::memcmp(x.data(), y.data(), x.size() * sizeof(T)) == 0;
    });
}

} // namespace ddit
