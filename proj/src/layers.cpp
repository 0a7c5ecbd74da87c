// SPDX-License-Identifier: Apache-2.0

#include "ddit/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "ddit/errors.hpp"

namespace ddit {

Tensor ParamStore::add(const std::string& name, Tensor init, double lr_scale, bool decay) {
    for (const auto& p : params_)
        if (p.name == name) throw std::logic_error("duplicate parameter " + name);
    if (init.dtype() != dtype_) init = init.to(dtype_);
    init.set_requires_grad(true);
    params_.push_back({name, init, lr_scale, decay});
    return init;
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev, Rng& rng, double lr_scale) {
    return add(name, Tensor::randn(std::move(shape), rng, stddev, dtype_), lr_scale, true);
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value, double lr_scale) {
    return add(name, Tensor::full(std::move(shape), value, dtype_), lr_scale, false);
}

const Param& ParamStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p;
    throw std::out_of_range("no parameter named " + name);
}

int64_t ParamStore::count(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& p : params_)
        if (p.name.compare(0, prefix.size(), prefix) == 0) n += p.value.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

Linear::Linear(ParamStore& store, const std::string& name, int64_t in_, int64_t out_, Rng& rng, double lr_scale,
               bool zero_init)
    : in(in_), out(out_) {
    if (zero_init)
        weight = store.add(name + ".weight", Tensor::zeros({in, out}, store.dtype()), lr_scale, true);
    else
        weight = store.normal(name + ".weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, lr_scale);
    bias = store.add(name + ".bias", Tensor::zeros({out}, store.dtype()), lr_scale, false);
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int64_t width) {
    gamma = store.constant(name + ".gamma", {width}, 1.0);
    beta = store.constant(name + ".beta", {width}, 0.0);
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

Tensor split_heads(const Tensor& x, int64_t heads) {
    const int64_t b = x.dim(0), s = x.dim(1), inner = x.dim(2);
    const int64_t dh = inner / heads;
    return reshape(permute(reshape(x, {b, s, heads, dh}), {0, 2, 1, 3}), {b * heads, s, dh});
}

Tensor merge_heads(const Tensor& x, int64_t batch, int64_t heads) {
    const int64_t s = x.dim(1), dh = x.dim(2);
    return reshape(permute(reshape(x, {batch, heads, s, dh}), {0, 2, 1, 3}), {batch, s, heads * dh});
}

Attention::Attention(ParamStore& store, const std::string& name, int64_t width, int64_t context_width,
                     int64_t inner, int64_t head_dim_, bool qk_norm_, Rng& rng)
    : head_dim(head_dim_), qk_norm(qk_norm_) {
    if (head_dim <= 0 || inner % head_dim != 0)
        throw ConfigError(name + ": attention width " + std::to_string(inner) + " is not a multiple of head_dim " +
                          std::to_string(head_dim));
    heads = inner / head_dim;
    q = Linear(store, name + ".q", width, inner, rng);
    k = Linear(store, name + ".k", context_width, inner, rng);
    v = Linear(store, name + ".v", context_width, inner, rng);
    o = Linear(store, name + ".o", inner, width, rng);
}

Tensor Attention::operator()(const Tensor& x, const Tensor& context) const {
    if (x.ndim() != 3 || context.ndim() != 3 || x.dim(0) != context.dim(0))
        throw ShapeError("attention: x " + shape_str(x.shape()) + " vs context " + shape_str(context.shape()));
    const int64_t batch = x.dim(0);
    Tensor qh = split_heads(q(x), heads);
    Tensor kh = split_heads(k(context), heads);
    const Tensor vh = split_heads(v(context), heads);
    if (qk_norm) {
        // Small eps keeps normalized rows at unit variance to ~1e-6.
        qh = layer_norm(qh, {}, {}, 1e-6);
        kh = layer_norm(kh, {}, {}, 1e-6);
    }
    const Tensor scores = scale(bmm(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    return o(merge_heads(bmm(softmax(scores), vh), batch, heads));
}

const char* activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "swiglu"; }

Activation parse_activation(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "swiglu") return Activation::swiglu;
    throw ConfigError("unknown activation '" + s + "' (expected gelu or swiglu)");
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, int64_t width, int64_t hidden,
                         Activation activation_, Rng& rng, double lr_scale)
    : activation(activation_) {
    w1 = Linear(store, name + ".w1", width, hidden, rng, lr_scale);
    if (activation == Activation::gelu) {
        w2 = Linear(store, name + ".w2", hidden, width, rng, lr_scale);
    } else {
        w2 = Linear(store, name + ".w2", width, hidden, rng, lr_scale);
        w3 = Linear(store, name + ".w3", hidden, width, rng, lr_scale);
    }
}

Tensor FeedForward::operator()(const Tensor& x) const {
    if (activation == Activation::gelu) return w2(gelu(w1(x)));
    return w3(mul(silu(w1(x)), w2(x)));
}

} // namespace ddit
