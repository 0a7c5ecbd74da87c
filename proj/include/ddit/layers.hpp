// SPDX-License-Identifier: Apache-2.0
//
// Parameter registry and the transformer building blocks.

#pragma once

#include <string>
#include <vector>

#include "ddit/ops.hpp"

namespace ddit {

struct Param {
    std::string name;
    Tensor value;
    double lr_scale = 1.0;
    bool decay = true;
};

// Owns every trainable tensor of a network, in creation order.
class ParamStore {
public:
    explicit ParamStore(DType dtype = DType::f32) : dtype_(dtype) {}

    Tensor add(const std::string& name, Tensor init, double lr_scale = 1.0, bool decay = true);
    Tensor normal(const std::string& name, Shape shape, double stddev, Rng& rng, double lr_scale = 1.0);
    Tensor constant(const std::string& name, Shape shape, double value, double lr_scale = 1.0);

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    const Param& find(const std::string& name) const;
    // Number of scalar parameters whose name starts with prefix.
    int64_t count(const std::string& prefix = "") const;
    DType dtype() const { return dtype_; }
    void zero_grad();

private:
    DType dtype_;
    std::vector<Param> params_;
};

struct Linear {
    Tensor weight;  // (in, out)
    Tensor bias;    // (out)
    int64_t in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng, double lr_scale = 1.0,
           bool zero_init = false);
    Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
    Tensor gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, int64_t width);
    Tensor operator()(const Tensor& x) const;
};

// Multi-head attention of x (B, S, d) over context (B, L, d_ctx). The inner
// width is heads * head_dim; with qk_norm, queries and keys are normalized
// per head before the dot product.
struct Attention {
    int64_t heads = 0, head_dim = 0;
    bool qk_norm = false;
    Linear q, k, v, o;

    Attention() = default;
    Attention(ParamStore& store, const std::string& name, int64_t width, int64_t context_width, int64_t inner,
              int64_t head_dim, bool qk_norm, Rng& rng);
    Tensor operator()(const Tensor& x, const Tensor& context) const;
};

enum class Activation { gelu, swiglu };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& s);

// GELU: W2 gelu(W1 u). SwiGLU: W3 (silu(W1 u) * W2 u).
struct FeedForward {
    Activation activation = Activation::swiglu;
    Linear w1, w2, w3;

    FeedForward() = default;
    FeedForward(ParamStore& store, const std::string& name, int64_t width, int64_t hidden, Activation activation,
                Rng& rng, double lr_scale = 1.0);
    Tensor operator()(const Tensor& x) const;
    int64_t hidden() const { return w1.out; }
};

// Splits (B, S, heads*dh) into (B*heads, S, dh) and back.
Tensor split_heads(const Tensor& x, int64_t heads);
Tensor merge_heads(const Tensor& x, int64_t batch, int64_t heads);

} // namespace ddit
