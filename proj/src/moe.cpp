// SPDX-License-Identifier: Apache-2.0

#include "ddit/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddit/errors.hpp"

namespace ddit {

void MoEConfig::validate() const {
    if (num_experts < 1) throw ConfigError("moe.num_experts must be >= 1");
    if (!(capacity_factor > 0)) throw ConfigError("moe.capacity_factor must be positive");
    if (!(expert_lr_scale > 0)) throw ConfigError("moe.expert_lr_scale must be positive");
}

int64_t expert_capacity(int64_t tokens, int64_t experts, double capacity_factor) {
    return static_cast<int64_t>(std::floor(capacity_factor * static_cast<double>(tokens) /
                                           static_cast<double>(experts) + 1e-9));
}

Routing route_from_affinity(std::vector<double> affinity, int64_t tokens, int64_t experts, double capacity_factor) {
    if (static_cast<int64_t>(affinity.size()) != tokens * experts)
        throw ShapeError("route_expert_choice: affinity size does not match T x E");
    Routing r;
    r.k = expert_capacity(tokens, experts, capacity_factor);
    r.dense_fallback = r.k < 1;
    const int64_t take = r.dense_fallback ? tokens : std::min(r.k, tokens);
    r.tokens.resize(static_cast<size_t>(experts));
    r.gates.resize(static_cast<size_t>(experts));
    Index order(static_cast<size_t>(tokens));
    for (int64_t e = 0; e < experts; ++e) {
        std::iota(order.begin(), order.end(), 0);
        auto score = [&](int64_t t) { return affinity[static_cast<size_t>(t * experts + e)]; };
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return score(a) > score(b); });
        auto& toks = r.tokens[static_cast<size_t>(e)];
        auto& gates = r.gates[static_cast<size_t>(e)];
        toks.assign(order.begin(), order.begin() + take);
        for (int64_t t : toks) gates.push_back(score(t));
    }
    r.affinity = std::move(affinity);
    return r;
}

Routing route_expert_choice(const std::vector<double>& scores, int64_t tokens, int64_t experts,
                            double capacity_factor) {
    if (static_cast<int64_t>(scores.size()) != tokens * experts)
        throw ShapeError("route_expert_choice: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(tokens) + " x " + std::to_string(experts));
    std::vector<double> aff(scores.size());
    for (int64_t t = 0; t < tokens; ++t) {
        const double* row = scores.data() + t * experts;
        if (!std::all_of(row, row + experts, [](double v) { return std::isfinite(v); }))
            throw std::invalid_argument("route_expert_choice: non-finite score at token " + std::to_string(t));
        const double mx = *std::max_element(row, row + experts);
        double total = 0;
        for (int64_t e = 0; e < experts; ++e) total += aff[static_cast<size_t>(t * experts + e)] = std::exp(row[e] - mx);
        for (int64_t e = 0; e < experts; ++e) aff[static_cast<size_t>(t * experts + e)] /= total;
    }
    return route_from_affinity(std::move(aff), tokens, experts, capacity_factor);
}

std::vector<bool> place_moe_blocks(int64_t depth, bool enabled) {
    if (depth < 1) throw ConfigError("depth must be >= 1");
    std::vector<bool> out(static_cast<size_t>(depth), false);
    if (enabled)
        for (int64_t i = 1; i < depth; i += 2) out[static_cast<size_t>(i)] = true;
    return out;
}

MoELayer::MoELayer(ParamStore& store, const std::string& name, int64_t width, int64_t hidden, Activation activation,
                   const MoEConfig& config_, Rng& rng)
    : config(config_) {
    config.validate();
    router = Linear(store, name + ".router", width, config.num_experts, rng);
    for (int64_t e = 0; e < config.num_experts; ++e)
        experts.emplace_back(store, name + ".expert" + std::to_string(e), width, hidden, activation, rng,
                             config.expert_lr_scale);
}

Tensor MoELayer::operator()(const Tensor& x) const {
    if (x.ndim() != 3) throw ShapeError("moe: expected (B, T, d), got " + shape_str(x.shape()));
    const int64_t batch = x.dim(0), tokens = x.dim(1), width = x.dim(2);
    const int64_t num_e = config.num_experts;
    if (router.in != width) throw ShapeError("moe: router expects width " + std::to_string(router.in));
    const Tensor flat = reshape(x, {batch * tokens, width});
    Tensor affinity = softmax(router(flat));
    const std::vector<double> aff = affinity.values();
    if (detach_gates) affinity = affinity.detach();
    const Tensor gate_source = reshape(affinity, {batch * tokens * num_e, 1});

    std::vector<Index> rows(static_cast<size_t>(num_e)), gate_rows(static_cast<size_t>(num_e));
    for (int64_t b = 0; b < batch; ++b) {
        std::vector<double> slice(aff.begin() + b * tokens * num_e, aff.begin() + (b + 1) * tokens * num_e);
        const Routing r = route_from_affinity(std::move(slice), tokens, num_e, config.capacity_factor);
        for (int64_t e = 0; e < num_e; ++e)
            for (int64_t t : r.tokens[static_cast<size_t>(e)]) {
                rows[static_cast<size_t>(e)].push_back(b * tokens + t);
                gate_rows[static_cast<size_t>(e)].push_back((b * tokens + t) * num_e + e);
            }
    }
    std::vector<Tensor> outs;
    Index all_rows;
    // Fixed expert order keeps the scatter-add deterministic.
    for (int64_t e = 0; e < num_e; ++e) {
        const Index& idx = rows[static_cast<size_t>(e)];
        if (idx.empty()) continue;
        const Tensor y = experts[static_cast<size_t>(e)](gather_rows(flat, idx));
        const Tensor g = gather_rows(gate_source, gate_rows[static_cast<size_t>(e)]);
        outs.push_back(mul_rows(y, g));
        all_rows.insert(all_rows.end(), idx.begin(), idx.end());
    }
    return reshape(scatter_add_rows(concat(outs, 0), all_rows, batch * tokens), {batch, tokens, width});
}

} // namespace ddit
