// SPDX-License-Identifier: Apache-2.0
//
// Expert-choice mixture of experts: every expert picks its top-k tokens by
// router affinity, so load is balanced by construction.

#pragma once

#include <vector>

#include "ddit/layers.hpp"

namespace ddit {

struct MoEConfig {
    bool enabled = false;
    int64_t num_experts = 8;
    double capacity_factor = 2.0;
    double expert_lr_scale = 0.5;

    void validate() const;
};

// k = floor(C * T / E); below 1 the layer runs dense.
int64_t expert_capacity(int64_t tokens, int64_t experts, double capacity_factor);

struct Routing {
    int64_t k = 0;
    bool dense_fallback = false;
    // Per expert: selected token indices (highest affinity first) and their gates.
    std::vector<Index> tokens;
    std::vector<std::vector<double>> gates;
    // Softmax over experts, (T, E) row-major.
    std::vector<double> affinity;
};

// scores: router logits (T, E) row-major. Ties go to the lower token index.
Routing route_expert_choice(const std::vector<double>& scores, int64_t tokens, int64_t experts,
                            double capacity_factor);

// Routing from already-normalized affinities.
Routing route_from_affinity(std::vector<double> affinity, int64_t tokens, int64_t experts, double capacity_factor);

// True at odd 0-based indices (2nd, 4th, ... block) when enabled.
std::vector<bool> place_moe_blocks(int64_t depth, bool enabled);

struct MoELayer {
    MoEConfig config;
    Linear router;
    std::vector<FeedForward> experts;
    // Test hook: stop gradients from reaching the router through the gates.
    bool detach_gates = false;

    MoELayer() = default;
    MoELayer(ParamStore& store, const std::string& name, int64_t width, int64_t hidden, Activation activation,
             const MoEConfig& config, Rng& rng);
    // x (B, T, d): each sample's T tokens are routed independently.
    Tensor operator()(const Tensor& x) const;
};

} // namespace ddit
