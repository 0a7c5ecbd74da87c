// SPDX-License-Identifier: Apache-2.0
//
// Analytic FLOP and parameter ledger. Counts follow the implementation's
// matrix products one for one (a multiply-add is 2 FLOPs); normalizations,
// softmax, activations and elementwise ops are not counted.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddit/masking.hpp"
#include "ddit/model.hpp"
#include "ddit/trainer.hpp"

namespace ddit {

// Per-sample forward FLOPs split by where they scale with the sequence.
struct FlopBreakdown {
    double embed = 0;              // patch embedding, always over all S patches
    double conditioning = 0;       // sigma MLP, caption projection and caption pooling attention
    double mixer = 0;              // patch-mixer blocks over all S patches
    double backbone_linear = 0;    // token-wise projections and FFN/MoE on kept tokens
    double backbone_scores = 0;    // self-attention scores and values, quadratic in kept tokens
    double backbone_cross = 0;     // cross-attention scores and values, linear in kept tokens
    double backbone_context = 0;   // cross-attention key/value projections of the caption
    double decoder = 0;            // MaskDiT decoder over all S patches
    double head = 0;               // output projection

    double backbone() const { return backbone_linear + backbone_scores + backbone_cross + backbone_context; }
    double total() const;
};

// Forward FLOPs of one sample whose backbone sees `kept` of the model's
// patches (kept == patches() for unmasked). The head runs on kept tokens
// unless the model has a decoder.
FlopBreakdown flops_forward(const ModelConfig& config, int64_t kept);

// Same model at a different latent side length (square latents).
ModelConfig at_latent_size(const ModelConfig& config, int64_t latent_size);

struct ParamCount {
    int64_t total = 0;
    // Parameters touched per token: MoE layers count the average number of
    // experts per token (experts * capacity / tokens) instead of all experts.
    double active = 0;
    int64_t mixer = 0;
    int64_t backbone = 0;
};

// Analytic parameter count; equals ParamStore::count of the built net.
ParamCount count_params(const ModelConfig& config);

struct CostAssumptions {
    // Sustained training FLOP/s of one node and its hourly price.
    double throughput = 1.536e15;
    double dollars_per_hour = 30.0;
    // Pixel resolution per latent cell (autoencoder downsampling factor).
    int64_t pixels_per_latent = 8;
};

struct PhaseCost {
    std::string name;
    int64_t latent_size = 0;
    int64_t resolution = 0;
    double mask_ratio = 0;
    int64_t steps = 0, batch = 0;
    int64_t patches = 0, kept = 0;
    double forward_per_sample = 0;
    double step_flops = 0;   // batch * 3 * forward (backward = 2 x forward)
    double total_flops = 0;  // steps * step_flops
    double days = 0;
    double dollars = 0;
};

struct CostReport {
    ParamCount params;
    std::vector<PhaseCost> phases;
    double total_flops = 0;
    double days = 0;
    double dollars = 0;
    CostAssumptions assumptions;
};

// Patches seen by the backbone for a pipeline at a masking ratio.
int64_t backbone_tokens(const ModelConfig& config, Pipeline pipeline, double mask_ratio);

// Train FLOPs of one step: batch * 3 * per-sample forward.
double step_flops(const ModelConfig& config, Pipeline pipeline, double mask_ratio, int64_t batch);

CostReport plan_flops(const ModelConfig& config, Pipeline pipeline, const TrainPlan& plan,
                      const CostAssumptions& assumptions = {});

// Narrows an unmasked model until its per-step FLOPs are within `tolerance`
// (relative) of the target, keeping depth and head_dim. The residual width d
// is bisected in steps of head_dim; attention/FFN multipliers, then FFN
// multipliers alone, close the gap left by that rounding.
ModelConfig isoflops_downscale(const ModelConfig& config, double target_step_flops, int64_t batch,
                               double tolerance = 0.02);

// Text table and CSV with one row per phase plus a total row.
std::string format_cost_table(const CostReport& report);
std::string format_cost_csv(const CostReport& report);

} // namespace ddit
