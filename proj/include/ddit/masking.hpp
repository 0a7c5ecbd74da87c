// SPDX-License-Identifier: Apache-2.0
//
// Patch masks and the masked training objectives: naive masking at the
// input, MaskDiT with a decoder and reconstruction loss, and deferred masking
// after the patch mixer.

#pragma once

#include <string>
#include <vector>

#include "ddit/model.hpp"

namespace ddit {

enum class MaskLayout { random, block, square };
enum class Pipeline { unmasked, naive, maskdit, deferred };

const char* layout_name(MaskLayout l);
MaskLayout parse_layout(const std::string& s);
const char* pipeline_name(Pipeline p);
Pipeline parse_pipeline(const std::string& s);

struct Mask {
    std::vector<uint8_t> keep;
    double ratio = 0.0;
    MaskLayout layout = MaskLayout::random;
    int64_t block = 1;
    uint64_t seed = 0;

    Index kept() const;
    Index dropped() const;
    int64_t kept_count() const;
};

// S - round(ratio * S), ties away from zero.
int64_t keep_count(int64_t patches, double ratio);

Mask make_random_mask(int64_t patches, double ratio, uint64_t seed);
// Drops whole b x b blocks of a g x g patch grid. When the kept share cannot
// be made of whole blocks but is a square number of patches (e.g. b = g/2 at
// ratio 0.75), a single square of kept patches is placed at random instead.
Mask make_block_mask(int64_t grid, int64_t block, double ratio, uint64_t seed);
// One contiguous kept square of side g * sqrt(1 - ratio).
Mask make_square_mask(int64_t grid, double ratio, uint64_t seed);

struct MaskConfig {
    Pipeline pipeline = Pipeline::deferred;
    MaskLayout layout = MaskLayout::random;
    int64_t block = 1;
    double gamma = 0.1;

    void validate() const;
};

Mask make_mask(const MaskConfig& config, int64_t grid_h, int64_t grid_w, double ratio, uint64_t seed);

KeepIndex keep_index(const std::vector<Mask>& masks);

struct LossParts {
    Tensor total;
    double diff = 0.0;
    double mae = 0.0;
    int64_t kept = 0;
};

// x (B, S, P) clean patches; draw holds sigma and the scaled noise.
LossParts train_loss_unmasked(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                              const LossDraw& draw);
LossParts train_loss_naive(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption, const LossDraw& draw,
                           const std::vector<Mask>& masks);
LossParts train_loss_deferred(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                              const LossDraw& draw, const std::vector<Mask>& masks);
LossParts train_loss_maskdit(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                             const LossDraw& draw, const std::vector<Mask>& masks, double gamma);

// MaskDiT objective on given full-length predictions: L_diff on kept rows
// against x, L_mae on dropped rows against the noisy input.
LossParts maskdit_objective(const Tensor& pred, const Tensor& x, const Tensor& noisy, const std::vector<Mask>& masks,
                            double gamma);

LossParts train_loss(Pipeline pipeline, const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                     const LossDraw& draw, const std::vector<Mask>& masks, double gamma);

} // namespace ddit
