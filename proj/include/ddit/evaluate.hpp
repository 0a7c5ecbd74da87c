// SPDX-License-Identifier: Apache-2.0
//
// Generation-quality evaluation of a trained net: class-balanced guided
// samples scored by desk-FID and class alignment against real records.

#pragma once

#include <cstdint>
#include <vector>

#include "ddit/data.hpp"
#include "ddit/eval.hpp"
#include "ddit/sampler.hpp"

namespace ddit {

struct EvalResult {
    double desk_fid = 0;
    double alignment = 0;
    int64_t samples = 0;
};

// Conditioning classes for n samples: 0, 1, ..., num_classes - 1, 0, 1, ...
std::vector<int32_t> balanced_labels(int64_t n, int64_t num_classes);

// Guided samples for the given phrase ids, generated in chunks whose noise
// seeds derive from `seed` and the chunk index. Returns (n, H, W, C).
Tensor generate(const DenoiserNet& net, const CaptionStub& stub, const std::vector<int32_t>& phrases,
                const SamplerConfig& config, uint64_t seed, int64_t chunk = 100);

// Scores latents (n, H, W, C) conditioned on `labels` against real records.
EvalResult score_samples(const Tensor& latents, const std::vector<int32_t>& labels, const Dataset& reference,
                         int64_t num_classes, int64_t feature_dim = 64,
                         uint64_t feature_seed = FeatureExtractor::default_seed);

// Desk-FID between two real record sets (for sanity baselines).
double real_frechet(const Dataset& a, const Dataset& b, int64_t feature_dim = 64,
                    uint64_t feature_seed = FeatureExtractor::default_seed);

} // namespace ddit
