// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale sample metrics: Fréchet distance in a frozen random feature
// space, nearest-centroid class alignment, and PNG grids of latents.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ddit/data.hpp"

namespace ddit {

// Samples as rows: n x dim, row-major.
struct FeatureMatrix {
    int64_t rows = 0, cols = 0;
    std::vector<double> values;
};

// Frozen two-layer map: tanh(W1 x / sqrt(in)) then W2 h / sqrt(hidden).
class FeatureExtractor {
public:
    static constexpr uint64_t default_seed = 0x5EEDF00D;

    FeatureExtractor(int64_t input_dim, int64_t feature_dim = 64, int64_t hidden = 256,
                     uint64_t seed = default_seed);

    int64_t input_dim() const { return in_; }
    int64_t feature_dim() const { return out_; }
    // latents: n records of input_dim floats each.
    FeatureMatrix operator()(std::span<const float> latents) const;

private:
    int64_t in_, out_, hidden_;
    std::vector<double> w1_, w2_;
};

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2). Needs at
// least 2 * dim rows per side.
double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b);

// Fréchet distance between Gaussians given by moments (covariances dim x dim, row-major).
double frechet_from_moments(const std::vector<double>& mu_a, const std::vector<double>& cov_a,
                            const std::vector<double>& mu_b, const std::vector<double>& cov_b);

// Fraction of latents whose nearest class centroid equals their label.
double class_alignment(std::span<const float> latents, int64_t record_size, const std::vector<int32_t>& labels,
                       const std::vector<std::vector<double>>& centroids);

// Writes latents (B, H, W, C) as an RGB grid from the first three channels;
// values map to [0, 255] through v / (4 * value_scale) + 0.5.
void write_png_grid(const std::filesystem::path& path, const Tensor& latents, int64_t columns = 8,
                    int64_t upscale = 4, double value_scale = 0.5);

// Reads an 8-bit RGB PNG (width, height, pixels) for tests.
struct Image {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> rgb;
};
Image read_png(const std::filesystem::path& path);

} // namespace ddit
