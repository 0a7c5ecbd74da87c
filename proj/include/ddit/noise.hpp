// SPDX-License-Identifier: Apache-2.0
//
// EDM noise process: lognormal training sigmas, denoiser preconditioning and
// the score/denoiser relation.

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ddit/ops.hpp"

namespace ddit {

struct NoiseSpec {
    double p_mean = -0.6;
    double p_std = 1.2;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double sigma_data = 0.5;

    void validate() const;
};

// sigma = exp(z), z ~ N(p_mean, p_std^2). p_std = 0 is allowed and degenerate.
std::vector<double> sample_sigma(const NoiseSpec& spec, int64_t n, Rng& rng);

// (f - x) / sigma^2
Tensor score_from_denoiser(const Tensor& x, const Tensor& f, double sigma);

struct Preconditioning {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
};

Preconditioning precondition_coefficients(double sigma, double sigma_data);

// Raw network called on c_in * x with c_noise.
using RawNet = std::function<Tensor(const Tensor& scaled_x, double c_noise)>;

// c_skip * x + c_out * raw(c_in * x, c_noise)
Tensor precondition(const RawNet& raw, const Tensor& x, double sigma, double sigma_data);

// Per-sample keep lists over the patch axis; every list strictly increasing and of equal length.
using KeepIndex = std::vector<Index>;

// Validates keep lists against `patches` and returns the common kept count.
int64_t validate_keep(const KeepIndex& keep, int64_t patches);

// Rows of x (B, S, P) listed in keep, as (B, K, P).
Tensor gather_kept(const Tensor& x, const KeepIndex& keep);

// Mean squared error over all elements.
Tensor mse(const Tensor& pred, const Tensor& target);

// MSE between full-length predictions and targets (B, S, P) restricted to kept
// rows, normalized by the kept-element count.
Tensor masked_mse(const Tensor& pred, const Tensor& target, const KeepIndex& keep);

// Denoiser over patch sequences: (B, S, P) noisy input and per-sample sigma to
// denoised rows for the kept patches (all rows when keep is null).
using PatchDenoiser =
    std::function<Tensor(const Tensor& x_noisy, const std::vector<double>& sigma, const KeepIndex* keep)>;

struct LossDraw {
    std::vector<double> sigma;
    Tensor noise;  // (B, S, P), already scaled by sigma
};

// sigma per sample from the lognormal, eps ~ N(0, sigma^2 I).
LossDraw draw_noise(const NoiseSpec& spec, const Shape& patches_shape, Rng& rng, DType dtype = DType::f32);

// Denoising loss on patch tensors x (B, S, P): MSE between f(x + eps) and x
// over the kept rows (all rows when keep is null).
Tensor diffusion_loss(const Tensor& x, const PatchDenoiser& f, const LossDraw& draw, const KeepIndex* keep);

// Elementwise population standard deviation. Rejects empty input.
double estimate_sigma_data(std::span<const float> latents);

} // namespace ddit
