// SPDX-License-Identifier: Apache-2.0

#include "ddit/noise.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ddit {

void NoiseSpec::validate() const {
    if (!(sigma_min > 0) || !(sigma_max > sigma_min))
        throw std::invalid_argument("noise: need 0 < sigma_min < sigma_max");
    if (!(p_std > 0)) throw std::invalid_argument("noise: p_std must be positive");
    if (!(sigma_data > 0)) throw std::invalid_argument("noise: sigma_data must be positive");
}

std::vector<double> sample_sigma(const NoiseSpec& spec, int64_t n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_sigma: n must be >= 1");
    if (spec.p_std < 0) throw std::invalid_argument("sample_sigma: negative p_std");
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> out(static_cast<size_t>(n));
    for (auto& s : out) s = std::exp(spec.p_mean + spec.p_std * z(rng));
    return out;
}

Tensor score_from_denoiser(const Tensor& x, const Tensor& f, double sigma) {
    if (!(sigma > 0)) throw std::invalid_argument("score_from_denoiser: sigma must be positive");
    if (x.shape() != f.shape()) throw ShapeError("score_from_denoiser: shapes differ");
    return scale(sub(f, x), 1.0 / (sigma * sigma));
}

Preconditioning precondition_coefficients(double sigma, double sigma_data) {
    if (!(sigma > 0)) throw std::invalid_argument("precondition: sigma must be positive");
    const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
    const double root = std::sqrt(s2 + d2);
    return {d2 / (s2 + d2), sigma * sigma_data / root, 1.0 / root, std::log(sigma) / 4.0};
}

Tensor precondition(const RawNet& raw, const Tensor& x, double sigma, double sigma_data) {
    const Preconditioning c = precondition_coefficients(sigma, sigma_data);
    return add(scale(x, c.c_skip), scale(raw(scale(x, c.c_in), c.c_noise), c.c_out));
}

int64_t validate_keep(const KeepIndex& keep, int64_t patches) {
    if (keep.empty()) throw std::invalid_argument("keep index: no samples");
    const int64_t k = static_cast<int64_t>(keep.front().size());
    if (k == 0) throw std::invalid_argument("keep index: empty keep set");
    for (size_t b = 0; b < keep.size(); ++b) {
        const Index& row = keep[b];
        if (static_cast<int64_t>(row.size()) != k)
            throw std::invalid_argument("keep index: sample " + std::to_string(b) + " keeps " +
                                        std::to_string(row.size()) + " patches, expected " + std::to_string(k));
        for (size_t i = 0; i < row.size(); ++i) {
            if (row[i] < 0 || row[i] >= patches)
                throw std::out_of_range("keep index: patch " + std::to_string(row[i]) + " out of range [0, " +
                                        std::to_string(patches) + ")");
            if (i > 0 && row[i] <= row[i - 1])
                throw std::invalid_argument("keep index: indices must be strictly increasing");
        }
    }
    return k;
}

Tensor gather_kept(const Tensor& x, const KeepIndex& keep) {
    if (x.ndim() != 3) throw ShapeError("gather_kept: expected (B, S, P), got " + shape_str(x.shape()));
    const int64_t batch = x.dim(0), s = x.dim(1), p = x.dim(2);
    if (static_cast<int64_t>(keep.size()) != batch)
        throw ShapeError("gather_kept: " + std::to_string(keep.size()) + " keep lists for batch " +
                         std::to_string(batch));
    const int64_t k = validate_keep(keep, s);
    Index flat;
    flat.reserve(static_cast<size_t>(batch * k));
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i : keep[static_cast<size_t>(b)]) flat.push_back(b * s + i);
    return reshape(gather_rows(reshape(x, {batch * s, p}), flat), {batch, k, p});
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    return mean(square(sub(pred, target)));
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, const KeepIndex& keep) {
    return mse(gather_kept(pred, keep), gather_kept(target, keep));
}

LossDraw draw_noise(const NoiseSpec& spec, const Shape& patches_shape, Rng& rng, DType dtype) {
    LossDraw draw;
    draw.sigma = sample_sigma(spec, patches_shape.at(0), rng);
    draw.noise = Tensor::randn(patches_shape, rng, 1.0, dtype);
    const size_t per = static_cast<size_t>(numel_of(patches_shape) / patches_shape[0]);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto n = draw.noise.mutable_data<T>();
        for (size_t b = 0; b < draw.sigma.size(); ++b)
            for (size_t j = 0; j < per; ++j) n[b * per + j] *= static_cast<T>(draw.sigma[b]);
    });
    return draw;
}

Tensor diffusion_loss(const Tensor& x, const PatchDenoiser& f, const LossDraw& draw, const KeepIndex* keep) {
    if (draw.noise.shape() != x.shape()) throw ShapeError("diffusion_loss: noise and latents differ in shape");
    const Tensor noisy = add(x, draw.noise);
    const Tensor pred = f(noisy, draw.sigma, keep);
    if (!keep) return mse(pred, x);
    return mse(pred, gather_kept(x, *keep));
}

double estimate_sigma_data(std::span<const float> latents) {
    if (latents.empty()) throw std::invalid_argument("estimate_sigma_data: empty sample");
    double mean = 0;
    for (float v : latents) mean += v;
    mean /= static_cast<double>(latents.size());
    double var = 0;
    for (float v : latents) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(latents.size()));
}

} // namespace ddit
