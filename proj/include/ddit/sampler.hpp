// SPDX-License-Identifier: Apache-2.0
//
// EDM sampling: rho-spaced sigma schedule, Heun ODE steps with an Euler final
// step, optional stochastic churn, and classifier-free guidance.

#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ddit/model.hpp"

namespace ddit {

enum class SamplerMode { ode, sde };

struct SamplerConfig {
    int64_t steps = 30;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    double guidance = 3.0;
    SamplerMode mode = SamplerMode::ode;
    double s_churn = 0.0;
    double s_noise = 1.0;
    double s_min = 0.0;
    double s_max = std::numeric_limits<double>::infinity();

    void validate() const;
};

const char* sampler_mode_name(SamplerMode m);
SamplerMode parse_sampler_mode(const std::string& s);

// sigma_0 = sigma_max > ... > sigma_{N-1} = sigma_min, followed by sigma_N = 0.
std::vector<double> sigma_schedule(const SamplerConfig& config);

// Denoised estimate of x at noise level sigma.
using Denoiser = std::function<Tensor(const Tensor& x, double sigma)>;

// uncond + w * (cond - uncond); w == 1 returns cond itself.
Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double w);

// Guided denoiser over latent grids (B, H, W, C); the unconditional branch
// uses the learned null caption.
Denoiser guided_denoiser(const DenoiserNet& net, const CaptionBatch& caption, double w);

Tensor heun_step(const Tensor& x, double sigma, double sigma_next, const Denoiser& f);

// Churn factor for step i of N: min(S_churn / N, sqrt(2) - 1) inside [S_min, S_max], else 0.
double churn_gamma(const SamplerConfig& config, double sigma);

// Raises the noise level to sigma * (1 + gamma) with fresh noise, then takes a Heun step.
Tensor sde_step(const Tensor& x, double sigma, double sigma_next, const Denoiser& f, double gamma, double s_noise,
                Rng& rng);

// x_0 ~ N(0, sigma_max^2 I) then the full schedule.
Tensor sample(const Denoiser& f, const Shape& shape, const SamplerConfig& config, uint64_t seed,
              DType dtype = DType::f32);

// Unmasked, guided sampling from a network; returns (B, H, W, C) latents.
Tensor sample_net(const DenoiserNet& net, const CaptionBatch& caption, const SamplerConfig& config, uint64_t seed);

} // namespace ddit
