// SPDX-License-Identifier: Apache-2.0

#include "ddit/sampler.hpp"

#include <cmath>

#include "ddit/errors.hpp"

namespace ddit {

void SamplerConfig::validate() const {
    if (steps < 1) throw ConfigError("sampler.steps must be >= 1");
    if (!(sigma_min > 0) || !(sigma_max > sigma_min)) throw ConfigError("sampler: need 0 < sigma_min < sigma_max");
    if (!(rho > 0)) throw ConfigError("sampler.rho must be positive");
    if (!(guidance >= 1)) throw ConfigError("sampler.guidance must be >= 1");
    if (!(s_churn >= 0)) throw ConfigError("sampler.s_churn must be >= 0");
}

const char* sampler_mode_name(SamplerMode m) { return m == SamplerMode::ode ? "ode" : "sde"; }

SamplerMode parse_sampler_mode(const std::string& s) {
    if (s == "ode") return SamplerMode::ode;
    if (s == "sde") return SamplerMode::sde;
    throw ConfigError("unknown sampler mode '" + s + "'");
}

std::vector<double> sigma_schedule(const SamplerConfig& c) {
    c.validate();
    std::vector<double> out;
    const double a = std::pow(c.sigma_max, 1.0 / c.rho), b = std::pow(c.sigma_min, 1.0 / c.rho);
    for (int64_t i = 0; i < c.steps; ++i) {
        if (i == 0) {
            out.push_back(c.sigma_max);
        } else if (i == c.steps - 1) {
            out.push_back(c.sigma_min);
        } else {
            const double t = static_cast<double>(i) / static_cast<double>(c.steps - 1);
            out.push_back(std::pow(a + t * (b - a), c.rho));
        }
    }
    out.push_back(0.0);
    return out;
}

Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double w) {
    if (!(w >= 1)) throw std::invalid_argument("guidance must be >= 1");
    if (w == 1.0) return cond;
    return add(uncond, scale(sub(cond, uncond), w));
}

Denoiser guided_denoiser(const DenoiserNet& net, const CaptionBatch& caption, double w) {
    const int64_t b = caption.tokens.dim(0);
    // Conditional and unconditional branches run as one batch of 2B.
    CaptionBatch both;
    both.tokens = concat({caption.tokens, caption.tokens}, 0);
    both.use_null = caption.use_null.empty() ? std::vector<uint8_t>(static_cast<size_t>(b), 0) : caption.use_null;
    both.use_null.resize(static_cast<size_t>(2 * b), 1);
    Index first(static_cast<size_t>(b)), second(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        first[static_cast<size_t>(i)] = i;
        second[static_cast<size_t>(i)] = b + i;
    }
    return [&net, caption, both, first, second, w](const Tensor& x, double sigma) {
        NoGradGuard guard;
        if (w == 1.0) return net.denoise(x, std::vector<double>(static_cast<size_t>(x.dim(0)), sigma), caption);
        const std::vector<double> s(static_cast<size_t>(2 * x.dim(0)), sigma);
        const Tensor out = net.denoise(concat({x, x}, 0), s, both);
        return cfg_combine(gather_rows(out, second), gather_rows(out, first), w);
    };
}

Tensor heun_step(const Tensor& x, double sigma, double sigma_next, const Denoiser& f) {
    if (!(sigma > 0) || sigma_next < 0 || sigma_next > sigma)
        throw std::invalid_argument("heun_step: need sigma > 0 and 0 <= sigma_next <= sigma");
    if (sigma_next == sigma) return x;
    const Tensor denoised = f(x, sigma);
    // The Euler step to sigma = 0 lands exactly on the denoised estimate.
    if (sigma_next == 0.0) return denoised;
    const double h = sigma_next - sigma;
    const Tensor d = scale(sub(x, denoised), 1.0 / sigma);
    const Tensor euler = add(x, scale(d, h));
    const Tensor d2 = scale(sub(euler, f(euler, sigma_next)), 1.0 / sigma_next);
    return add(x, scale(add(d, d2), 0.5 * h));
}

double churn_gamma(const SamplerConfig& c, double sigma) {
    if (sigma < c.s_min || sigma > c.s_max) return 0.0;
    return std::min(c.s_churn / static_cast<double>(c.steps), std::sqrt(2.0) - 1.0);
}

Tensor sde_step(const Tensor& x, double sigma, double sigma_next, const Denoiser& f, double gamma, double s_noise,
                Rng& rng) {
    if (gamma < 0) throw std::invalid_argument("sde_step: negative churn");
    if (gamma == 0.0) return heun_step(x, sigma, sigma_next, f);
    const double sigma_hat = sigma * (1.0 + gamma);
    const double extra = std::sqrt(sigma_hat * sigma_hat - sigma * sigma) * s_noise;
    const Tensor x_hat = add(x, Tensor::randn(x.shape(), rng, extra, x.dtype()));
    return heun_step(x_hat, sigma_hat, sigma_next, f);
}

Tensor sample(const Denoiser& f, const Shape& shape, const SamplerConfig& config, uint64_t seed, DType dtype) {
    const std::vector<double> sigmas = sigma_schedule(config);
    Rng rng(seed);
    Tensor x = Tensor::randn(shape, rng, config.sigma_max, dtype);
    for (size_t i = 0; i + 1 < sigmas.size(); ++i) {
        if (config.mode == SamplerMode::sde)
            x = sde_step(x, sigmas[i], sigmas[i + 1], f, churn_gamma(config, sigmas[i]), config.s_noise, rng);
        else
            x = heun_step(x, sigmas[i], sigmas[i + 1], f);
    }
    return x;
}

Tensor sample_net(const DenoiserNet& net, const CaptionBatch& caption, const SamplerConfig& config, uint64_t seed) {
    const ModelConfig& c = net.config();
    const Shape shape{caption.tokens.dim(0), c.latent_height, c.latent_width, c.channels};
    return sample(guided_denoiser(net, caption, config.guidance), shape, config, seed, net.store().dtype());
}

} // namespace ddit
