// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ddit/noise.hpp"

using namespace ddit;

namespace {

std::pair<double, double> log_moments(const std::vector<double>& s) {
    double m = 0, v = 0;
    for (double x : s) m += std::log(x);
    m /= static_cast<double>(s.size());
    for (double x : s) v += (std::log(x) - m) * (std::log(x) - m);
    return {m, std::sqrt(v / static_cast<double>(s.size()))};
}

PatchDenoiser constant_denoiser(Tensor out) {
    return [out](const Tensor&, const std::vector<double>&, const KeepIndex* keep) {
        return keep ? gather_kept(out, *keep) : out;
    };
}

} // namespace

TEST_CASE("lognormal sigma moments") {
    Rng rng(11);
    NoiseSpec phase1;
    phase1.p_mean = -0.6;
    phase1.p_std = 1.2;
    const auto [m1, s1] = log_moments(sample_sigma(phase1, 100000, rng));
    CHECK(std::abs(m1 + 0.6) < 0.02);
    CHECK(std::abs(s1 - 1.2) < 0.02);

    NoiseSpec phase2;
    phase2.p_mean = 0.0;
    phase2.p_std = 0.6;
    const auto [m2, s2] = log_moments(sample_sigma(phase2, 100000, rng));
    CHECK(std::abs(m2) < 0.02);
    CHECK(std::abs(s2 - 0.6) < 0.02);

    NoiseSpec degenerate;
    degenerate.p_std = 0.0;
    for (double s : sample_sigma(degenerate, 10, rng)) CHECK(s == doctest::Approx(std::exp(-0.6)).epsilon(1e-15));
    CHECK_THROWS(sample_sigma(phase1, 0, rng));
}

TEST_CASE("noise spec validation") {
    NoiseSpec s;
    CHECK_NOTHROW(s.validate());
    s.sigma_min = 100;
    CHECK_THROWS(s.validate());
    s = {};
    s.sigma_data = 0;
    CHECK_THROWS(s.validate());
}

TEST_CASE("score from denoiser") {
    const Tensor x = Tensor::from_vector({2.0}, {1});
    CHECK(score_from_denoiser(x, Tensor::from_vector({0.0}, {1}), 1.0).at(0) == doctest::Approx(-2.0));
    CHECK(score_from_denoiser(x, x, 0.7).at(0) == 0.0);
    CHECK_THROWS(score_from_denoiser(x, x, 0.0));

    // Gaussian data N(0, sd^2): optimal denoiser x * sd^2 / (sd^2 + s^2), score -x / (sd^2 + s^2).
    Rng rng(5);
    const double sd = 0.5, sigma = 1.3;
    const Tensor xn = Tensor::randn({64}, rng, 2.0, DType::f64);
    const Tensor f = scale(xn, sd * sd / (sd * sd + sigma * sigma));
    const Tensor score = score_from_denoiser(xn, f, sigma);
    for (int64_t i = 0; i < 64; ++i) CHECK(std::abs(score.at(i) + xn.at(i) / (sd * sd + sigma * sigma)) < 1e-6);
}

TEST_CASE("preconditioning coefficients") {
    const Preconditioning p = precondition_coefficients(0.5, 0.5);
    CHECK(p.c_skip == doctest::Approx(0.5));
    CHECK(p.c_in == doctest::Approx(1.0 / std::sqrt(0.5)));
    CHECK(p.c_out == doctest::Approx(0.25 / std::sqrt(0.5)));
    CHECK(p.c_noise == doctest::Approx(std::log(0.5) / 4.0));

    const Preconditioning tiny = precondition_coefficients(1e-8, 0.5);
    CHECK(tiny.c_skip == doctest::Approx(1.0));
    CHECK(tiny.c_out < 1e-7);

    Rng rng(1);
    const Tensor x = Tensor::randn({3, 4}, rng, 1.0, DType::f64);
    const RawNet zero = [](const Tensor& s, double) { return scale(s, 0.0); };
    const Tensor y = precondition(zero, x, 1.7, 0.5);
    const double c_skip = 0.25 / (1.7 * 1.7 + 0.25);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(c_skip * x.at(i)));

    // As sigma -> 0 the output collapses to the input for any bounded raw network.
    const RawNet ones = [](const Tensor& s, double) { return add_scalar(scale(s, 0.0), 1.0); };
    const Tensor z = precondition(ones, x, 1e-9, 0.5);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(z.at(i) - x.at(i)) < 1e-8);
    CHECK_THROWS(precondition_coefficients(0.0, 0.5));
}

TEST_CASE("diffusion loss, masked and unmasked") {
    // Two patches of one element: targets [1, 3], predictions [0, 0], keep patch 0 -> loss 1.
    const Tensor x = Tensor::from_vector({1.0, 3.0}, {1, 2, 1}, DType::f64);
    const Tensor zeros = Tensor::zeros({1, 2, 1}, DType::f64);
    LossDraw draw{{1.0}, Tensor::zeros({1, 2, 1}, DType::f64)};
    const KeepIndex keep{{0}};
    CHECK(diffusion_loss(x, constant_denoiser(zeros), draw, &keep).item() == doctest::Approx(1.0));
    CHECK(diffusion_loss(x, constant_denoiser(zeros), draw, nullptr).item() == doctest::Approx(5.0));
    CHECK(diffusion_loss(x, constant_denoiser(x), draw, nullptr).item() == 0.0);

    const KeepIndex all{{0, 1}};
    CHECK(bitwise_equal(diffusion_loss(x, constant_denoiser(zeros), draw, &all),
                        diffusion_loss(x, constant_denoiser(zeros), draw, nullptr)));
    const KeepIndex empty{{}};
    CHECK_THROWS(diffusion_loss(x, constant_denoiser(zeros), draw, &empty));
    const KeepIndex out_of_range{{2}};
    CHECK_THROWS(diffusion_loss(x, constant_denoiser(zeros), draw, &out_of_range));
    const KeepIndex unsorted{{1, 0}};
    CHECK_THROWS(validate_keep(unsorted, 2));
}

TEST_CASE("masked loss gradient vanishes on dropped rows") {
    Rng rng(2);
    Tensor pred = Tensor::randn({2, 5, 3}, rng, 1.0, DType::f64);
    pred.set_requires_grad(true);
    const Tensor target = Tensor::randn({2, 5, 3}, rng, 1.0, DType::f64);
    const KeepIndex keep{{0, 3}, {1, 4}};
    masked_mse(pred, target, keep).backward();
    const auto g = pred.grad().values();
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t s = 0; s < 5; ++s) {
            const bool kept = std::find(keep[b].begin(), keep[b].end(), s) != keep[b].end();
            for (int64_t p = 0; p < 3; ++p) {
                const double v = g[static_cast<size_t>((b * 5 + s) * 3 + p)];
                if (kept)
                    CHECK(v != 0.0);
                else
                    CHECK(v == 0.0);
            }
        }
}

TEST_CASE("gaussian-optimal denoiser beats perturbed denoisers") {
    Rng rng(9);
    const double sd = 0.5;
    NoiseSpec spec;
    spec.sigma_data = sd;
    const Tensor x = Tensor::randn({512, 4, 2}, rng, sd, DType::f64);
    const LossDraw draw = draw_noise(spec, x.shape(), rng, DType::f64);
    const PatchDenoiser optimal = [&](const Tensor& noisy, const std::vector<double>& sigma, const KeepIndex*) {
        std::vector<double> s(sigma.size());
        for (size_t i = 0; i < s.size(); ++i) s[i] = sd * sd / (sd * sd + sigma[i] * sigma[i]);
        return reshape(mul_rows(reshape(noisy, {512, 8}), Tensor::from_vector(s, {512}, DType::f64)), noisy.shape());
    };
    const double best = diffusion_loss(x, optimal, draw, nullptr).item();
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor delta = Tensor::randn(x.shape(), rng, 0.1, DType::f64);
        const PatchDenoiser perturbed = [&](const Tensor& noisy, const std::vector<double>& sigma,
                                            const KeepIndex* keep) { return add(optimal(noisy, sigma, keep), delta); };
        CHECK(diffusion_loss(x, perturbed, draw, nullptr).item() >= best);
    }
}

TEST_CASE("sigma_data estimate") {
    Rng rng(4);
    std::normal_distribution<float> n(0.0f, 0.5f);
    std::vector<float> v(1000000);
    for (float& f : v) f = n(rng);
    const double sd = estimate_sigma_data(v);
    CHECK(std::abs(sd - 0.5) < 0.01);
    std::vector<float> doubled(v);
    for (float& f : doubled) f *= 2.0f;
    CHECK(std::abs(estimate_sigma_data(doubled) - 2.0 * sd) < 1e-6);
    const std::vector<float> constant(2000, 3.0f);
    CHECK(estimate_sigma_data(constant) == 0.0);
    CHECK_THROWS(estimate_sigma_data(std::span<const float>{}));
}
