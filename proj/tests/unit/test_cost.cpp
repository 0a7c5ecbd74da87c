// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ddit/config.hpp"
#include "ddit/cost.hpp"
#include "ddit/errors.hpp"
#include "ddit/kernels.hpp"
#include "ddit/masking.hpp"

using namespace ddit;

namespace {

// d = 64, two mixer and two backbone blocks over 16 patches.
ModelConfig tiny_config() {
    ModelConfig c;
    c.width = 64;
    c.depth = 2;
    c.head_dim = 16;
    c.attn_mult_lo = 0.5;
    c.attn_mult_hi = 1.0;
    c.ffn_mult_lo = 1.0;
    c.ffn_mult_hi = 4.0;
    c.mixer_depth = 2;
    c.latent_height = c.latent_width = 8;
    c.channels = 4;
    c.caption_length = 5;
    c.caption_dim = 24;
    c.sigma_embed_dim = 16;
    return c;
}

// Multiplications actually executed by one forward pass, per sample, as
// counted inside the matrix-product kernels.
double counted_forward(const ModelConfig& c, int64_t kept, int64_t batch = 3) {
    DenoiserNet net(c, 5);
    Rng rng(9);
    const int64_t s = c.patches();
    const Tensor x = Tensor::randn({batch, s, c.patch_dim()}, rng);
    CaptionBatch cap{Tensor::randn({batch, c.caption_length, c.caption_dim}, rng), {}};
    std::vector<Mask> masks;
    for (int64_t b = 0; b < batch; ++b)
        masks.push_back(make_random_mask(s, 1.0 - double(kept) / double(s), 100 + static_cast<uint64_t>(b)));
    const KeepIndex keep = keep_index(masks);
    NoGradGuard guard;
    kernels::reset_flop_counter();
    net.forward(x, std::vector<double>(static_cast<size_t>(batch), 1.3), cap, kept < s ? &keep : nullptr);
    return double(kernels::flop_counter()) / double(batch);
}

} // namespace

TEST_CASE("forward ledger equals the kernel multiplication count") {
    const ModelConfig base = tiny_config();
    REQUIRE(base.patches() == 16);
    SUBCASE("unmasked") { CHECK(flops_forward(base, 16).total() == counted_forward(base, 16)); }
    SUBCASE("deferred keep 4") { CHECK(flops_forward(base, 4).total() == counted_forward(base, 4)); }
    SUBCASE("gelu, caption width equal to d") {
        ModelConfig c = base;
        c.activation = Activation::gelu;
        c.caption_dim = c.width;
        CHECK(flops_forward(c, 8).total() == counted_forward(c, 8));
    }
    SUBCASE("mixture of experts") {
        ModelConfig c = base;
        c.moe.enabled = true;
        c.moe.num_experts = 4;
        CHECK(flops_forward(c, 16).total() == counted_forward(c, 16));
        CHECK(flops_forward(c, 4).total() == counted_forward(c, 4));
    }
    SUBCASE("mixture of experts below one token per expert runs dense") {
        ModelConfig c = base;
        c.moe.enabled = true;
        c.moe.num_experts = 8;
        c.moe.capacity_factor = 0.5;
        CHECK(flops_forward(c, 4).total() == counted_forward(c, 4));
    }
    SUBCASE("decoder") {
        ModelConfig c = base;
        c.mixer_depth = 0;
        c.decoder_depth = 2;
        CHECK(flops_forward(c, 4).total() == counted_forward(c, 4));
    }
}

TEST_CASE("ledger terms scale with the kept sequence as the formula says") {
    const ModelConfig c = tiny_config();
    const FlopBreakdown a = flops_forward(c, 4), b = flops_forward(c, 8);
    CHECK(b.backbone_linear == 2 * a.backbone_linear);
    CHECK(b.backbone_cross == 2 * a.backbone_cross);
    CHECK(b.head == 2 * a.head);
    CHECK(b.backbone_scores == 4 * a.backbone_scores);
    CHECK(b.backbone_context == a.backbone_context);
    CHECK(b.mixer == a.mixer);
    CHECK(b.embed == a.embed);
}

TEST_CASE("backbone linear FLOPs at ratio 0.75 of 256 patches") {
    ModelConfig c = tiny_config();
    c.latent_height = c.latent_width = 32;
    REQUIRE(c.patches() == 256);
    const int64_t kept = backbone_tokens(c, Pipeline::deferred, 0.75);
    CHECK(kept == 64);
    CHECK(flops_forward(c, kept).backbone_linear == 0.25 * flops_forward(c, 256).backbone_linear);
    CHECK(backbone_tokens(c, Pipeline::unmasked, 0.75) == 256);
    CHECK(backbone_tokens(c, Pipeline::deferred, 0.0) == 256);
}

TEST_CASE("analytic parameter count matches the built network") {
    std::vector<ModelConfig> configs;
    configs.push_back(tiny_config());
    ModelConfig c = tiny_config();
    c.activation = Activation::gelu;
    c.caption_dim = c.width;
    configs.push_back(c);
    c = tiny_config();
    c.moe.enabled = true;
    c.depth = 3;
    configs.push_back(c);
    c = tiny_config();
    c.mixer_depth = 0;
    c.decoder_depth = 2;
    configs.push_back(c);
    for (const ModelConfig& m : configs) {
        const DenoiserNet net(m, 1);
        const ParamCount p = count_params(m);
        CHECK(p.total == net.store().count());
        CHECK(p.mixer == net.mixer_params());
        CHECK(p.backbone == net.backbone_params());
    }
}

TEST_CASE("MoE parameter and FLOP equivalences") {
    ModelConfig dense = tiny_config();
    dense.depth = 2;
    dense.mixer_depth = 0;
    dense.ffn_mult_lo = dense.ffn_mult_hi = 4.0;
    dense.attn_mult_lo = dense.attn_mult_hi = 1.0;
    ModelConfig moe = dense;
    moe.moe.enabled = true;
    moe.moe.num_experts = 8;
    moe.moe.capacity_factor = 2.0;
    const int64_t d = dense.width, f = 4 * d, e = 8;
    const int64_t ffn = 2 * (d * f + f) + (f * d + d);
    const int64_t router = d * e + e;
    // Block 1 is the MoE block: the dense FFN becomes eight experts plus a router.
    CHECK(count_params(moe).total - count_params(dense).total == router + (e - 1) * ffn);
    // Each token visits C = 2 experts on average: active = dense + router + one extra FFN.
    CHECK(count_params(moe).active == doctest::Approx(double(count_params(dense).total + router + ffn)));
    // Per token, the expert FFNs cost twice one dense FFN.
    const int64_t s = dense.patches();
    const double ffn_flops = 3.0 * 2.0 * double(s) * double(d) * double(f);
    const double router_flops = 2.0 * double(s) * double(d) * double(e);
    CHECK(flops_forward(moe, s).backbone_linear - flops_forward(dense, s).backbone_linear ==
          doctest::Approx(ffn_flops + router_flops));
}

TEST_CASE("plan total is steps x batch x 3 x forward") {
    const ModelConfig c = tiny_config();
    TrainPlan plan;
    PhaseConfig p;
    p.name = "toy";
    p.mask_ratio = 0.75;
    p.steps = 1000;
    p.batch = 8;
    plan.phases = {p};
    const CostReport r = plan_flops(c, Pipeline::deferred, plan);
    const double fwd = flops_forward(c, keep_count(16, 0.75)).total();
    CHECK(r.total_flops == 1000.0 * 8.0 * 3.0 * fwd);
    CHECK(r.phases.at(0).step_flops == 8.0 * 3.0 * fwd);
    CostAssumptions a;
    a.throughput = 1e9;
    a.dollars_per_hour = 36.0;
    const CostReport q = plan_flops(c, Pipeline::deferred, plan, a);
    CHECK(q.days == doctest::Approx(q.total_flops / 1e9 / 86400.0));
    CHECK(q.dollars == doctest::Approx(q.days * 24.0 * 36.0));
}

TEST_CASE("reference preset lands near the published large-scale budget") {
    const RunConfig rc = load_preset("reference");
    const ParamCount p = count_params(rc.train.model);
    CHECK(double(p.total) == doctest::Approx(1.16e9).epsilon(0.05));
    CHECK(double(p.mixer) / double(p.backbone) == doctest::Approx(0.13).epsilon(0.05 / 0.13));
    const CostReport r = plan_flops(rc.train.model, rc.train.mask.pipeline, rc.train.plan);
    REQUIRE(r.phases.size() == 4);
    CHECK(r.phases[0].steps == 250000);
    CHECK(r.phases[3].resolution == 512);
    const double ratio = r.total_flops / 3.45e20;
    CHECK(ratio < 1.5);
    CHECK(ratio > 1.0 / 1.5);
    CHECK(std::abs(r.phases[0].total_flops / r.total_flops - 1.47 / 3.45) <= 0.15);
}

TEST_CASE("tiny preset shape") {
    const RunConfig rc = load_preset("tiny");
    CHECK(rc.train.model.mixer_depth == 4);
    const ParamCount p = count_params(rc.train.model);
    CHECK(double(p.mixer) / double(p.backbone) == doctest::Approx(0.13).epsilon(0.3));
    CHECK(rc.train.plan.total_steps() == 60000);
}

TEST_CASE("isoflops downscaling") {
    ModelConfig c = tiny_config();
    c.latent_height = c.latent_width = 16;
    const int64_t batch = 16;
    const double full = step_flops(c, Pipeline::unmasked, 0.0, batch);

    SUBCASE("matches the masked budget within 2%") {
        const double target = step_flops(c, Pipeline::deferred, 0.75, batch);
        const ModelConfig small = isoflops_downscale(c, target, batch);
        CHECK(std::abs(step_flops(small, Pipeline::unmasked, 0.0, batch) / target - 1.0) <= 0.02);
        CHECK(small.depth == c.depth);
        CHECK(small.mixer_depth == c.mixer_depth);
        CHECK(small.width <= c.width);
    }
    SUBCASE("unmasked target is a fixed point") {
        const ModelConfig same = isoflops_downscale(c, full, batch);
        CHECK(model_config_to_json(same) == model_config_to_json(c));
    }
    SUBCASE("lower targets give strictly narrower models") {
        int64_t prev_params = count_params(c).total;
        int64_t prev_width = c.width;
        for (double frac : {0.85, 0.65, 0.45, 0.3}) {
            const ModelConfig m = isoflops_downscale(c, frac * full, batch);
            const double got = step_flops(m, Pipeline::unmasked, 0.0, batch);
            CHECK(std::abs(got / (frac * full) - 1.0) <= 0.02);
            CHECK(count_params(m).total < prev_params);
            CHECK(m.width <= prev_width);
            prev_params = count_params(m).total;
            prev_width = m.width;
        }
    }
    SUBCASE("unreachable and invalid targets are rejected") {
        CHECK_THROWS_AS(isoflops_downscale(c, 1e-3 * full, batch), ConfigError);
        CHECK_THROWS_AS(isoflops_downscale(c, 2.0 * full, batch), ConfigError);
        CHECK_THROWS_AS(isoflops_downscale(c, 0.5 * full, 0), ConfigError);
    }
}

TEST_CASE("cost table and CSV") {
    const RunConfig rc = load_preset("reference");
    const CostReport r = plan_flops(rc.train.model, rc.train.mask.pipeline, rc.train.plan);
    const std::string table = format_cost_table(r);
    CHECK(table.find("256px-masked") != std::string::npos);
    CHECK(table.find("total") != std::string::npos);
    std::istringstream csv(format_cost_csv(r));
    std::string line;
    int rows = 0;
    std::getline(csv, line);
    CHECK(line.rfind("phase,resolution,latent_size,mask_ratio,steps", 0) == 0);
    double sum = 0;
    while (std::getline(csv, line)) {
        ++rows;
        if (line.rfind("total", 0) == 0) continue;
        // total_flops is the 11th column.
        std::istringstream fields(line);
        std::string cell;
        for (int i = 0; i < 11; ++i) std::getline(fields, cell, ',');
        sum += std::stod(cell);
    }
    CHECK(rows == 5);
    CHECK(sum == doctest::Approx(r.total_flops));
}
