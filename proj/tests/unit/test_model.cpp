// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ddit/errors.hpp"
#include "ddit/kernels.hpp"
#include "ddit/model.hpp"

using namespace ddit;

namespace {

// Nearest multiple of `unit` by exhaustive search over candidates.
int64_t nearest_multiple(double v, int64_t unit) {
    int64_t best = unit;
    for (int64_t c = unit; c <= 64 * 64; c += unit)
        if (std::abs(static_cast<double>(c) - v) < std::abs(static_cast<double>(best) - v)) best = c;
    return best;
}

ModelConfig small_config() {
    ModelConfig c;
    c.width = 32;
    c.depth = 2;
    c.head_dim = 8;
    c.latent_height = c.latent_width = 8;
    c.channels = 2;
    c.caption_length = 3;
    c.caption_dim = 12;
    c.sigma_embed_dim = 16;
    return c;
}

CaptionBatch random_caption(const ModelConfig& c, int64_t batch, Rng& rng, DType dt) {
    return {Tensor::randn({batch, c.caption_length, c.caption_dim}, rng, 1.0, dt), {}};
}

void zero_all(ParamStore& store) {
    for (Param& p : store.params()) p.value.assign(Tensor::zeros(p.value.shape(), p.value.dtype()));
}

void randomize(ParamStore& store, Rng& rng, double std) {
    for (Param& p : store.params()) p.value.assign(Tensor::randn(p.value.shape(), rng, std, p.value.dtype()));
}

} // namespace

TEST_CASE("layer-wise widths follow interpolation and rounding") {
    ModelConfig c;
    c.width = 64;
    c.depth = 4;
    c.head_dim = 16;
    c.attn_mult_lo = 0.5;
    c.attn_mult_hi = 1.0;
    c.ffn_mult_lo = 0.5;
    c.ffn_mult_hi = 4.0;
    const auto w = build_layerwise_widths(c);
    REQUIRE(w.size() == 4);
    for (int64_t i = 0; i < 4; ++i) {
        const double mf = 0.5 + 3.5 * static_cast<double>(i) / 3.0;
        const double ma = 0.5 + 0.5 * static_cast<double>(i) / 3.0;
        CHECK(w[i].ffn == nearest_multiple(mf * 64, 8));
        CHECK(w[i].attn == nearest_multiple(ma * 64, 16));
    }
    CHECK(w[0].ffn == 32);
    CHECK(w[1].ffn == 104);
    CHECK(w[2].ffn == 184);
    CHECK(w[3].ffn == 256);

    c.attn_mult_lo = c.attn_mult_hi = 1.0;
    c.ffn_mult_lo = c.ffn_mult_hi = 4.0;
    for (const auto& b : build_layerwise_widths(c)) CHECK(b == BlockWidths{64, 256, false});

    c.depth = 1;
    c.ffn_mult_lo = 0.5;
    CHECK(build_layerwise_widths(c)[0].ffn == 256);

    c.ffn_mult_lo = 5.0;
    CHECK_THROWS_AS(build_layerwise_widths(c), ConfigError);
    // Tiny multipliers still give one head and one FFN unit.
    CHECK(round_widths(64, 16, 0.01, 0.01) == BlockWidths{16, 8, false});
}

TEST_CASE("moe placement in the backbone") {
    ModelConfig c = small_config();
    c.depth = 4;
    c.moe.enabled = true;
    c.moe.num_experts = 2;
    const auto w = build_layerwise_widths(c);
    CHECK(!w[0].moe);
    CHECK(w[1].moe);
    CHECK(!w[2].moe);
    CHECK(w[3].moe);
}

TEST_CASE("patchify geometry and round trip") {
    Rng rng(1);
    const Tensor x = Tensor::randn({2, 32, 32, 4}, rng);
    const Tensor p2 = patchify(x, 2);
    CHECK(p2.shape() == Shape{2, 256, 16});
    CHECK(bitwise_equal(unpatchify(p2, 32, 32, 4, 2), x));
    CHECK(patchify(x, 4).shape() == Shape{2, 64, 64});
    CHECK(bitwise_equal(unpatchify(patchify(x, 4), 32, 32, 4, 4), x));

    const Tensor whole = patchify(x, 32);
    CHECK(whole.shape() == Shape{2, 1, 32 * 32 * 4});
    CHECK(bitwise_equal(reshape(whole, {2, 32, 32, 4}), x));

    // Patch (r, c) holds latent rows 2r..2r+1, columns 2c..2c+1, channels innermost.
    const int64_t r = 3, col = 5;
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j)
            for (int64_t ch = 0; ch < 4; ++ch) {
                const double got = p2.at((r * 16 + col) * 16 + (i * 2 + j) * 4 + ch);
                const double want = x.at(((2 * r + i) * 32 + 2 * col + j) * 4 + ch);
                CHECK(got == want);
            }
    CHECK_THROWS_AS(patchify(x, 3), ShapeError);
    const Tensor odd = Tensor::randn({1, 6, 10, 3}, rng);
    CHECK(bitwise_equal(unpatchify(patchify(odd, 2), 6, 10, 3, 2), odd));
}

TEST_CASE("zero-weight block is the identity") {
    ModelConfig c = small_config();
    ParamStore store(DType::f64);
    Rng rng(3);
    DiTBlock block(store, "b", c, BlockWidths{16, 64, false}, rng);
    zero_all(store);
    const Tensor x = Tensor::randn({2, 5, 32}, rng, 1.0, DType::f64);
    const Tensor cap = Tensor::randn({2, 3, 32}, rng, 1.0, DType::f64);
    const Tensor y = block(x, cap);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("single-token single-head attention returns the value projection") {
    ParamStore store(DType::f64);
    Rng rng(4);
    Attention attn(store, "a", 6, 6, 4, 4, false, rng);
    randomize(store, rng, 0.5);
    const Tensor x = Tensor::randn({1, 1, 6}, rng, 1.0, DType::f64);
    const Tensor y = attn(x, x);
    // Hand computation: softmax over one key is 1, so y = (x Wv + bv) Wo + bo.
    const auto xv = x.values(), wv = attn.v.weight.values(), bv = attn.v.bias.values();
    const auto wo = attn.o.weight.values(), bo = attn.o.bias.values();
    std::vector<double> v(4);
    for (int j = 0; j < 4; ++j) {
        v[j] = bv[j];
        for (int i = 0; i < 6; ++i) v[j] += xv[i] * wv[i * 4 + j];
    }
    for (int j = 0; j < 6; ++j) {
        double o = bo[j];
        for (int i = 0; i < 4; ++i) o += v[i] * wo[i * 6 + j];
        CHECK(y.at(j) == doctest::Approx(o).epsilon(1e-12));
    }
    CHECK_THROWS_AS(Attention(store, "bad", 6, 6, 6, 4, false, rng), ConfigError);
}

TEST_CASE("cross-attention is invariant to caption token order") {
    ParamStore store(DType::f64);
    Rng rng(5);
    Attention attn(store, "a", 16, 16, 16, 8, true, rng);
    const Tensor x = Tensor::randn({1, 4, 16}, rng, 1.0, DType::f64);
    const Tensor cap = Tensor::randn({1, 3, 16}, rng, 1.0, DType::f64);
    const Tensor perm = reshape(gather_rows(reshape(cap, {3, 16}), {2, 0, 1}), {1, 3, 16});
    const Tensor a = attn(x, cap), b = attn(x, perm);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-12));
}

TEST_CASE("qk normalization removes query and key scale") {
    ParamStore store(DType::f64);
    Rng rng(6);
    Attention attn(store, "a", 16, 16, 16, 8, true, rng);
    const Tensor x = Tensor::randn({2, 5, 16}, rng, 1.0, DType::f64);
    const Tensor before = attn(x, x);
    for (Tensor* t : {&attn.q.weight, &attn.k.weight}) t->assign(scale(*t, 7.0));
    const Tensor after = attn(x, x);
    for (int64_t i = 0; i < before.numel(); ++i) CHECK(after.at(i) == doctest::Approx(before.at(i)).epsilon(1e-5));

    // Normalized per-head rows have unit variance within 1e-5.
    const Tensor q = split_heads(attn.q(x), 2);
    const Tensor n = layer_norm(q, {}, {}, 1e-6);
    const int64_t rows = n.numel() / 8;
    for (int64_t r = 0; r < rows; ++r) {
        double m = 0, v = 0;
        for (int64_t j = 0; j < 8; ++j) m += n.at(r * 8 + j) / 8;
        for (int64_t j = 0; j < 8; ++j) v += (n.at(r * 8 + j) - m) * (n.at(r * 8 + j) - m) / 8;
        CHECK(std::abs(v - 1.0) < 1e-5);
    }
}

TEST_CASE("caption pooling") {
    ModelConfig c = small_config();
    ParamStore store(DType::f64);
    Rng rng(7);
    CaptionPool pool(store, "p", c, rng);
    randomize(store, rng, 0.3);

    const Tensor one = Tensor::randn({1, 1, 32}, rng, 1.0, DType::f64);
    const auto [seq1, pooled1] = pool(one);
    for (int64_t i = 0; i < 32; ++i) CHECK(pooled1.at(i) == doctest::Approx(seq1.at(i)).epsilon(1e-14));

    // Two copies of a token attend uniformly to identical keys: same as one copy.
    const Tensor two = concat({one, one}, 1);
    const auto [seq2, pooled2] = pool(two);
    for (int64_t i = 0; i < 32; ++i) CHECK(pooled2.at(i) == doctest::Approx(pooled1.at(i)).epsilon(1e-12));

    zero_all(store);
    const Tensor toks = Tensor::randn({2, 3, 32}, rng, 1.0, DType::f64);
    const Tensor pooled = pool(toks).second;
    const Tensor expect = mean(toks, 1);
    for (int64_t i = 0; i < expect.numel(); ++i) CHECK(pooled.at(i) == doctest::Approx(expect.at(i)));
}

TEST_CASE("sigma features are a pure function of sigma") {
    const Tensor f = sigma_features({0.3, -1.0, 0.3}, 16, DType::f64);
    for (int64_t j = 0; j < 16; ++j) CHECK(f.at(j) == f.at(32 + j));
    CHECK(f.at(0) == doctest::Approx(std::cos(0.3)));
    CHECK(f.at(8) == doctest::Approx(std::sin(0.3)));
    CHECK(f.at(7) == doctest::Approx(std::cos(300.0)));
}

TEST_CASE("denoiser forward with and without masking") {
    kernels::set_deterministic(true);
    ModelConfig c = small_config();
    c.mixer_depth = 1;
    DenoiserNet net(c, 11);
    Rng rng(8);
    randomize(net.store(), rng, 0.1);
    const Tensor x = Tensor::randn({2, c.patches(), c.patch_dim()}, rng);
    const CaptionBatch cap = random_caption(c, 2, rng, DType::f32);
    const std::vector<double> sigma{0.4, 2.0};

    KeepIndex all(2, Index(static_cast<size_t>(c.patches())));
    for (auto& row : all) std::iota(row.begin(), row.end(), 0);
    CHECK(bitwise_equal(net.forward(x, sigma, cap, &all), net.forward(x, sigma, cap, nullptr)));

    KeepIndex half{{0, 2, 4, 6, 8, 10, 12, 14}, {1, 3, 5, 7, 9, 11, 13, 15}};
    CHECK(net.forward(x, sigma, cap, &half).shape() == Shape{2, 8, c.patch_dim()});
    KeepIndex bad{{0, 16}, {1, 2}};
    CHECK_THROWS_AS(net.forward(x, sigma, cap, &bad), std::out_of_range);

    // Learned null caption replaces the given tokens only where flagged.
    CaptionBatch nulls = cap;
    nulls.use_null = {1, 0};
    const Tensor tok = net.caption_tokens(nulls);
    for (int64_t i = 0; i < 3 * 12; ++i) {
        CHECK(tok.at(i) == net.store().find("caption.null").value.at(i));
        CHECK(tok.at(36 + i) == cap.tokens.at(36 + i));
    }
    kernels::set_deterministic(false);
}

TEST_CASE("backbone sees only kept rows at 75% masking") {
    ModelConfig c = small_config();
    c.latent_height = c.latent_width = 32;
    c.channels = 4;
    c.depth = 1;
    DenoiserNet net(c, 1);
    CHECK(c.patches() == 256);
    Rng rng(2);
    const Tensor x = Tensor::randn({1, 256, 16}, rng);
    KeepIndex keep(1);
    for (int64_t i = 0; i < 64; ++i) keep[0].push_back(i * 4);
    const Tensor out = net.forward(x, {1.0}, random_caption(c, 1, rng, DType::f32), &keep);
    CHECK(out.shape() == Shape{1, 64, 16});
}

TEST_CASE("head starts at zero so the initial denoiser is the skip path") {
    ModelConfig c = small_config();
    DenoiserNet net(c, 3, DType::f64);
    Rng rng(1);
    const Tensor x = Tensor::randn({1, c.patches(), c.patch_dim()}, rng, 1.0, DType::f64);
    const double sigma = 0.8;
    const Tensor y = net.forward(x, {sigma}, random_caption(c, 1, rng, DType::f64));
    const double c_skip = 0.25 / (sigma * sigma + 0.25);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(c_skip * x.at(i)));
}

TEST_CASE("full denoiser gradients match finite differences") {
    ModelConfig c = small_config();
    c.mixer_depth = 1;
    c.depth = 2;
    c.moe.enabled = true;
    c.moe.num_experts = 2;
    c.activation = Activation::gelu;
    DenoiserNet net(c, 5, DType::f64);
    Rng rng(9);
    randomize(net.store(), rng, 0.2);
    const Tensor x = Tensor::randn({2, c.patches(), c.patch_dim()}, rng, 1.0, DType::f64);
    const CaptionBatch cap{Tensor::randn({2, 3, 12}, rng, 1.0, DType::f64), {0, 1}};
    const KeepIndex keep{{0, 3, 5, 9, 12}, {1, 2, 7, 8, 15}};
    const Tensor target = Tensor::randn({2, 5, c.patch_dim()}, rng, 1.0, DType::f64);
    auto loss = [&] { return mse(net.forward(x, {0.5, 3.0}, cap, &keep), target); };

    net.store().zero_grad();
    loss().backward();
    // Expert routing is piecewise constant; probe parameters in every part of the net.
    double worst = 0;
    for (const char* name : {"embed.patch.weight", "embed.pos", "sigma.fc1.weight", "caption.null",
                             "caption.proj.weight", "caption.pool.attn.q.weight", "mixer.0.self_attn.k.weight",
                             "backbone.0.ffn.w1.weight", "backbone.1.moe.router.weight",
                             "backbone.1.moe.expert1.w2.weight", "backbone.1.cross_attn.v.weight", "head.out.weight"}) {
        Tensor p = net.store().find(name).value;
        const auto g = p.grad().values();
        auto d = p.mutable_data<double>();
        double gmax = 0;
        for (double v : g) gmax = std::max(gmax, std::abs(v));
        REQUIRE(gmax > 0);
        NoGradGuard guard;
        for (int64_t e = 0; e < std::min<int64_t>(p.numel(), 6); ++e) {
            const size_t i = static_cast<size_t>((e * 7919) % p.numel());
            const double saved = d[i];
            d[i] = saved + 1e-6;
            const double up = loss().item();
            d[i] = saved - 1e-6;
            const double down = loss().item();
            d[i] = saved;
            worst = std::max(worst, std::abs((up - down) / 2e-6 - g[i]) / gmax);
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("config validation") {
    ModelConfig c = small_config();
    c.width = 30;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.latent_height = 9;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.ffn_mult_lo = 8.0;
    CHECK_THROWS_AS(DenoiserNet(c, 1), ConfigError);
}
