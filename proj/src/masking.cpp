// SPDX-License-Identifier: Apache-2.0

#include "ddit/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddit/errors.hpp"

namespace ddit {

const char* layout_name(MaskLayout l) {
    switch (l) {
    case MaskLayout::random: return "random";
    case MaskLayout::block: return "block";
    case MaskLayout::square: return "square";
    }
    return "?";
}

MaskLayout parse_layout(const std::string& s) {
    if (s == "random") return MaskLayout::random;
    if (s == "block") return MaskLayout::block;
    if (s == "square") return MaskLayout::square;
    throw ConfigError("unknown mask layout '" + s + "'");
}

const char* pipeline_name(Pipeline p) {
    switch (p) {
    case Pipeline::unmasked: return "unmasked";
    case Pipeline::naive: return "naive";
    case Pipeline::maskdit: return "maskdit";
    case Pipeline::deferred: return "deferred";
    }
    return "?";
}

Pipeline parse_pipeline(const std::string& s) {
    if (s == "unmasked") return Pipeline::unmasked;
    if (s == "naive") return Pipeline::naive;
    if (s == "maskdit") return Pipeline::maskdit;
    if (s == "deferred") return Pipeline::deferred;
    throw ConfigError("unknown pipeline '" + s + "'");
}

Index Mask::kept() const {
    Index out;
    for (size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) out.push_back(static_cast<int64_t>(i));
    return out;
}

Index Mask::dropped() const {
    Index out;
    for (size_t i = 0; i < keep.size(); ++i)
        if (!keep[i]) out.push_back(static_cast<int64_t>(i));
    return out;
}

int64_t Mask::kept_count() const { return std::count(keep.begin(), keep.end(), uint8_t{1}); }

namespace {

void check_ratio(double ratio) {
    if (!(ratio >= 0.0) || !(ratio < 1.0)) throw std::invalid_argument("mask ratio must be in [0, 1)");
}

} // namespace

int64_t keep_count(int64_t patches, double ratio) {
    check_ratio(ratio);
    // std::round rounds halves away from zero.
    return patches - static_cast<int64_t>(std::round(ratio * static_cast<double>(patches)));
}

Mask make_random_mask(int64_t patches, double ratio, uint64_t seed) {
    const int64_t k = keep_count(patches, ratio);
    Rng rng(seed);
    Index order(static_cast<size_t>(patches));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Mask m;
    m.keep.assign(static_cast<size_t>(patches), 0);
    for (int64_t i = 0; i < k; ++i) m.keep[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    m.ratio = ratio;
    m.seed = seed;
    return m;
}

Mask make_square_mask(int64_t grid, double ratio, uint64_t seed) {
    const int64_t k = keep_count(grid * grid, ratio);
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(k))));
    if (side * side != k) throw std::invalid_argument("square mask: kept count " + std::to_string(k) + " is not square");
    Rng rng(seed);
    std::uniform_int_distribution<int64_t> pos(0, grid - side);
    const int64_t r0 = pos(rng), c0 = pos(rng);
    Mask m;
    m.keep.assign(static_cast<size_t>(grid * grid), 0);
    for (int64_t r = r0; r < r0 + side; ++r)
        for (int64_t c = c0; c < c0 + side; ++c) m.keep[static_cast<size_t>(r * grid + c)] = 1;
    m.ratio = ratio;
    m.layout = MaskLayout::square;
    m.block = side;
    m.seed = seed;
    return m;
}

Mask make_block_mask(int64_t grid, int64_t block, double ratio, uint64_t seed) {
    if (block < 1 || grid % block != 0)
        throw std::invalid_argument("block mask: block " + std::to_string(block) + " does not divide grid " +
                                    std::to_string(grid));
    if (block == 1) {
        Mask m = make_random_mask(grid * grid, ratio, seed);
        m.layout = MaskLayout::block;
        return m;
    }
    const int64_t per_side = grid / block;
    const int64_t blocks = per_side * per_side;
    const int64_t kept_patches = keep_count(grid * grid, ratio);
    const int64_t kept_blocks = kept_patches / (block * block);
    // One remaining block would always be an aligned quadrant; place a free square instead.
    if (kept_patches % (block * block) != 0 || kept_blocks == 1) return make_square_mask(grid, ratio, seed);
    Rng rng(seed);
    Index order(static_cast<size_t>(blocks));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Mask m;
    m.keep.assign(static_cast<size_t>(grid * grid), 0);
    for (int64_t i = 0; i < kept_blocks; ++i) {
        const int64_t br = order[static_cast<size_t>(i)] / per_side, bc = order[static_cast<size_t>(i)] % per_side;
        for (int64_t r = br * block; r < (br + 1) * block; ++r)
            for (int64_t c = bc * block; c < (bc + 1) * block; ++c) m.keep[static_cast<size_t>(r * grid + c)] = 1;
    }
    m.ratio = ratio;
    m.layout = MaskLayout::block;
    m.block = block;
    m.seed = seed;
    return m;
}

void MaskConfig::validate() const {
    if (block < 1) throw ConfigError("mask.block must be >= 1");
    if (!(gamma >= 0)) throw ConfigError("mask.gamma must be >= 0");
}

Mask make_mask(const MaskConfig& config, int64_t grid_h, int64_t grid_w, double ratio, uint64_t seed) {
    if (config.layout == MaskLayout::random) return make_random_mask(grid_h * grid_w, ratio, seed);
    if (grid_h != grid_w) throw ConfigError("block and square masks need a square patch grid");
    if (config.layout == MaskLayout::square) return make_square_mask(grid_h, ratio, seed);
    return make_block_mask(grid_h, config.block, ratio, seed);
}

KeepIndex keep_index(const std::vector<Mask>& masks) {
    KeepIndex out;
    for (const Mask& m : masks) out.push_back(m.kept());
    return out;
}

namespace {

LossParts kept_rows_loss(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption, const LossDraw& draw,
                         const std::vector<Mask>& masks) {
    if (static_cast<int64_t>(masks.size()) != x.dim(0)) throw ShapeError("one mask per sample required");
    const KeepIndex keep = keep_index(masks);
    const int64_t k = validate_keep(keep, x.dim(1));
    LossParts out;
    out.total = diffusion_loss(
        x, [&](const Tensor& noisy, const std::vector<double>& sigma, const KeepIndex* kp) {
            return net.forward(noisy, sigma, caption, kp);
        },
        draw, &keep);
    out.diff = out.total.item();
    out.kept = k;
    return out;
}

} // namespace

LossParts train_loss_unmasked(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                              const LossDraw& draw) {
    LossParts out;
    out.total = diffusion_loss(
        x, [&](const Tensor& noisy, const std::vector<double>& sigma, const KeepIndex* kp) {
            return net.forward(noisy, sigma, caption, kp);
        },
        draw, nullptr);
    out.diff = out.total.item();
    out.kept = x.dim(1);
    return out;
}

LossParts train_loss_naive(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption, const LossDraw& draw,
                           const std::vector<Mask>& masks) {
    if (net.config().mixer_depth != 0) throw ConfigError("naive masking needs a net without patch mixer");
    if (net.config().decoder_depth != 0) throw ConfigError("naive masking needs a net without decoder");
    return kept_rows_loss(net, x, caption, draw, masks);
}

LossParts train_loss_deferred(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                              const LossDraw& draw, const std::vector<Mask>& masks) {
    // mixer_depth 0 is accepted and degenerates to naive masking.
    if (net.config().decoder_depth != 0) throw ConfigError("deferred masking needs a net without decoder");
    return kept_rows_loss(net, x, caption, draw, masks);
}

LossParts maskdit_objective(const Tensor& pred, const Tensor& x, const Tensor& noisy, const std::vector<Mask>& masks,
                            double gamma) {
    if (gamma < 0) throw std::invalid_argument("maskdit: gamma must be >= 0");
    const KeepIndex keep = keep_index(masks);
    LossParts out;
    out.kept = validate_keep(keep, x.dim(1));
    const Tensor l_diff = masked_mse(pred, x, keep);
    out.diff = l_diff.item();
    KeepIndex dropped;
    for (const Mask& m : masks) dropped.push_back(m.dropped());
    if (dropped.front().empty() || gamma == 0.0) {
        out.total = l_diff;
        return out;
    }
    const Tensor l_mae = masked_mse(pred, noisy, dropped);
    out.mae = l_mae.item();
    out.total = add(l_diff, scale(l_mae, gamma));
    return out;
}

LossParts train_loss_maskdit(const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                             const LossDraw& draw, const std::vector<Mask>& masks, double gamma) {
    if (gamma < 0) throw std::invalid_argument("maskdit: gamma must be >= 0");
    if (net.config().decoder_depth < 1) throw ConfigError("MaskDiT needs decoder_depth >= 1");
    if (net.config().mixer_depth != 0) throw ConfigError("MaskDiT runs without a patch mixer");
    if (static_cast<int64_t>(masks.size()) != x.dim(0)) throw ShapeError("one mask per sample required");
    const Tensor noisy = add(x, draw.noise);
    // Zero dropped patches in the input: the skip path c_skip * x spans every
    // row and would otherwise hand the noisy reconstruction target to L_mae.
    const int64_t b = x.dim(0), s = x.dim(1), p = x.dim(2);
    std::vector<double> keep_mask(static_cast<size_t>(b * s));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < s; ++j) keep_mask[static_cast<size_t>(i * s + j)] = masks[static_cast<size_t>(i)].keep[static_cast<size_t>(j)];
    const Tensor visible =
        reshape(mul_rows(reshape(noisy, {b * s, p}), Tensor::from_vector(keep_mask, {b * s}, x.dtype())), {b, s, p});
    const KeepIndex keep = keep_index(masks);
    const Tensor pred = net.forward(visible, draw.sigma, caption, &keep);
    return maskdit_objective(pred, x, noisy.detach(), masks, gamma);
}

LossParts train_loss(Pipeline pipeline, const DenoiserNet& net, const Tensor& x, const CaptionBatch& caption,
                     const LossDraw& draw, const std::vector<Mask>& masks, double gamma) {
    switch (pipeline) {
    case Pipeline::unmasked: return train_loss_unmasked(net, x, caption, draw);
    case Pipeline::naive: return train_loss_naive(net, x, caption, draw, masks);
    case Pipeline::deferred: return train_loss_deferred(net, x, caption, draw, masks);
    case Pipeline::maskdit: return train_loss_maskdit(net, x, caption, draw, masks, gamma);
    }
    throw std::logic_error("unknown pipeline");
}

} // namespace ddit
