// SPDX-License-Identifier: Apache-2.0

#include "ddit/model.hpp"

#include <cmath>

#include "ddit/errors.hpp"

namespace ddit {

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("model: " + msg);
    };
    need(width > 0 && depth > 0 && patch_size > 0 && head_dim > 0, "width, depth, patch_size, head_dim must be positive");
    need(mixer_depth >= 0 && decoder_depth >= 0, "mixer_depth and decoder_depth must be non-negative");
    need(attn_mult_lo <= attn_mult_hi, "attn_mult lo > hi");
    need(ffn_mult_lo <= ffn_mult_hi, "ffn_mult lo > hi");
    need(attn_mult_lo > 0 && ffn_mult_lo > 0 && mixer_attn_mult > 0 && mixer_ffn_mult > 0,
         "multipliers must be positive");
    need(width % head_dim == 0, "width must be a multiple of head_dim (cross-attention runs at full width)");
    need(latent_height % patch_size == 0 && latent_width % patch_size == 0,
         "latent " + std::to_string(latent_height) + "x" + std::to_string(latent_width) +
             " is not divisible by patch_size " + std::to_string(patch_size));
    need(channels > 0 && caption_length > 0 && caption_dim > 0, "channels and caption dims must be positive");
    need(sigma_embed_dim >= 2 && sigma_embed_dim % 2 == 0, "sigma_embed_dim must be even");
    need(sigma_data > 0, "sigma_data must be positive");
    if (moe.enabled) moe.validate();
}

BlockWidths round_widths(int64_t width, int64_t head_dim, double m_a, double m_f) {
    auto nearest = [](double v, int64_t unit) {
        return std::max<int64_t>(unit, static_cast<int64_t>(std::llround(v / static_cast<double>(unit))) * unit);
    };
    return {nearest(m_a * static_cast<double>(width), head_dim), nearest(m_f * static_cast<double>(width), 8), false};
}

double layer_multiplier(double lo, double hi, int64_t i, int64_t blocks) {
    if (lo > hi) throw ConfigError("multiplier range lo > hi");
    if (blocks <= 1) return hi;
    return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(blocks - 1);
}

std::vector<BlockWidths> build_layerwise_widths(const ModelConfig& c) {
    if (c.attn_mult_lo > c.attn_mult_hi || c.ffn_mult_lo > c.ffn_mult_hi)
        throw ConfigError("layer-wise scaling range has lo > hi");
    const std::vector<bool> moe = place_moe_blocks(c.depth, c.moe.enabled);
    std::vector<BlockWidths> out;
    for (int64_t i = 0; i < c.depth; ++i) {
        BlockWidths w = round_widths(c.width, c.head_dim, layer_multiplier(c.attn_mult_lo, c.attn_mult_hi, i, c.depth),
                                     layer_multiplier(c.ffn_mult_lo, c.ffn_mult_hi, i, c.depth));
        w.moe = moe[static_cast<size_t>(i)];
        out.push_back(w);
    }
    return out;
}

std::vector<BlockWidths> mixer_widths(const ModelConfig& c) {
    return std::vector<BlockWidths>(static_cast<size_t>(c.mixer_depth),
                                    round_widths(c.width, c.head_dim, c.mixer_attn_mult, c.mixer_ffn_mult));
}

std::vector<BlockWidths> decoder_widths(const ModelConfig& c) {
    return std::vector<BlockWidths>(static_cast<size_t>(c.decoder_depth), round_widths(c.width, c.head_dim, 1.0, 4.0));
}

Tensor patchify(const Tensor& x, int64_t p) {
    if (x.ndim() != 4) throw ShapeError("patchify: expected (B, H, W, C), got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw ShapeError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                         std::to_string(p));
    const Tensor t = permute(reshape(x, {b, h / p, p, w / p, p, c}), {0, 1, 3, 2, 4, 5});
    return reshape(t, {b, (h / p) * (w / p), p * p * c});
}

Tensor unpatchify(const Tensor& patches, int64_t h, int64_t w, int64_t c, int64_t p) {
    if (patches.ndim() != 3 || h % p != 0 || w % p != 0 || patches.dim(1) != (h / p) * (w / p) ||
        patches.dim(2) != p * p * c)
        throw ShapeError("unpatchify: " + shape_str(patches.shape()) + " does not tile " + std::to_string(h) + "x" +
                         std::to_string(w) + "x" + std::to_string(c) + " with patch " + std::to_string(p));
    const int64_t b = patches.dim(0);
    const Tensor t = permute(reshape(patches, {b, h / p, w / p, p, p, c}), {0, 1, 3, 2, 4, 5});
    return reshape(t, {b, h, w, c});
}

DiTBlock::DiTBlock(ParamStore& store, const std::string& name, const ModelConfig& c, const BlockWidths& w, Rng& rng) {
    if (w.attn % c.head_dim != 0)
        throw ConfigError(name + ": attention width " + std::to_string(w.attn) + " not a multiple of head_dim");
    ln_self = LayerNorm(store, name + ".ln_self", c.width);
    self_attn = Attention(store, name + ".self_attn", c.width, c.width, w.attn, c.head_dim, c.qk_norm, rng);
    ln_cross = LayerNorm(store, name + ".ln_cross", c.width);
    // Cross-attention is never width-scaled.
    cross_attn = Attention(store, name + ".cross_attn", c.width, c.width, c.width, c.head_dim, c.qk_norm, rng);
    ln_ffn = LayerNorm(store, name + ".ln_ffn", c.width);
    if (w.moe)
        moe.emplace(store, name + ".moe", c.width, w.ffn, c.activation, c.moe, rng);
    else
        ffn = FeedForward(store, name + ".ffn", c.width, w.ffn, c.activation, rng);
}

Tensor DiTBlock::operator()(const Tensor& x, const Tensor& caption) const {
    Tensor h = add(x, [&] {
        const Tensor n = ln_self(x);
        return self_attn(n, n);
    }());
    h = add(h, cross_attn(ln_cross(h), caption));
    const Tensor n = ln_ffn(h);
    return add(h, moe ? (*moe)(n) : ffn(n));
}

CaptionPool::CaptionPool(ParamStore& store, const std::string& name, const ModelConfig& c, Rng& rng) {
    ln = LayerNorm(store, name + ".ln", c.width);
    attn = Attention(store, name + ".attn", c.width, c.width, c.width, c.head_dim, c.qk_norm, rng);
}

std::pair<Tensor, Tensor> CaptionPool::operator()(const Tensor& tokens) const {
    const Tensor n = ln(tokens);
    const Tensor processed = add(tokens, attn(n, n));
    return {processed, mean(processed, 1)};
}

Tensor sigma_features(const std::vector<double>& c_noise, int64_t dim, DType dtype) {
    const int64_t half = dim / 2;
    std::vector<double> v(static_cast<size_t>(c_noise.size()) * static_cast<size_t>(dim));
    for (size_t b = 0; b < c_noise.size(); ++b)
        for (int64_t i = 0; i < half; ++i) {
            const double freq = std::pow(1000.0, half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0);
            v[b * dim + i] = std::cos(c_noise[b] * freq);
            v[b * dim + half + i] = std::sin(c_noise[b] * freq);
        }
    return Tensor::from_vector(v, {static_cast<int64_t>(c_noise.size()), dim}, dtype);
}

namespace {

// (B, d) -> (B, n, d) by repeating each row n times.
Tensor repeat_rows(const Tensor& x, int64_t n) {
    const int64_t b = x.dim(0), d = x.dim(1);
    Index idx;
    idx.reserve(static_cast<size_t>(b * n));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < n; ++j) idx.push_back(i);
    return reshape(gather_rows(x, idx), {b, n, d});
}

Tensor per_sample(const std::vector<double>& v, DType dtype) {
    return Tensor::from_vector(v, {static_cast<int64_t>(v.size())}, dtype);
}

// Scales each sample of x (B, ...) by s[b].
Tensor scale_samples(const Tensor& x, const Tensor& s) {
    const int64_t b = x.dim(0);
    return reshape(mul_rows(reshape(x, {b, x.numel() / b}), s), x.shape());
}

} // namespace

DenoiserNet::DenoiserNet(const ModelConfig& config, uint64_t seed, DType dtype) : config_(config), store_(dtype) {
    config_.validate();
    widths_ = build_layerwise_widths(config_);
    Rng rng(seed);
    const int64_t d = config_.width;
    patch_embed = Linear(store_, "embed.patch", config_.patch_dim(), d, rng);
    pos_embed = store_.normal("embed.pos", {config_.patches(), d}, 0.02, rng);
    sigma_fc1 = Linear(store_, "sigma.fc1", config_.sigma_embed_dim, d, rng);
    sigma_fc2 = Linear(store_, "sigma.fc2", d, d, rng);
    null_caption = store_.normal("caption.null", {config_.caption_length, config_.caption_dim}, 1.0, rng);
    has_caption_proj = config_.caption_dim != d;
    if (has_caption_proj) caption_proj = Linear(store_, "caption.proj", config_.caption_dim, d, rng);
    caption_pool = CaptionPool(store_, "caption.pool", config_, rng);
    const auto mw = mixer_widths(config_);
    for (size_t i = 0; i < mw.size(); ++i) mixer.emplace_back(store_, "mixer." + std::to_string(i), config_, mw[i], rng);
    for (size_t i = 0; i < widths_.size(); ++i)
        backbone.emplace_back(store_, "backbone." + std::to_string(i), config_, widths_[i], rng);
    if (config_.decoder_depth > 0) {
        mask_token = store_.normal("decoder.mask_token", {1, d}, 0.02, rng);
        const auto dw = decoder_widths(config_);
        for (size_t i = 0; i < dw.size(); ++i)
            decoder.emplace_back(store_, "decoder." + std::to_string(i), config_, dw[i], rng);
    }
    final_ln = LayerNorm(store_, "head.ln", d);
    head = Linear(store_, "head.out", d, config_.patch_dim(), rng, 1.0, true);
}

Tensor DenoiserNet::caption_tokens(const CaptionBatch& caption) const {
    const Tensor& t = caption.tokens;
    const int64_t l = config_.caption_length, cd = config_.caption_dim;
    if (t.ndim() != 3 || t.dim(1) != l || t.dim(2) != cd)
        throw ShapeError("caption tokens " + shape_str(t.shape()) + ", expected (B, " + std::to_string(l) + ", " +
                         std::to_string(cd) + ")");
    const int64_t b = t.dim(0);
    if (!caption.use_null.empty() && static_cast<int64_t>(caption.use_null.size()) != b)
        throw ShapeError("caption null flags do not match batch");
    const bool any_null = std::any_of(caption.use_null.begin(), caption.use_null.end(), [](uint8_t f) { return f; });
    const Tensor tokens = t.dtype() == store_.dtype() ? t : t.to(store_.dtype());
    if (!any_null) return tokens;
    // Rows [0, B*L) are the given tokens, [B*L, B*L + L) the learned null caption.
    const Tensor source = concat({reshape(tokens, {b * l, cd}), null_caption}, 0);
    Index idx;
    idx.reserve(static_cast<size_t>(b * l));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < l; ++j) idx.push_back(caption.use_null[static_cast<size_t>(i)] ? b * l + j : i * l + j);
    return reshape(gather_rows(source, idx), {b, l, cd});
}

Tensor DenoiserNet::raw(const Tensor& x_in, const std::vector<double>& c_noise, const CaptionBatch& caption,
                        const KeepIndex* keep) const {
    const int64_t b = x_in.dim(0), s = config_.patches();
    if (x_in.ndim() != 3 || x_in.dim(1) != s || x_in.dim(2) != config_.patch_dim())
        throw ShapeError("denoiser input " + shape_str(x_in.shape()) + ", expected (B, " + std::to_string(s) + ", " +
                         std::to_string(config_.patch_dim()) + ")");
    if (static_cast<int64_t>(c_noise.size()) != b) throw ShapeError("one sigma per sample required");
    if (caption.tokens.dim(0) != b) throw ShapeError("caption batch does not match latent batch");
    const DType dt = store_.dtype();

    Tensor cap = caption_tokens(caption);
    if (has_caption_proj) cap = caption_proj(cap);
    auto [cap_seq, pooled] = caption_pool(cap);
    const Tensor cond = add(sigma_fc2(silu(sigma_fc1(sigma_features(c_noise, config_.sigma_embed_dim, dt)))), pooled);
    const Tensor cond_full = repeat_rows(cond, s);

    Tensor h = add(add(patch_embed(x_in), pos_embed), cond_full);
    for (const auto& blk : mixer) h = blk(h, cap_seq);

    int64_t kept = s;
    Index flat_kept;
    if (keep) {
        if (static_cast<int64_t>(keep->size()) != b) throw ShapeError("keep lists do not match batch");
        kept = validate_keep(*keep, s);
        h = gather_kept(h, *keep);
        for (const Index& row : *keep) flat_kept.insert(flat_kept.end(), row.begin(), row.end());
        const Tensor pos_k = reshape(gather_rows(pos_embed, flat_kept), {b, kept, config_.width});
        h = add(add(h, pos_k), repeat_rows(cond, kept));
    } else {
        h = add(add(h, pos_embed), cond_full);
    }
    for (const auto& blk : backbone) h = blk(h, cap_seq);

    if (!decoder.empty()) {
        if (keep) {
            // Backbone rows go back to their positions; dropped positions get the mask token.
            const Tensor rows = concat({reshape(h, {b * kept, config_.width}), mask_token}, 0);
            Index idx(static_cast<size_t>(b * s), b * kept);
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < kept; ++j) idx[static_cast<size_t>(i * s + flat_kept[i * kept + j])] = i * kept + j;
            h = reshape(gather_rows(rows, idx), {b, s, config_.width});
        }
        h = add(add(h, pos_embed), cond_full);
        for (const auto& blk : decoder) h = blk(h, cap_seq);
    }
    return head(final_ln(h));
}

Tensor DenoiserNet::forward(const Tensor& x, const std::vector<double>& sigma, const CaptionBatch& caption,
                            const KeepIndex* keep) const {
    const int64_t b = x.dim(0);
    if (static_cast<int64_t>(sigma.size()) != b) throw ShapeError("one sigma per sample required");
    std::vector<double> c_skip(sigma.size()), c_out(sigma.size()), c_in(sigma.size()), c_noise(sigma.size());
    for (size_t i = 0; i < sigma.size(); ++i) {
        const Preconditioning p = precondition_coefficients(sigma[i], config_.sigma_data);
        c_skip[i] = p.c_skip;
        c_out[i] = p.c_out;
        c_in[i] = p.c_in;
        c_noise[i] = p.c_noise;
    }
    const DType dt = x.dtype();
    const Tensor out = raw(scale_samples(x, per_sample(c_in, dt)), c_noise, caption, keep);
    const Tensor skip_rows = (keep && decoder.empty()) ? gather_kept(x, *keep) : x;
    return add(scale_samples(skip_rows, per_sample(c_skip, dt)), scale_samples(out, per_sample(c_out, dt)));
}

Tensor DenoiserNet::denoise(const Tensor& x, const std::vector<double>& sigma, const CaptionBatch& caption) const {
    const int64_t p = config_.patch_size;
    const Tensor out = forward(patchify(x, p), sigma, caption, nullptr);
    return unpatchify(out, x.dim(1), x.dim(2), x.dim(3), p);
}

} // namespace ddit
