// SPDX-License-Identifier: Apache-2.0
//
// Patch-mixer + backbone diffusion transformer with layer-wise scaled blocks,
// caption cross-attention and additive sigma/caption conditioning.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddit/layers.hpp"
#include "ddit/moe.hpp"
#include "ddit/noise.hpp"

namespace ddit {

struct ModelConfig {
    int64_t width = 64;
    int64_t depth = 4;
    int64_t patch_size = 2;
    int64_t head_dim = 16;
    double attn_mult_lo = 1.0, attn_mult_hi = 1.0;
    double ffn_mult_lo = 4.0, ffn_mult_hi = 4.0;
    int64_t mixer_depth = 0;
    double mixer_attn_mult = 0.5, mixer_ffn_mult = 0.5;
    // MaskDiT decoder blocks after the backbone; 0 for other pipelines.
    int64_t decoder_depth = 0;
    Activation activation = Activation::swiglu;
    bool qk_norm = true;
    MoEConfig moe;
    int64_t latent_height = 16, latent_width = 16, channels = 4;
    int64_t caption_length = 8, caption_dim = 64;
    int64_t sigma_embed_dim = 64;
    double sigma_data = 0.5;

    void validate() const;
    int64_t grid_h() const { return latent_height / patch_size; }
    int64_t grid_w() const { return latent_width / patch_size; }
    int64_t patches() const { return grid_h() * grid_w(); }
    int64_t patch_dim() const { return patch_size * patch_size * channels; }
};

struct BlockWidths {
    int64_t attn = 0;
    int64_t ffn = 0;
    bool moe = false;

    bool operator==(const BlockWidths&) const = default;
};

// Attention width: nearest multiple of head_dim to m_a*d (at least head_dim).
// FFN hidden width: nearest multiple of 8 to m_f*d (at least 8).
BlockWidths round_widths(int64_t width, int64_t head_dim, double m_a, double m_f);
// Multiplier lo + (hi - lo) * i / (L - 1) at block i; a single block uses hi.
double layer_multiplier(double lo, double hi, int64_t i, int64_t blocks);
std::vector<BlockWidths> build_layerwise_widths(const ModelConfig& config);
std::vector<BlockWidths> mixer_widths(const ModelConfig& config);
std::vector<BlockWidths> decoder_widths(const ModelConfig& config);

// (B, H, W, C) -> (B, S, p*p*C), patches in row-major grid order.
Tensor patchify(const Tensor& x, int64_t p);
Tensor unpatchify(const Tensor& patches, int64_t height, int64_t width, int64_t channels, int64_t p);

struct DiTBlock {
    LayerNorm ln_self, ln_cross, ln_ffn;
    Attention self_attn, cross_attn;
    FeedForward ffn;
    std::optional<MoELayer> moe;

    DiTBlock() = default;
    DiTBlock(ParamStore& store, const std::string& name, const ModelConfig& config, const BlockWidths& widths,
             Rng& rng);
    // Pre-norm residual block; caption (B, L, d) feeds cross-attention.
    Tensor operator()(const Tensor& x, const Tensor& caption) const;
};

struct CaptionPool {
    LayerNorm ln;
    Attention attn;

    CaptionPool() = default;
    CaptionPool(ParamStore& store, const std::string& name, const ModelConfig& config, Rng& rng);
    // tokens (B, L, d) -> processed tokens (B, L, d) and pooled mean (B, d).
    std::pair<Tensor, Tensor> operator()(const Tensor& tokens) const;
};

struct CaptionBatch {
    Tensor tokens;                  // (B, L, caption_dim), not trained
    std::vector<uint8_t> use_null;  // per sample: replace with the learned null caption
};

// Sinusoidal features of c_noise, frequencies geometric in [1, 1000], (B, dim).
Tensor sigma_features(const std::vector<double>& c_noise, int64_t dim, DType dtype);

class DenoiserNet {
public:
    DenoiserNet(const ModelConfig& config, uint64_t seed, DType dtype = DType::f32);

    const ModelConfig& config() const { return config_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const std::vector<BlockWidths>& widths() const { return widths_; }

    // Preconditioned denoiser over patch sequences x (B, S, P) with per-sample
    // sigma. Returns kept rows (B, K, P) when keep is given, else all rows;
    // nets with a decoder always return all rows.
    Tensor forward(const Tensor& x, const std::vector<double>& sigma, const CaptionBatch& caption,
                   const KeepIndex* keep = nullptr) const;

    // Latent grids (B, H, W, C) in and out, no masking.
    Tensor denoise(const Tensor& x, const std::vector<double>& sigma, const CaptionBatch& caption) const;

    // Unpreconditioned network on scaled input.
    Tensor raw(const Tensor& x_in, const std::vector<double>& c_noise, const CaptionBatch& caption,
               const KeepIndex* keep) const;

    // Caption tokens after null substitution, (B, L, caption_dim).
    Tensor caption_tokens(const CaptionBatch& caption) const;

    int64_t mixer_params() const { return store_.count("mixer."); }
    int64_t backbone_params() const { return store_.count("backbone."); }

private:
    ModelConfig config_;
    ParamStore store_;
    std::vector<BlockWidths> widths_;
    Linear patch_embed, sigma_fc1, sigma_fc2, caption_proj, head;
    bool has_caption_proj = false;
    Tensor pos_embed, null_caption, mask_token;
    CaptionPool caption_pool;
    std::vector<DiTBlock> mixer, backbone, decoder;
    LayerNorm final_ln;
};

} // namespace ddit
