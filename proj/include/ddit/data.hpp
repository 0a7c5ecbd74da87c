// SPDX-License-Identifier: Apache-2.0
//
// Procedural toy latents with class captions, a frozen stub text encoder and
// the little-endian shard format used to store them.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddit/model.hpp"

namespace ddit {

enum class RenderStyle { real, synthetic };

struct ToySpec {
    int64_t height = 16, width = 16, channels = 4;
    int64_t num_classes = 10;
    int64_t samples_per_class = 500;
    // Share of records rendered with the synthetic-style rules.
    double synthetic_fraction = 0.0;
    // Global standard deviation the latents are normalized to.
    double value_scale = 0.5;
    uint64_t seed = 1234;

    void validate() const;
};

struct Dataset {
    int64_t height = 0, width = 0, channels = 0;
    std::vector<float> latents;  // record-major, each (H, W, C)
    std::vector<int32_t> labels;
    std::vector<int32_t> phrases;
    std::vector<uint8_t> synthetic;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int64_t record_size() const { return height * width * channels; }
    std::span<const float> latent(int64_t i) const;
    // (B, H, W, C) tensor of the listed records.
    Tensor batch(const Index& indices, DType dtype = DType::f32) const;
    Dataset subset(const Index& indices) const;
    void append(const Dataset& other);
};

// Class-balanced dataset, deterministic for a fixed spec.
Dataset gen_toy_dataset(const ToySpec& spec);

// Single record rendered by the class rules (before global normalization).
std::vector<float> render_latent(const ToySpec& spec, int32_t label, RenderStyle style, Rng& rng);

// Random split: returns (train, holdout) with `holdout_fraction` of each class held out.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double holdout_fraction, uint64_t seed);

// Class phrases of the toy vocabulary; phrase id i describes class i.
const std::vector<std::string>& toy_phrases();

// Frozen random map from phrases to (length, dim) token embeddings. Every
// (word, position) pair gets its own Gaussian vector, so phrases with no
// words in common have nearly orthogonal embeddings.
class CaptionStub {
public:
    static constexpr int32_t null_phrase = -1;
    static constexpr const char* null_sentinel = "<null>";

    CaptionStub(int64_t length, int64_t dim, uint64_t seed = 7, std::vector<std::string> vocabulary = toy_phrases());

    int64_t length() const { return length_; }
    int64_t dim() const { return dim_; }
    const std::vector<std::string>& vocabulary() const { return vocab_; }
    int32_t phrase_id(const std::string& phrase) const;
    // (length * dim) values; unknown phrases and the null sentinel are rejected here.
    std::vector<double> encode(const std::string& phrase) const;
    // Batch of phrase ids; null_phrase or a set drop flag selects the learned null caption.
    CaptionBatch batch(const std::vector<int32_t>& phrase_ids, const std::vector<uint8_t>& drop = {},
                       DType dtype = DType::f32) const;

private:
    int64_t length_, dim_;
    uint64_t seed_;
    std::vector<std::string> vocab_;
    std::vector<std::vector<double>> table_;
};

// Shard: header {magic "DDSH", version u32, count u64, h u32, w u32, c u32},
// then per record {h*w*c f32 latent, i32 class, i32 phrase}; little-endian.
void write_shard(const std::filesystem::path& path, const Dataset& data, int64_t begin, int64_t end);
Dataset read_shard(const std::filesystem::path& path);

// Writes shards of at most shard_records records plus manifest.json; returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const Dataset& data, const ToySpec& spec,
                                    int64_t shard_records = 1000);
Dataset load_dataset(const std::filesystem::path& manifest);

// Permutation of [0, n) for a seed.
Index shuffled_indices(int64_t n, uint64_t seed);
// Batch for a global step: consecutive slices of per-epoch permutations.
Index batch_indices(int64_t n, int64_t batch, int64_t step, uint64_t seed);

// Stateless seed derivation for (seed, stream, counter).
uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t counter = 0);

// Per-class mean latents, (num_classes, H*W*C).
std::vector<std::vector<double>> class_centroids(const Dataset& data, int64_t num_classes);
int32_t nearest_centroid(std::span<const float> latent, const std::vector<std::vector<double>>& centroids);

} // namespace ddit
