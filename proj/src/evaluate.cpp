// SPDX-License-Identifier: Apache-2.0

#include "ddit/evaluate.hpp"

#include <algorithm>

#include "ddit/errors.hpp"

namespace ddit {

std::vector<int32_t> balanced_labels(int64_t n, int64_t num_classes) {
    if (num_classes < 1) throw std::invalid_argument("balanced_labels: need at least one class");
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = static_cast<int32_t>(i % num_classes);
    return out;
}

Tensor generate(const DenoiserNet& net, const CaptionStub& stub, const std::vector<int32_t>& phrases,
                const SamplerConfig& config, uint64_t seed, int64_t chunk) {
    if (phrases.empty()) throw std::invalid_argument("generate: no phrases");
    if (chunk < 1) throw std::invalid_argument("generate: chunk must be positive");
    std::vector<Tensor> parts;
    const int64_t n = static_cast<int64_t>(phrases.size());
    for (int64_t begin = 0, c = 0; begin < n; begin += chunk, ++c) {
        const int64_t end = std::min(n, begin + chunk);
        const std::vector<int32_t> ids(phrases.begin() + begin, phrases.begin() + end);
        const CaptionBatch caption = stub.batch(ids, {}, net.store().dtype());
        parts.push_back(sample_net(net, caption, config, mix_seed(seed, 11, static_cast<uint64_t>(c))));
    }
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

namespace {

std::vector<float> as_floats(const Tensor& t) {
    const Tensor f = t.to(DType::f32);
    const auto d = f.data<float>();
    return {d.begin(), d.end()};
}

} // namespace

EvalResult score_samples(const Tensor& latents, const std::vector<int32_t>& labels, const Dataset& reference,
                         int64_t num_classes, int64_t feature_dim, uint64_t feature_seed) {
    const int64_t n = latents.dim(0);
    const int64_t record = reference.record_size();
    if (latents.numel() != n * record)
        throw ShapeError("score_samples: latents " + shape_str(latents.shape()) + " do not match record size " +
                         std::to_string(record));
    if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("score_samples: one label per sample required");
    const std::vector<float> gen = as_floats(latents);
    const FeatureExtractor features(record, feature_dim, 256, feature_seed);
    EvalResult r;
    r.samples = n;
    r.desk_fid = frechet_distance(features(gen), features(reference.latents));
    r.alignment = class_alignment(gen, record, labels, class_centroids(reference, num_classes));
    return r;
}

double real_frechet(const Dataset& a, const Dataset& b, int64_t feature_dim, uint64_t feature_seed) {
    if (a.record_size() != b.record_size()) throw ShapeError("real_frechet: record sizes differ");
    const FeatureExtractor features(a.record_size(), feature_dim, 256, feature_seed);
    return frechet_distance(features(a.latents), features(b.latents));
}

} // namespace ddit
