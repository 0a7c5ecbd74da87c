// SPDX-License-Identifier: Apache-2.0

#include "ddit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ddit/blob.hpp"
#include "ddit/errors.hpp"

namespace ddit {

namespace fs = std::filesystem;

void ToySpec::validate() const {
    if (height < 4 || width < 4 || channels < 1) throw ConfigError("data: latent must be at least 4x4x1");
    if (num_classes < 1 || num_classes > 10) throw ConfigError("data: num_classes must be in [1, 10]");
    if (samples_per_class < 1) throw ConfigError("data: samples_per_class must be >= 1");
    if (!(synthetic_fraction >= 0 && synthetic_fraction <= 1)) throw ConfigError("data: synthetic_fraction in [0, 1]");
    if (!(value_scale > 0)) throw ConfigError("data: value_scale must be positive");
}

std::span<const float> Dataset::latent(int64_t i) const {
    if (i < 0 || i >= size()) throw std::out_of_range("dataset record " + std::to_string(i));
    return {latents.data() + i * record_size(), static_cast<size_t>(record_size())};
}

Tensor Dataset::batch(const Index& indices, DType dtype) const {
    const int64_t r = record_size();
    std::vector<float> out(indices.size() * static_cast<size_t>(r));
    for (size_t b = 0; b < indices.size(); ++b) {
        const auto src = latent(indices[b]);
        std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(b * r));
    }
    Tensor t = Tensor::from_floats(std::move(out), {static_cast<int64_t>(indices.size()), height, width, channels});
    return dtype == DType::f32 ? t : t.to(dtype);
}

Dataset Dataset::subset(const Index& indices) const {
    Dataset out;
    out.height = height, out.width = width, out.channels = channels;
    for (int64_t i : indices) {
        const auto src = latent(i);
        out.latents.insert(out.latents.end(), src.begin(), src.end());
        out.labels.push_back(labels[i]);
        out.phrases.push_back(phrases[i]);
        out.synthetic.push_back(synthetic[i]);
    }
    return out;
}

void Dataset::append(const Dataset& other) {
    if (size() == 0 && latents.empty()) height = other.height, width = other.width, channels = other.channels;
    if (other.height != height || other.width != width || other.channels != channels)
        throw ShapeError("dataset append: latent dims differ");
    latents.insert(latents.end(), other.latents.begin(), other.latents.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    phrases.insert(phrases.end(), other.phrases.begin(), other.phrases.end());
    synthetic.insert(synthetic.end(), other.synthetic.begin(), other.synthetic.end());
}

namespace {

// Per-class channel colors.
constexpr double kColors[10][4] = {
    {1, 0, 0, 0.5}, {0, 1, 0, -0.5}, {0, 0, 1, 0.5}, {1, 1, 0, -0.5}, {-1, 0, 1, 0},
    {0, -1, 1, 0.5}, {1, 0, -1, -0.5}, {-1, 1, 0, 0.5}, {0, 1, 1, -1}, {1, -1, 1, 0},
};

// Signed coverage test: > 0 inside the class shape. (u, v) are offsets from
// the jittered centre in grid units, s the jittered size.
double shape_field(int32_t label, double u, double v, double s) {
    const double r = std::sqrt(u * u + v * v);
    switch (label) {
    case 0: return 1.0 - std::abs(r - s) / 1.25;                                      // ring
    case 1: return s - r;                                                             // disk
    case 2: return s - std::max(std::abs(u), std::abs(v));                            // square
    case 3: return std::min(1.5 - std::min(std::abs(u), std::abs(v)), s + 2 - std::max(std::abs(u), std::abs(v)));
    case 4: return 1.5 - std::abs(v);                                                 // horizontal stripe
    case 5: return 1.5 - std::abs(u);                                                 // vertical column
    case 6: return s + 1 - (std::abs(u) + std::abs(v));                               // diamond
    case 7: return std::min(s - std::abs(u + 3), s - std::abs(v + 3)) - 1;            // corner block
    case 8: return 2.0 - std::min(std::hypot(u - 4, v), std::hypot(u + 4, v));        // two dots
    case 9: return 1.0 - std::abs(std::max(std::abs(u), std::abs(v)) - (s + 2));      // frame
    }
    return -1.0;
}

} // namespace

std::vector<float> render_latent(const ToySpec& spec, int32_t label, RenderStyle style, Rng& rng) {
    const int64_t h = spec.height, w = spec.width, c = spec.channels;
    std::uniform_int_distribution<int> shift(-2, 2);
    std::uniform_real_distribution<double> size_jitter(-1.0, 1.0), amp(0.8, 1.2);
    const bool synth = style == RenderStyle::synthetic;
    std::normal_distribution<double> noise(0.0, synth ? 0.03 : 0.1);
    const double cy = (h - 1) / 2.0 + shift(rng), cx = (w - 1) / 2.0 + shift(rng);
    const double s = (std::min(h, w) / 4.0) + size_jitter(rng) + (synth ? 1.0 : 0.0);
    const double a = amp(rng) * (synth ? 1.2 : 1.0);
    std::vector<float> out(static_cast<size_t>(h * w * c));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const double f = shape_field(label, static_cast<double>(x) - cx, static_cast<double>(y) - cy, s);
            // Real style uses hard edges, synthetic style soft ones.
            const double cover = synth ? 1.0 / (1.0 + std::exp(-2.0 * f)) : (f > 0 ? 1.0 : 0.0);
            for (int64_t ch = 0; ch < c; ++ch)
                out[static_cast<size_t>((y * w + x) * c + ch)] =
                    static_cast<float>(a * cover * kColors[label][ch % 4] + noise(rng));
        }
    return out;
}

Dataset gen_toy_dataset(const ToySpec& spec) {
    spec.validate();
    Dataset d;
    d.height = spec.height, d.width = spec.width, d.channels = spec.channels;
    Rng rng(spec.seed);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (int64_t i = 0; i < spec.samples_per_class; ++i)
        for (int32_t k = 0; k < spec.num_classes; ++k) {
            const bool synth = coin(rng) < spec.synthetic_fraction;
            const auto v = render_latent(spec, k, synth ? RenderStyle::synthetic : RenderStyle::real, rng);
            d.latents.insert(d.latents.end(), v.begin(), v.end());
            d.labels.push_back(k);
            d.phrases.push_back(k);
            d.synthetic.push_back(synth);
        }
    double sq = 0, mean = 0;
    for (float v : d.latents) mean += v;
    mean /= static_cast<double>(d.latents.size());
    for (float v : d.latents) sq += (v - mean) * (v - mean);
    const double scale = spec.value_scale / std::sqrt(sq / static_cast<double>(d.latents.size()));
    for (float& v : d.latents) v = static_cast<float>(v * scale);
    return d;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double holdout_fraction, uint64_t seed) {
    if (!(holdout_fraction > 0 && holdout_fraction < 1)) throw std::invalid_argument("holdout fraction in (0, 1)");
    const int32_t classes = data.labels.empty() ? 0 : *std::max_element(data.labels.begin(), data.labels.end()) + 1;
    Index train, hold;
    for (int32_t k = 0; k < classes; ++k) {
        Index members;
        for (int64_t i = 0; i < data.size(); ++i)
            if (data.labels[i] == k) members.push_back(i);
        std::shuffle(members.begin(), members.end(), Rng(mix_seed(seed, static_cast<uint64_t>(k))));
        const auto n_hold = static_cast<size_t>(std::llround(holdout_fraction * static_cast<double>(members.size())));
        hold.insert(hold.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_hold));
        train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_hold), members.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(hold.begin(), hold.end());
    return {data.subset(train), data.subset(hold)};
}

const std::vector<std::string>& toy_phrases() {
    static const std::vector<std::string> phrases{
        "red ring",       "green disk",    "blue square",    "yellow cross",  "teal stripe",
        "violet column",  "orange diamond", "pink corner",   "cyan dots",     "gray frame",
    };
    return phrases;
}

uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t counter) {
    // splitmix64 finalizer over a combination of the three inputs.
    uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1) + 0xBF58476D1CE4E5B9ull * (counter + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

CaptionStub::CaptionStub(int64_t length, int64_t dim, uint64_t seed, std::vector<std::string> vocabulary)
    : length_(length), dim_(dim), seed_(seed), vocab_(std::move(vocabulary)) {
    if (length < 1 || dim < 1) throw ConfigError("caption stub: length and dim must be positive");
    for (const std::string& phrase : vocab_) {
        std::vector<std::string> words;
        std::istringstream in(phrase);
        for (std::string w; in >> w;) words.push_back(w);
        if (words.empty()) throw ConfigError("caption stub: empty phrase in vocabulary");
        std::vector<double> seq(static_cast<size_t>(length * dim));
        for (int64_t pos = 0; pos < length; ++pos) {
            // Short phrases repeat cyclically so no two phrases share padding.
            const std::string& word = words[static_cast<size_t>(pos) % words.size()];
            Rng rng(mix_seed(seed_, std::hash<std::string>{}(word), static_cast<uint64_t>(pos)));
            std::normal_distribution<double> n(0.0, 1.0);
            for (int64_t j = 0; j < dim; ++j) seq[static_cast<size_t>(pos * dim + j)] = n(rng);
        }
        table_.push_back(std::move(seq));
    }
}

int32_t CaptionStub::phrase_id(const std::string& phrase) const {
    if (phrase == null_sentinel) return null_phrase;
    const auto it = std::find(vocab_.begin(), vocab_.end(), phrase);
    if (it == vocab_.end()) throw ConfigError("unknown caption phrase '" + phrase + "'");
    return static_cast<int32_t>(it - vocab_.begin());
}

std::vector<double> CaptionStub::encode(const std::string& phrase) const {
    const int32_t id = phrase_id(phrase);
    if (id == null_phrase) throw std::invalid_argument("the null caption is a learned embedding, not a projection");
    return table_[static_cast<size_t>(id)];
}

CaptionBatch CaptionStub::batch(const std::vector<int32_t>& phrase_ids, const std::vector<uint8_t>& drop,
                                DType dtype) const {
    if (!drop.empty() && drop.size() != phrase_ids.size()) throw ShapeError("caption batch: drop flags size");
    const auto b = static_cast<int64_t>(phrase_ids.size());
    std::vector<double> values(static_cast<size_t>(b * length_ * dim_), 0.0);
    CaptionBatch out;
    out.use_null.assign(phrase_ids.size(), 0);
    for (size_t i = 0; i < phrase_ids.size(); ++i) {
        const int32_t id = phrase_ids[i];
        if (id == null_phrase || (!drop.empty() && drop[i])) {
            out.use_null[i] = 1;
            continue;
        }
        if (id < 0 || id >= static_cast<int32_t>(table_.size()))
            throw ConfigError("caption phrase id " + std::to_string(id) + " outside the vocabulary");
        std::copy(table_[static_cast<size_t>(id)].begin(), table_[static_cast<size_t>(id)].end(),
                  values.begin() + static_cast<std::ptrdiff_t>(i * length_ * dim_));
    }
    out.tokens = Tensor::from_vector(values, {b, length_, dim_}, dtype);
    return out;
}

namespace {

constexpr uint32_t kShardMagic = 0x48534444;  // "DDSH"
constexpr uint32_t kShardVersion = 1;
constexpr int64_t kHeaderBytes = 4 + 4 + 8 + 4 * 3;

} // namespace

void write_shard(const fs::path& path, const Dataset& data, int64_t begin, int64_t end) {
    if (begin < 0 || end > data.size() || begin > end) throw std::out_of_range("write_shard: bad record range");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_le(out, kShardMagic);
    write_le(out, kShardVersion);
    write_le(out, static_cast<uint64_t>(end - begin));
    write_le(out, static_cast<uint32_t>(data.height));
    write_le(out, static_cast<uint32_t>(data.width));
    write_le(out, static_cast<uint32_t>(data.channels));
    for (int64_t i = begin; i < end; ++i) {
        for (float v : data.latent(i)) write_le(out, v);
        write_le(out, data.labels[i]);
        write_le(out, data.phrases[i]);
    }
    if (!out) throw std::runtime_error("short write to " + path.string());
}

Dataset read_shard(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError("shard not found: " + path.string());
    auto fail = [&](const std::string& what) { throw FormatError(path.string() + ": " + what); };
    uint32_t magic = 0, version = 0, h = 0, w = 0, c = 0;
    uint64_t count = 0;
    if (!read_le(in, magic) || !read_le(in, version) || !read_le(in, count) || !read_le(in, h) || !read_le(in, w) ||
        !read_le(in, c))
        fail("truncated header");
    if (magic != kShardMagic) fail("bad magic");
    if (version != kShardVersion) fail("unsupported version " + std::to_string(version));
    if (h == 0 || w == 0 || c == 0) fail("zero latent dimension in header");
    Dataset d;
    d.height = h, d.width = w, d.channels = c;
    const int64_t r = d.record_size();
    const int64_t record_bytes = r * 4 + 8;
    std::vector<float> buf(static_cast<size_t>(r));
    for (uint64_t i = 0; i < count; ++i) {
        for (float& v : buf)
            if (!read_le(in, v))
                fail("truncated record " + std::to_string(i) + " at byte offset " +
                     std::to_string(kHeaderBytes + static_cast<int64_t>(i) * record_bytes));
        int32_t label = 0, phrase = 0;
        if (!read_le(in, label) || !read_le(in, phrase))
            fail("truncated record " + std::to_string(i) + " at byte offset " +
                 std::to_string(kHeaderBytes + static_cast<int64_t>(i) * record_bytes));
        d.latents.insert(d.latents.end(), buf.begin(), buf.end());
        d.labels.push_back(label);
        d.phrases.push_back(phrase);
        d.synthetic.push_back(0);
    }
    return d;
}

fs::path write_dataset(const fs::path& dir, const Dataset& data, const ToySpec& spec, int64_t shard_records) {
    if (shard_records < 1) throw std::invalid_argument("shard_records must be >= 1");
    fs::create_directories(dir);
    nlohmann::json shards = nlohmann::json::array();
    // Real and synthetic-style records go to separate shards so the manifest can tag the source.
    for (int source = 0; source < 2; ++source) {
        Index members;
        for (int64_t i = 0; i < data.size(); ++i)
            if (data.synthetic[i] == source) members.push_back(i);
        const Dataset part = data.subset(members);
        for (int64_t begin = 0, n = 0; begin < part.size(); begin += shard_records, ++n) {
            const int64_t end = std::min(part.size(), begin + shard_records);
            const std::string name =
                std::string(source ? "synthetic" : "real") + "-" + std::to_string(n) + ".shard";
            write_shard(dir / name, part, begin, end);
            shards.push_back({{"path", name}, {"count", end - begin}, {"source", source ? "synthetic" : "real"}});
        }
    }
    double sum = 0, sq = 0;
    for (float v : data.latents) sum += v, sq += static_cast<double>(v) * v;
    const double n = static_cast<double>(data.latents.size());
    nlohmann::json manifest = {
        {"format", "ddit-shards"},
        {"version", 1},
        {"dims", {data.height, data.width, data.channels}},
        {"records", data.size()},
        {"num_classes", spec.num_classes},
        {"phrases", toy_phrases()},
        {"sigma_data", n > 0 ? std::sqrt(std::max(0.0, sq / n - (sum / n) * (sum / n))) : 0.0},
        {"spec",
         {{"height", spec.height},
          {"width", spec.width},
          {"channels", spec.channels},
          {"num_classes", spec.num_classes},
          {"samples_per_class", spec.samples_per_class},
          {"synthetic_fraction", spec.synthetic_fraction},
          {"value_scale", spec.value_scale},
          {"seed", spec.seed}}},
        {"shards", shards},
    };
    const fs::path path = dir / "manifest.json";
    std::ofstream(path) << manifest.dump(2) << "\n";
    return path;
}

Dataset load_dataset(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw MissingFileError("data manifest not found: " + manifest_path.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    if (m.value("format", "") != "ddit-shards") throw FormatError(manifest_path.string() + ": not a shard manifest");
    Dataset out;
    for (const auto& s : m.at("shards")) {
        Dataset part = read_shard(manifest_path.parent_path() / s.at("path").get<std::string>());
        if (part.size() != s.at("count").get<int64_t>())
            throw FormatError(s.at("path").get<std::string>() + ": record count differs from manifest");
        std::fill(part.synthetic.begin(), part.synthetic.end(), s.value("source", "real") == "synthetic");
        out.append(part);
    }
    return out;
}

Index shuffled_indices(int64_t n, uint64_t seed) {
    Index idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), Rng(seed));
    return idx;
}

Index batch_indices(int64_t n, int64_t batch, int64_t step, uint64_t seed) {
    if (n < 1 || batch < 1) throw std::invalid_argument("batch_indices: empty dataset or batch");
    Index out;
    out.reserve(static_cast<size_t>(batch));
    int64_t pos = step * batch;
    int64_t epoch = -1;
    Index perm;
    for (int64_t i = 0; i < batch; ++i, ++pos) {
        if (pos / n != epoch) {
            epoch = pos / n;
            perm = shuffled_indices(n, mix_seed(seed, 0xDA7A, static_cast<uint64_t>(epoch)));
        }
        out.push_back(perm[static_cast<size_t>(pos % n)]);
    }
    return out;
}

std::vector<std::vector<double>> class_centroids(const Dataset& data, int64_t num_classes) {
    const int64_t r = data.record_size();
    std::vector<std::vector<double>> c(static_cast<size_t>(num_classes), std::vector<double>(static_cast<size_t>(r), 0.0));
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    for (int64_t i = 0; i < data.size(); ++i) {
        const int32_t k = data.labels[i];
        if (k < 0 || k >= num_classes) throw std::out_of_range("class label " + std::to_string(k));
        const auto v = data.latent(i);
        for (int64_t j = 0; j < r; ++j) c[k][j] += v[j];
        ++counts[k];
    }
    for (int64_t k = 0; k < num_classes; ++k) {
        if (counts[k] == 0) throw std::invalid_argument("class " + std::to_string(k) + " has no samples");
        for (double& v : c[k]) v /= static_cast<double>(counts[k]);
    }
    return c;
}

int32_t nearest_centroid(std::span<const float> latent, const std::vector<std::vector<double>>& centroids) {
    int32_t best = 0;
    double best_d = INFINITY;
    for (size_t k = 0; k < centroids.size(); ++k) {
        if (centroids[k].size() != latent.size()) throw ShapeError("nearest_centroid: dimension mismatch");
        double d = 0;
        for (size_t j = 0; j < latent.size(); ++j) d += (latent[j] - centroids[k][j]) * (latent[j] - centroids[k][j]);
        if (d < best_d) best_d = d, best = static_cast<int32_t>(k);
    }
    return best;
}

} // namespace ddit
