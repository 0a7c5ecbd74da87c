// SPDX-License-Identifier: Apache-2.0

#include "ddit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <Eigen/Dense>
#include <png.h>

#include "ddit/errors.hpp"

namespace ddit {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const Mat> as_matrix(const FeatureMatrix& f) { return {f.values.data(), f.rows, f.cols}; }

// Symmetric PSD square root with negative eigenvalues clamped at 0.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    if (eig.info() != Eigen::Success) throw std::runtime_error("frechet: eigendecomposition failed");
    Eigen::VectorXd ev = eig.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    if (ev.minCoeff() < -1e-6 * std::max(top, 1e-300))
        throw std::runtime_error("frechet: matrix is not positive semi-definite (eigenvalue " +
                                 std::to_string(ev.minCoeff()) + ")");
    ev = ev.cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

void moments(const FeatureMatrix& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const auto x = as_matrix(f);
    mu = x.colwise().mean().transpose();
    const Mat centered = x.rowwise() - mu.transpose();
    cov = (centered.transpose() * centered) / static_cast<double>(f.rows - 1);
}

double frechet(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& ca, const Eigen::VectorXd& mu_b,
               const Eigen::MatrixXd& cb) {
    const Eigen::MatrixXd ra = sqrt_psd(ca);
    Eigen::MatrixXd inner = ra * cb * ra;
    inner = 0.5 * (inner + inner.transpose());
    const double tr = ca.trace() + cb.trace() - 2.0 * sqrt_psd(inner).trace();
    return std::max(0.0, (mu_a - mu_b).squaredNorm() + tr);
}

} // namespace

FeatureExtractor::FeatureExtractor(int64_t input_dim, int64_t feature_dim, int64_t hidden, uint64_t seed)
    : in_(input_dim), out_(feature_dim), hidden_(hidden) {
    if (input_dim < 1 || feature_dim < 1 || hidden < 1) throw std::invalid_argument("feature extractor dims");
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    w1_.resize(static_cast<size_t>(in_ * hidden_));
    w2_.resize(static_cast<size_t>(hidden_ * out_));
    for (double& w : w1_) w = n(rng) / std::sqrt(static_cast<double>(in_));
    for (double& w : w2_) w = n(rng) / std::sqrt(static_cast<double>(hidden_));
}

FeatureMatrix FeatureExtractor::operator()(std::span<const float> latents) const {
    if (latents.size() % static_cast<size_t>(in_) != 0)
        throw ShapeError("features: " + std::to_string(latents.size()) + " values is not a multiple of " +
                         std::to_string(in_));
    const auto n = static_cast<int64_t>(latents.size()) / in_;
    Mat x(n, in_);
    for (int64_t i = 0; i < n * in_; ++i) x.data()[i] = latents[static_cast<size_t>(i)];
    const Eigen::Map<const Mat> w1(w1_.data(), in_, hidden_), w2(w2_.data(), hidden_, out_);
    const Mat h = (x * w1).array().tanh().matrix();
    const Mat f = h * w2;
    FeatureMatrix out;
    out.rows = n;
    out.cols = out_;
    out.values.assign(f.data(), f.data() + f.size());
    return out;
}

double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.cols != b.cols) throw ShapeError("frechet: feature dims differ");
    if (a.rows < 2 * a.cols || b.rows < 2 * b.cols)
        throw std::invalid_argument("frechet: need at least " + std::to_string(2 * a.cols) + " samples per side");
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    moments(a, ma, ca);
    moments(b, mb, cb);
    return frechet(ma, ca, mb, cb);
}

double frechet_from_moments(const std::vector<double>& mu_a, const std::vector<double>& cov_a,
                            const std::vector<double>& mu_b, const std::vector<double>& cov_b) {
    const auto d = static_cast<Eigen::Index>(mu_a.size());
    if (static_cast<Eigen::Index>(mu_b.size()) != d || static_cast<Eigen::Index>(cov_a.size()) != d * d ||
        static_cast<Eigen::Index>(cov_b.size()) != d * d)
        throw ShapeError("frechet_from_moments: inconsistent sizes");
    const Eigen::Map<const Eigen::VectorXd> ma(mu_a.data(), d), mb(mu_b.data(), d);
    const Eigen::MatrixXd ca = Eigen::Map<const Mat>(cov_a.data(), d, d);
    const Eigen::MatrixXd cb = Eigen::Map<const Mat>(cov_b.data(), d, d);
    return frechet(ma, ca, mb, cb);
}

double class_alignment(std::span<const float> latents, int64_t record_size, const std::vector<int32_t>& labels,
                       const std::vector<std::vector<double>>& centroids) {
    if (record_size < 1 || latents.size() != labels.size() * static_cast<size_t>(record_size))
        throw ShapeError("class_alignment: latents do not match labels");
    if (labels.empty()) return 0.0;
    int64_t hits = 0;
    for (size_t i = 0; i < labels.size(); ++i)
        hits += nearest_centroid(latents.subspan(i * static_cast<size_t>(record_size), static_cast<size_t>(record_size)),
                                 centroids) == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void write_png_grid(const std::filesystem::path& path, const Tensor& latents, int64_t columns, int64_t upscale,
                    double value_scale) {
    if (latents.ndim() != 4) throw ShapeError("png grid: expected (B, H, W, C)");
    const int64_t b = latents.dim(0), h = latents.dim(1), w = latents.dim(2), c = latents.dim(3);
    const int64_t cols = std::min(columns, b), rows = (b + cols - 1) / cols;
    const int64_t pad = 1;
    const int64_t width = cols * (w * upscale + pad) + pad, height = rows * (h * upscale + pad) + pad;
    std::vector<uint8_t> img(static_cast<size_t>(width * height * 3), 255);
    const auto v = latents.values();
    for (int64_t i = 0; i < b; ++i) {
        const int64_t oy = (i / cols) * (h * upscale + pad) + pad, ox = (i % cols) * (w * upscale + pad) + pad;
        for (int64_t y = 0; y < h * upscale; ++y)
            for (int64_t x = 0; x < w * upscale; ++x)
                for (int64_t ch = 0; ch < 3; ++ch) {
                    const double val = ch < c ? v[static_cast<size_t>(((i * h + y / upscale) * w + x / upscale) * c + ch)] : 0.0;
                    const double u = std::clamp(val / (4.0 * value_scale) + 0.5, 0.0, 1.0);
                    img[static_cast<size_t>(((oy + y) * width + ox + x) * 3 + ch)] = static_cast<uint8_t>(std::lround(u * 255));
                }
    }
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < height; ++y) png_write_row(png, img.data() + y * width * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
    if (!fp) throw MissingFileError("png not found: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("not a readable PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    Image img;
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("expected 8-bit RGB PNG: " + path.string());
    }
    img.rgb.resize(static_cast<size_t>(img.width * img.height * 3));
    for (int64_t y = 0; y < img.height; ++y) png_read_row(png, img.rgb.data() + y * img.width * 3, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

} // namespace ddit
