// SPDX-License-Identifier: Apache-2.0

#include "ddit/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ddit/blob.hpp"
#include "ddit/config.hpp"
#include "ddit/errors.hpp"
#include "ddit/kernels.hpp"

namespace ddit {

const char* schedule_name(Schedule s) {
    switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::cosine: return "cosine";
    case Schedule::cyclic: return "cyclic";
    }
    return "?";
}

Schedule parse_schedule(const std::string& s) {
    if (s == "constant") return Schedule::constant;
    if (s == "cosine") return Schedule::cosine;
    if (s == "cyclic") return Schedule::cyclic;
    throw ConfigError("unknown lr schedule '" + s + "' (constant, cosine, cyclic)");
}

void PhaseConfig::validate() const {
    const std::string p = "phase '" + name + "': ";
    if (steps < 1) throw ConfigError(p + "steps must be >= 1");
    if (batch < 1) throw ConfigError(p + "batch must be >= 1");
    if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError(p + "mask_ratio must be in [0, 1)");
    if (!(lr >= 0)) throw ConfigError(p + "lr must be >= 0");
    if (warmup < 0) throw ConfigError(p + "warmup must be >= 0");
    if (schedule == Schedule::cyclic && (cycle_steps < 1 || !(cycle_mult >= 1)))
        throw ConfigError(p + "cyclic schedule needs cycle_steps >= 1 and cycle_mult >= 1");
    if (!(weight_decay >= 0)) throw ConfigError(p + "weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError(p + "betas must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError(p + "eps must be positive");
    if (!(clip > 0)) throw ConfigError(p + "clip must be positive");
    if (!(ema == 0 || (ema > 0 && ema < 1))) throw ConfigError(p + "ema must be 0 (off) or in (0, 1)");
    if (!(caption_dropout >= 0 && caption_dropout <= 1)) throw ConfigError(p + "caption_dropout must be in [0, 1]");
    if (!(p_std >= 0)) throw ConfigError(p + "p_std must be >= 0");
    if (latent_size < 0) throw ConfigError(p + "latent_size must be >= 0");
}

void TrainPlan::validate() const {
    if (phases.empty()) throw ConfigError("training plan has no phases");
    for (const auto& p : phases) p.validate();
}

int64_t TrainPlan::total_steps() const {
    int64_t n = 0;
    for (const auto& p : phases) n += p.steps;
    return n;
}

TrainPlan reference_plan() {
    PhaseConfig base;
    base.batch = 2048;
    base.weight_decay = 0.1;
    base.caption_dropout = 0.1;

    PhaseConfig p1m = base;
    p1m.name = "256px-masked";
    p1m.mask_ratio = 0.75;
    p1m.steps = 250000;
    p1m.lr = 2.4e-4;
    p1m.schedule = Schedule::cosine;
    p1m.warmup = 2500;
    p1m.clip = 0.25;
    p1m.p_mean = -0.6, p1m.p_std = 1.2;
    p1m.latent_size = 32;

    PhaseConfig p1u = p1m;
    p1u.name = "256px-unmasked";
    p1u.mask_ratio = 0.0;
    p1u.steps = 30000;
    p1u.lr = 8e-5;
    p1u.schedule = Schedule::constant;
    p1u.warmup = 0;

    PhaseConfig p2m = p1m;
    p2m.name = "512px-masked";
    p2m.steps = 50000;
    p2m.lr = 8e-5;
    p2m.schedule = Schedule::constant;
    p2m.warmup = 500;
    p2m.clip = 0.5;
    p2m.ema = 0.99975;
    p2m.p_mean = 0.0, p2m.p_std = 0.6;
    p2m.latent_size = 64;

    PhaseConfig p2u = p2m;
    p2u.name = "512px-unmasked";
    p2u.mask_ratio = 0.0;
    p2u.steps = 5000;
    p2u.warmup = 0;
    p2u.ema = 0.9975;

    return {{p1m, p1u, p2m, p2u}};
}

double lr_at(const PhaseConfig& phase, int64_t step) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step < phase.warmup) return phase.lr * static_cast<double>(step) / static_cast<double>(phase.warmup);
    const int64_t s = step - phase.warmup;
    switch (phase.schedule) {
    case Schedule::constant: return phase.lr;
    case Schedule::cosine: {
        const int64_t span = std::max<int64_t>(1, phase.steps - phase.warmup);
        const double progress = std::min(1.0, static_cast<double>(s) / static_cast<double>(span));
        if (progress == 1.0) return 0.0;
        return phase.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    case Schedule::cyclic: {
        double pos = static_cast<double>(s), len = static_cast<double>(phase.cycle_steps);
        while (pos >= len) {
            pos -= len;
            len *= phase.cycle_mult;
        }
        return phase.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * pos / len));
    }
    }
    return phase.lr;
}

double grad_norm(const ParamStore& store) {
    double total = 0.0;
    for (const auto& p : store.params()) {
        if (!p.value.has_grad()) continue;
        for (double g : p.value.grad().values()) total += g * g;
    }
    return std::sqrt(total);
}

bool grads_finite(const ParamStore& store) {
    for (const auto& p : store.params()) {
        if (!p.value.has_grad()) continue;
        for (double g : p.value.grad().values())
            if (!std::isfinite(g)) return false;
    }
    return true;
}

double clip_grad_norm(ParamStore& store, double max_norm) {
    if (!(max_norm > 0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
    const double norm = grad_norm(store);
    if (!(norm > max_norm)) return 1.0;
    const double s = max_norm / norm;
    for (auto& p : store.params()) {
        if (!p.value.has_grad()) continue;
        visit_dtype(p.value.dtype(), [&](auto tag) {
            using T = decltype(tag);
            for (T& g : p.value.mutable_grad<T>()) g = static_cast<T>(g * s);
        });
    }
    return s;
}

AdamW::AdamW(const ParamStore& store) {
    for (const auto& p : store.params()) {
        m_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
        v_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
    }
}

bool AdamW::step(ParamStore& store, const AdamWHyper& h) {
    auto& params = store.params();
    if (params.size() != m_.size()) throw ShapeError("adamw: parameter count changed");
    if (!grads_finite(store)) {
        ++skipped_;
        return false;
    }
    const double t = static_cast<double>(steps_ + 1);
    const double bc1 = 1.0 - std::pow(h.beta1, t), bc2 = 1.0 - std::pow(h.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        Param& p = params[i];
        const double lr = h.lr * p.lr_scale;
        const double decay = p.decay ? 1.0 - lr * h.weight_decay : 1.0;
        const bool has_grad = p.value.has_grad();
        visit_dtype(p.value.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto w = p.value.mutable_data<T>();
            auto m = m_[i].mutable_data<T>();
            auto v = v_[i].mutable_data<T>();
            std::span<T> g;
            if (has_grad) g = p.value.mutable_grad<T>();
            for (size_t j = 0; j < w.size(); ++j) {
                const double gj = has_grad ? static_cast<double>(g[j]) : 0.0;
                const double mj = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                const double vj = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                double wj = static_cast<double>(w[j]) * decay;
                wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + h.eps);
                w[j] = static_cast<T>(wj);
            }
        });
    }
    ++steps_;
    return true;
}

void ema_update(Tensor& ema, const Tensor& value, double coeff) {
    if (!(coeff > 0 && coeff <= 1)) throw std::invalid_argument("ema_update: coeff must be in (0, 1]");
    if (ema.shape() != value.shape() || ema.dtype() != value.dtype()) throw ShapeError("ema_update: mismatch");
    visit_dtype(ema.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto e = ema.mutable_data<T>();
        const auto v = value.data<T>();
        for (size_t i = 0; i < e.size(); ++i)
            e[i] = static_cast<T>(coeff * static_cast<double>(e[i]) + (1.0 - coeff) * static_cast<double>(v[i]));
    });
}

void Ema::start(const ParamStore& store) {
    shadow_.clear();
    for (const auto& p : store.params()) shadow_.push_back(p.value.detach().clone());
}

void Ema::update(const ParamStore& store, double coeff) {
    if (shadow_.size() != store.params().size()) throw ShapeError("ema: parameter count changed");
    for (size_t i = 0; i < shadow_.size(); ++i) ema_update(shadow_[i], store.params()[i].value, coeff);
}

void TrainConfig::validate() const {
    model.validate();
    noise.validate();
    mask.validate();
    plan.validate();
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    for (const auto& p : plan.phases) {
        if (mask.pipeline == Pipeline::unmasked && p.mask_ratio > 0)
            throw ConfigError("phase '" + p.name + "': mask_ratio > 0 needs a masking pipeline");
        if (mask.pipeline == Pipeline::naive && model.mixer_depth > 0)
            throw ConfigError("naive masking pipeline needs model.mixer_depth = 0");
        if (mask.pipeline == Pipeline::maskdit && (model.decoder_depth < 1 || model.mixer_depth > 0))
            throw ConfigError("maskdit pipeline needs model.decoder_depth >= 1 and model.mixer_depth = 0");
        if (mask.pipeline != Pipeline::maskdit && model.decoder_depth > 0)
            throw ConfigError("model.decoder_depth > 0 is only used by the maskdit pipeline");
    }
}

std::string metrics_header() { return "step,phase,loss,lr,grad_norm,kept_patches,ema_active"; }

std::string metrics_row(const StepMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%d,%.17g,%.17g,%.17g,%lld,%d", static_cast<long long>(m.step), m.phase,
                  m.loss, m.lr, m.grad_norm, static_cast<long long>(m.kept_patches), m.ema_active ? 1 : 0);
    return buf;
}

std::vector<uint8_t> draw_caption_drop(int64_t batch, double p, Rng& rng) {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("caption dropout must be in [0, 1]");
    std::vector<uint8_t> out(static_cast<size_t>(batch), 0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // One draw per sample regardless of p keeps the stream aligned across settings.
    for (auto& d : out) d = u(rng) < p ? 1 : 0;
    return out;
}

namespace {

enum Stream : uint64_t { noise_stream = 1, mask_stream = 2, caption_stream = 3, data_stream = 4 };

std::filesystem::path checkpoint_name(const std::filesystem::path& run_dir, int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt-%07lld.json", static_cast<long long>(step));
    return run_dir / "checkpoints" / buf;
}

nlohmann::json widths_json(const DenoiserNet& net) {
    auto one = [](const std::vector<BlockWidths>& ws) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& w : ws) a.push_back({{"attn", w.attn}, {"ffn", w.ffn}, {"moe", w.moe}});
        return a;
    };
    return {{"mixer", one(mixer_widths(net.config()))},
            {"backbone", one(net.widths())},
            {"decoder", one(decoder_widths(net.config()))}};
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
    if (dst.shape() != src.shape())
        throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                         shape_str(dst.shape()));
    dst.assign(src);
}

} // namespace

Trainer::Trainer(TrainConfig config, const Dataset& data, std::filesystem::path run_dir)
    : config_(std::move(config)),
      data_(data),
      run_dir_(std::move(run_dir)),
      net_(config_.model, mix_seed(config_.seed, 0), config_.dtype),
      stub_(config_.model.caption_length, config_.model.caption_dim),
      opt_(net_.store()) {
    config_.validate();
    if (data_.size() < 1) throw std::invalid_argument("trainer: empty dataset");
    if (data_.height != config_.model.latent_height || data_.width != config_.model.latent_width ||
        data_.channels != config_.model.channels)
        throw ShapeError("trainer: dataset latents " + std::to_string(data_.height) + "x" + std::to_string(data_.width) +
                         "x" + std::to_string(data_.channels) + " do not match the model");
}

std::pair<int, int64_t> Trainer::locate(int64_t global_step) const {
    int64_t s = global_step;
    const auto& phases = config_.plan.phases;
    for (size_t i = 0; i < phases.size(); ++i) {
        if (s < phases[i].steps) return {static_cast<int>(i), s};
        s -= phases[i].steps;
    }
    throw std::out_of_range("step " + std::to_string(global_step) + " is past the end of the plan");
}

StepMetrics Trainer::train_step(int64_t global_step) {
    kernels::set_deterministic(config_.deterministic);
    const auto [phase_idx, phase_step] = locate(global_step);
    const PhaseConfig& phase = config_.plan.phases[static_cast<size_t>(phase_idx)];
    const auto& m = config_.model;
    const auto step_u = static_cast<uint64_t>(global_step);

    const uint64_t data_seed = mix_seed(config_.data_seed ? config_.data_seed : config_.seed, data_stream,
                                        static_cast<uint64_t>(phase_idx));
    const Index idx = batch_indices(data_.size(), phase.batch, phase_step, data_seed);
    const Tensor x = patchify(data_.batch(idx, config_.dtype), m.patch_size);

    Rng caption_rng(mix_seed(config_.seed, caption_stream, step_u));
    std::vector<int32_t> phrases;
    for (int64_t i : idx) phrases.push_back(data_.phrases[static_cast<size_t>(i)]);
    const CaptionBatch caption = stub_.batch(phrases, draw_caption_drop(phase.batch, phase.caption_dropout, caption_rng),
                                             config_.dtype);

    NoiseSpec noise = config_.noise;
    noise.p_mean = phase.p_mean;
    noise.p_std = phase.p_std;
    Rng noise_rng(mix_seed(config_.seed, noise_stream, step_u));
    const LossDraw draw = draw_noise(noise, x.shape(), noise_rng, config_.dtype);

    std::vector<Mask> masks;
    for (int64_t b = 0; b < phase.batch; ++b)
        masks.push_back(make_mask(config_.mask, m.grid_h(), m.grid_w(), phase.mask_ratio,
                                  mix_seed(config_.seed, mask_stream, step_u * static_cast<uint64_t>(phase.batch) +
                                                                          static_cast<uint64_t>(b))));

    StepMetrics out;
    out.step = global_step + 1;
    out.phase = phase_idx;
    out.lr = lr_at(phase, phase_step);
    out.kept_patches = masks.front().kept_count();

    net_.store().zero_grad();
    const Pipeline pipeline = phase.mask_ratio > 0 || config_.mask.pipeline == Pipeline::maskdit
                                  ? config_.mask.pipeline
                                  : Pipeline::unmasked;
    const LossParts parts = train_loss(pipeline, net_, x, caption, draw, masks, config_.mask.gamma);
    out.loss = parts.total.item();
    out.diff = parts.diff;
    out.mae = parts.mae;

    bool applied = false;
    if (std::isfinite(out.loss)) {
        parts.total.backward();
        out.grad_norm = grad_norm(net_.store());
        clip_grad_norm(net_.store(), phase.clip);
        // AdamW itself rejects (and counts) non-finite gradients.
        applied = opt_.step(net_.store(), {out.lr, phase.weight_decay, phase.beta1, phase.beta2, phase.eps});
    } else {
        opt_.restore(opt_.steps(), opt_.skipped() + 1);
    }
    net_.store().zero_grad();
    out.skipped = !applied;
    if (applied && phase.ema > 0) {
        if (!ema_.active())
            ema_.start(net_.store());
        else
            ema_.update(net_.store(), phase.ema);
    }
    out.ema_active = ema_.active();
    step_ = global_step + 1;
    return out;
}

void Trainer::run(int64_t stop_after) {
    std::filesystem::create_directories(run_dir_ / "checkpoints");
    const int64_t total = config_.plan.total_steps();
    const int64_t end = stop_after > 0 ? std::min(total, stop_after) : total;
    const bool fresh = !std::filesystem::exists(metrics_path());
    std::ofstream csv(metrics_path(), std::ios::app);
    if (!csv) throw std::runtime_error("cannot write " + metrics_path().string());
    if (fresh) csv << metrics_header() << "\n";

    std::vector<int64_t> boundaries;
    int64_t acc = 0;
    for (const auto& p : config_.plan.phases) boundaries.push_back(acc += p.steps);

    while (step_ < end) {
        const StepMetrics m = train_step(step_);
        csv << metrics_row(m) << "\n";
        const bool boundary = std::find(boundaries.begin(), boundaries.end(), step_) != boundaries.end();
        const bool interval = config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0;
        if (boundary || interval || step_ == end) {
            csv.flush();
            save_checkpoint();
        }
    }
}

std::filesystem::path Trainer::save_checkpoint() const {
    std::vector<NamedTensor> tensors;
    auto& self = const_cast<Trainer&>(*this);
    const auto& params = net_.store().params();
    for (const auto& p : params) tensors.push_back({"param/" + p.name, p.value});
    for (size_t i = 0; i < params.size(); ++i) tensors.push_back({"adam_m/" + params[i].name, self.opt_.first_moments()[i]});
    for (size_t i = 0; i < params.size(); ++i) tensors.push_back({"adam_v/" + params[i].name, self.opt_.second_moments()[i]});
    if (ema_.active())
        for (size_t i = 0; i < params.size(); ++i) tensors.push_back({"ema/" + params[i].name, ema_.shadow()[i]});
    nlohmann::json meta = {{"step", step_},
                           {"adam_steps", opt_.steps()},
                           {"adam_skipped", opt_.skipped()},
                           {"ema_active", ema_.active()},
                           {"seed", config_.seed},
                           {"data_seed", config_.data_seed},
                           {"dtype", dtype_name(config_.dtype)},
                           {"pipeline", pipeline_name(config_.mask.pipeline)},
                           {"model", model_config_to_json(config_.model)},
                           {"widths", widths_json(net_)}};
    const auto path = checkpoint_name(run_dir_, step_);
    std::filesystem::create_directories(path.parent_path());
    save_tensors(path, tensors, meta);
    return path;
}

void Trainer::load_checkpoint(const std::filesystem::path& manifest) {
    const TensorBundle b = load_tensors(manifest);
    if (b.meta.contains("model") && model_config_to_json(config_.model) != b.meta.at("model"))
        throw ShapeError("checkpoint " + manifest.string() + " was written for a different model config");
    auto& params = net_.store().params();
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string& n = params[i].name;
        for (const char* prefix : {"param/", "adam_m/", "adam_v/"})
            if (!b.contains(prefix + n)) throw ShapeError("checkpoint is missing tensor '" + std::string(prefix) + n + "'");
        copy_into(params[i].value, b.get("param/" + n), n);
        copy_into(opt_.first_moments()[i], b.get("adam_m/" + n), "adam_m/" + n);
        copy_into(opt_.second_moments()[i], b.get("adam_v/" + n), "adam_v/" + n);
    }
    const int64_t expected = static_cast<int64_t>(params.size()) * (b.meta.value("ema_active", false) ? 4 : 3);
    if (static_cast<int64_t>(b.tensors.size()) != expected)
        throw ShapeError("checkpoint holds " + std::to_string(b.tensors.size()) + " tensors, model expects " +
                         std::to_string(expected));
    if (b.meta.value("ema_active", false)) {
        ema_.start(net_.store());
        for (size_t i = 0; i < params.size(); ++i)
            copy_into(ema_.shadow()[i], b.get("ema/" + params[i].name), "ema/" + params[i].name);
    } else {
        ema_ = Ema();
    }
    opt_.restore(b.meta.at("adam_steps"), b.meta.at("adam_skipped"));
    step_ = b.meta.at("step");
}

bool Trainer::resume() {
    const auto ckpt = latest_checkpoint(run_dir_);
    if (ckpt.empty()) return false;
    load_checkpoint(ckpt);
    // Drop metric rows written after the checkpoint.
    if (std::filesystem::exists(metrics_path())) {
        std::ifstream in(metrics_path());
        std::string line, kept;
        std::getline(in, line);
        kept = line + "\n";
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (std::stoll(line.substr(0, line.find(','))) > step_) break;
            kept += line + "\n";
        }
        in.close();
        std::ofstream(metrics_path(), std::ios::trunc) << kept;
    }
    return true;
}

bool load_weights(DenoiserNet& net, const std::filesystem::path& checkpoint, bool prefer_ema) {
    const TensorBundle b = load_tensors(checkpoint);
    const bool use_ema = prefer_ema && b.meta.value("ema_active", false);
    for (auto& p : net.store().params()) {
        const std::string key = (use_ema ? "ema/" : "param/") + p.name;
        if (!b.contains(key)) throw ShapeError("checkpoint is missing tensor '" + key + "'");
        copy_into(p.value, b.get(key), key);
    }
    return use_ema;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir) {
    const auto dir = run_dir / "checkpoints";
    if (!std::filesystem::is_directory(dir)) return {};
    std::filesystem::path best;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const std::string n = e.path().filename().string();
        if (n.rfind("ckpt-", 0) == 0 && e.path().extension() == ".json" && (best.empty() || n > best.filename().string()))
            best = e.path();
    }
    return best;
}

} // namespace ddit
