// SPDX-License-Identifier: Apache-2.0

#include "ddit/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ddit/errors.hpp"

#ifndef DDIT_PRESET_DIR
#define DDIT_PRESET_DIR "presets"
#endif

namespace ddit {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& what, const std::string& value) {
    throw ConfigError("invalid value '" + value + "' for " + what);
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

void parse(const std::string& s, int64_t& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument(s);
}
void parse(const std::string& s, uint64_t& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument(s);
}
void parse(const std::string& s, double& out) {
    if (s == "inf") {
        out = std::numeric_limits<double>::infinity();
        return;
    }
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument(s);
}
void parse(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") out = true;
    else if (s == "false" || s == "0" || s == "no" || s == "off") out = false;
    else throw std::invalid_argument(s);
}
void parse(const std::string& s, std::string& out) { out = s; }
void parse(const std::string& s, Activation& out) { out = parse_activation(s); }
void parse(const std::string& s, Pipeline& out) { out = parse_pipeline(s); }
void parse(const std::string& s, MaskLayout& out) { out = parse_layout(s); }
void parse(const std::string& s, Schedule& out) { out = parse_schedule(s); }
void parse(const std::string& s, SamplerMode& out) { out = parse_sampler_mode(s); }
void parse(const std::string& s, DType& out) {
    if (s == "f32") out = DType::f32;
    else if (s == "f64") out = DType::f64;
    else throw std::invalid_argument(s);
}

std::string show(int64_t v) { return std::to_string(v); }
std::string show(uint64_t v) { return std::to_string(v); }
std::string show(double v) { return fmt(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }
std::string show(Activation v) { return activation_name(v); }
std::string show(Pipeline v) { return pipeline_name(v); }
std::string show(MaskLayout v) { return layout_name(v); }
std::string show(Schedule v) { return schedule_name(v); }
std::string show(SamplerMode v) { return sampler_mode_name(v); }
std::string show(DType v) { return dtype_name(v); }

template <class Target>
struct Entry {
    std::string section, key;
    std::function<std::string(Target&)> get;
    std::function<void(Target&, const std::string&)> set;
};

template <class Target, class T>
Entry<Target> field(std::string section, std::string key, std::function<T&(Target&)> ref) {
    const std::string path = section + "." + key;
    return {section, key, [ref](Target& t) { return show(ref(t)); },
            [ref, path](Target& t, const std::string& v) {
                T tmp{};
                try {
                    parse(v, tmp);
                } catch (const std::invalid_argument&) {
                    bad_value(path, v);
                }
                ref(t) = tmp;
            }};
}

// "lo, hi" pairs of multipliers.
template <class Target>
Entry<Target> range(std::string section, std::string key, std::function<double&(Target&)> lo,
                    std::function<double&(Target&)> hi) {
    const std::string path = section + "." + key;
    return {section, key, [lo, hi](Target& t) { return fmt(lo(t)) + ", " + fmt(hi(t)); },
            [lo, hi, path](Target& t, const std::string& v) {
                const auto comma = v.find(',');
                double a = 0, b = 0;
                try {
                    if (comma == std::string::npos) {
                        parse(trim(v), a);
                        b = a;
                    } else {
                        parse(trim(v.substr(0, comma)), a);
                        parse(trim(v.substr(comma + 1)), b);
                    }
                } catch (const std::invalid_argument&) {
                    bad_value(path, v);
                }
                lo(t) = a;
                hi(t) = b;
            }};
}

#define RC_FIELD(T, sec, key, expr) field<RunConfig, T>(sec, key, [](RunConfig& c) -> T& { return expr; })
#define PH_FIELD(T, key, expr) field<PhaseConfig, T>("phase", key, [](PhaseConfig& p) -> T& { return expr; })

const std::vector<Entry<RunConfig>>& registry() {
    static const std::vector<Entry<RunConfig>> entries = [] {
        std::vector<Entry<RunConfig>> e;
        e.push_back(RC_FIELD(int64_t, "model", "width", c.train.model.width));
        e.push_back(RC_FIELD(int64_t, "model", "depth", c.train.model.depth));
        e.push_back(RC_FIELD(int64_t, "model", "patch_size", c.train.model.patch_size));
        e.push_back(RC_FIELD(int64_t, "model", "head_dim", c.train.model.head_dim));
        e.push_back(range<RunConfig>(
            "model", "attn_mult", [](RunConfig& c) -> double& { return c.train.model.attn_mult_lo; },
            [](RunConfig& c) -> double& { return c.train.model.attn_mult_hi; }));
        e.push_back(range<RunConfig>(
            "model", "ffn_mult", [](RunConfig& c) -> double& { return c.train.model.ffn_mult_lo; },
            [](RunConfig& c) -> double& { return c.train.model.ffn_mult_hi; }));
        e.push_back(RC_FIELD(int64_t, "model", "mixer_depth", c.train.model.mixer_depth));
        e.push_back(RC_FIELD(double, "model", "mixer_attn_mult", c.train.model.mixer_attn_mult));
        e.push_back(RC_FIELD(double, "model", "mixer_ffn_mult", c.train.model.mixer_ffn_mult));
        e.push_back(RC_FIELD(int64_t, "model", "decoder_depth", c.train.model.decoder_depth));
        e.push_back(RC_FIELD(Activation, "model", "activation", c.train.model.activation));
        e.push_back(RC_FIELD(bool, "model", "qk_norm", c.train.model.qk_norm));
        e.push_back(RC_FIELD(int64_t, "model", "latent_height", c.train.model.latent_height));
        e.push_back(RC_FIELD(int64_t, "model", "latent_width", c.train.model.latent_width));
        e.push_back(RC_FIELD(int64_t, "model", "channels", c.train.model.channels));
        e.push_back(RC_FIELD(int64_t, "model", "caption_length", c.train.model.caption_length));
        e.push_back(RC_FIELD(int64_t, "model", "caption_dim", c.train.model.caption_dim));
        e.push_back(RC_FIELD(int64_t, "model", "sigma_embed_dim", c.train.model.sigma_embed_dim));

        e.push_back(RC_FIELD(double, "noise", "sigma_min", c.train.noise.sigma_min));
        e.push_back(RC_FIELD(double, "noise", "sigma_max", c.train.noise.sigma_max));
        // One value feeds both the preconditioning and the noise process.
        e.push_back({"noise", "sigma_data", [](RunConfig& c) { return fmt(c.train.noise.sigma_data); },
                     [](RunConfig& c, const std::string& v) {
                         double x = 0;
                         try {
                             parse(v, x);
                         } catch (const std::invalid_argument&) {
                             bad_value("noise.sigma_data", v);
                         }
                         c.train.noise.sigma_data = c.train.model.sigma_data = x;
                     }});

        e.push_back(RC_FIELD(Pipeline, "mask", "pipeline", c.train.mask.pipeline));
        e.push_back(RC_FIELD(MaskLayout, "mask", "layout", c.train.mask.layout));
        e.push_back(RC_FIELD(int64_t, "mask", "block", c.train.mask.block));
        e.push_back(RC_FIELD(double, "mask", "gamma", c.train.mask.gamma));

        e.push_back(RC_FIELD(bool, "moe", "enabled", c.train.model.moe.enabled));
        e.push_back(RC_FIELD(int64_t, "moe", "num_experts", c.train.model.moe.num_experts));
        e.push_back(RC_FIELD(double, "moe", "capacity_factor", c.train.model.moe.capacity_factor));
        e.push_back(RC_FIELD(double, "moe", "expert_lr_scale", c.train.model.moe.expert_lr_scale));

        e.push_back(RC_FIELD(uint64_t, "train", "seed", c.train.seed));
        e.push_back(RC_FIELD(uint64_t, "train", "data_seed", c.train.data_seed));
        e.push_back(RC_FIELD(bool, "train", "deterministic", c.train.deterministic));
        e.push_back(RC_FIELD(int64_t, "train", "checkpoint_every", c.train.checkpoint_every));
        e.push_back(RC_FIELD(DType, "train", "dtype", c.train.dtype));

        e.push_back(RC_FIELD(int64_t, "sampler", "steps", c.sampler.steps));
        e.push_back(RC_FIELD(double, "sampler", "sigma_min", c.sampler.sigma_min));
        e.push_back(RC_FIELD(double, "sampler", "sigma_max", c.sampler.sigma_max));
        e.push_back(RC_FIELD(double, "sampler", "rho", c.sampler.rho));
        e.push_back(RC_FIELD(double, "sampler", "guidance", c.sampler.guidance));
        e.push_back(RC_FIELD(SamplerMode, "sampler", "mode", c.sampler.mode));
        e.push_back(RC_FIELD(double, "sampler", "s_churn", c.sampler.s_churn));
        e.push_back(RC_FIELD(double, "sampler", "s_noise", c.sampler.s_noise));
        e.push_back(RC_FIELD(double, "sampler", "s_min", c.sampler.s_min));
        e.push_back(RC_FIELD(double, "sampler", "s_max", c.sampler.s_max));

        e.push_back(RC_FIELD(std::string, "data", "dir", c.data_dir));
        e.push_back(RC_FIELD(int64_t, "data", "height", c.data.height));
        e.push_back(RC_FIELD(int64_t, "data", "width", c.data.width));
        e.push_back(RC_FIELD(int64_t, "data", "channels", c.data.channels));
        e.push_back(RC_FIELD(int64_t, "data", "num_classes", c.data.num_classes));
        e.push_back(RC_FIELD(int64_t, "data", "samples_per_class", c.data.samples_per_class));
        e.push_back(RC_FIELD(double, "data", "synthetic_fraction", c.data.synthetic_fraction));
        e.push_back(RC_FIELD(double, "data", "value_scale", c.data.value_scale));
        e.push_back(RC_FIELD(uint64_t, "data", "seed", c.data.seed));

        e.push_back(RC_FIELD(int64_t, "eval", "samples", c.eval.samples));
        e.push_back(RC_FIELD(int64_t, "eval", "feature_dim", c.eval.feature_dim));
        e.push_back(RC_FIELD(uint64_t, "eval", "feature_seed", c.eval.feature_seed));
        e.push_back(RC_FIELD(uint64_t, "eval", "sample_seed", c.eval.sample_seed));
        e.push_back(RC_FIELD(bool, "eval", "use_ema", c.eval.use_ema));
        e.push_back(RC_FIELD(double, "eval", "guidance", c.eval.guidance));
        e.push_back(RC_FIELD(double, "eval", "holdout", c.eval.holdout));
        return e;
    }();
    return entries;
}

const std::vector<Entry<PhaseConfig>>& phase_registry() {
    static const std::vector<Entry<PhaseConfig>> entries = [] {
        std::vector<Entry<PhaseConfig>> e;
        e.push_back(PH_FIELD(std::string, "name", p.name));
        e.push_back(PH_FIELD(double, "mask_ratio", p.mask_ratio));
        e.push_back(PH_FIELD(int64_t, "steps", p.steps));
        e.push_back(PH_FIELD(int64_t, "batch", p.batch));
        e.push_back(PH_FIELD(double, "lr", p.lr));
        e.push_back(PH_FIELD(Schedule, "schedule", p.schedule));
        e.push_back(PH_FIELD(int64_t, "warmup", p.warmup));
        e.push_back(PH_FIELD(int64_t, "cycle_steps", p.cycle_steps));
        e.push_back(PH_FIELD(double, "cycle_mult", p.cycle_mult));
        e.push_back(PH_FIELD(double, "weight_decay", p.weight_decay));
        e.push_back(PH_FIELD(double, "beta1", p.beta1));
        e.push_back(PH_FIELD(double, "beta2", p.beta2));
        e.push_back(PH_FIELD(double, "eps", p.eps));
        e.push_back(PH_FIELD(double, "clip", p.clip));
        e.push_back(PH_FIELD(double, "ema", p.ema));
        e.push_back(PH_FIELD(double, "caption_dropout", p.caption_dropout));
        e.push_back(PH_FIELD(double, "p_mean", p.p_mean));
        e.push_back(PH_FIELD(double, "p_std", p.p_std));
        e.push_back(PH_FIELD(int64_t, "latent_size", p.latent_size));
        return e;
    }();
    return entries;
}

#undef RC_FIELD
#undef PH_FIELD

template <class Target>
const Entry<Target>* find_entry(const std::vector<Entry<Target>>& reg, const std::string& section,
                                const std::string& key) {
    for (const auto& e : reg)
        if (e.section == section && e.key == key) return &e;
    return nullptr;
}

void set_phase_value(PhaseConfig& phase, const std::string& key, const std::string& value, const std::string& path) {
    const auto* e = find_entry(phase_registry(), "phase", key);
    if (!e) throw ConfigError("unknown config key '" + path + "'");
    e->set(phase, value);
}

} // namespace

void EvalConfig::validate() const {
    if (samples < 2) throw ConfigError("eval.samples must be >= 2");
    if (feature_dim < 1) throw ConfigError("eval.feature_dim must be >= 1");
    if (!(holdout > 0 && holdout < 1)) throw ConfigError("eval.holdout must be in (0, 1)");
}

void RunConfig::validate() const {
    train.validate();
    sampler.validate();
    data.validate();
    eval.validate();
    const auto& m = train.model;
    if (data_dir.empty() &&
        (m.latent_height != data.height || m.latent_width != data.width || m.channels != data.channels))
        throw ConfigError("model latent geometry " + std::to_string(m.latent_height) + "x" +
                          std::to_string(m.latent_width) + "x" + std::to_string(m.channels) +
                          " does not match [data] " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                          "x" + std::to_string(data.channels));
}

RunConfig default_run_config() {
    RunConfig c;
    // Desk-scale model: four layer-wise scaled blocks behind a two-block mixer.
    auto& m = c.train.model;
    m.width = 32;
    m.depth = 4;
    m.patch_size = 2;
    m.head_dim = 8;
    m.attn_mult_lo = 0.5, m.attn_mult_hi = 1.0;
    m.ffn_mult_lo = 0.5, m.ffn_mult_hi = 4.0;
    m.mixer_depth = 2;
    m.caption_length = 4, m.caption_dim = 32;
    m.sigma_embed_dim = 32;
    // Published optimizer settings (betas, eps, weight decay, clip, caption
    // dropout) with step counts, batch and learning rates scaled down.
    PhaseConfig masked;
    masked.name = "masked";
    masked.mask_ratio = 0.75;
    masked.steps = 4000;
    masked.batch = 16;
    masked.lr = 1e-3;
    masked.warmup = 200;
    masked.schedule = Schedule::cosine;
    masked.ema = 0.999;
    PhaseConfig unmasked = masked;
    unmasked.name = "unmasked";
    unmasked.mask_ratio = 0.0;
    unmasked.steps = 1000;
    unmasked.lr = 2e-4;
    unmasked.warmup = 0;
    unmasked.schedule = Schedule::constant;
    c.train.plan.phases = {masked, unmasked};
    c.sampler.steps = 16;
    c.eval.samples = 1000;
    c.eval.guidance = 1.0;
    return c;
}

void set_config_value(RunConfig& config, const std::string& path, const std::string& value) {
    const auto dot = path.find('.');
    if (dot == std::string::npos) throw ConfigError("unknown config key '" + path + "'");
    const std::string section = path.substr(0, dot), key = path.substr(dot + 1);
    if (section == "phase") {
        // phase.<index>.<key>
        const auto dot2 = key.find('.');
        int64_t idx = -1;
        if (dot2 != std::string::npos) try {
                parse(key.substr(0, dot2), idx);
            } catch (const std::invalid_argument&) {
                idx = -1;
            }
        if (idx < 0) throw ConfigError("unknown config key '" + path + "' (use phase.<index>.<key>)");
        auto& phases = config.train.plan.phases;
        if (idx >= static_cast<int64_t>(phases.size()))
            throw ConfigError("config key '" + path + "': plan has " + std::to_string(phases.size()) + " phases");
        set_phase_value(phases[static_cast<size_t>(idx)], key.substr(dot2 + 1), value, path);
        return;
    }
    const auto* e = find_entry(registry(), section, key);
    if (!e) throw ConfigError("unknown config key '" + path + "'");
    e->set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& path) {
    auto& c = const_cast<RunConfig&>(config);
    const auto dot = path.find('.');
    if (dot != std::string::npos && path.substr(0, dot) == "phase") {
        const std::string rest = path.substr(dot + 1);
        const auto dot2 = rest.find('.');
        int64_t idx = -1;
        if (dot2 != std::string::npos) try {
                parse(rest.substr(0, dot2), idx);
            } catch (const std::invalid_argument&) {
            }
        if (idx >= 0 && idx < static_cast<int64_t>(c.train.plan.phases.size()))
            if (const auto* e = find_entry(phase_registry(), "phase", rest.substr(dot2 + 1)))
                return e->get(c.train.plan.phases[static_cast<size_t>(idx)]);
        throw ConfigError("unknown config key '" + path + "'");
    }
    if (dot != std::string::npos)
        if (const auto* e = find_entry(registry(), path.substr(0, dot), path.substr(dot + 1))) return e->get(c);
    throw ConfigError("unknown config key '" + path + "'");
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& e : registry()) out.push_back(e.section + "." + e.key);
    return out;
}

RunConfig parse_config(const std::string& text, RunConfig base, const std::string& source) {
    RunConfig c = std::move(base);
    std::istringstream in(text);
    std::string line, section;
    bool phases_reset = false;
    PhaseConfig* phase = nullptr;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        if (line == "[[phase]]") {
            if (!phases_reset) c.train.plan.phases.clear(), phases_reset = true;
            c.train.plan.phases.emplace_back();
            phase = &c.train.plan.phases.back();
            section = "phase";
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            phase = nullptr;
            if (section == "phase") throw ConfigError(where + ": use [[phase]] for plan phases");
            if (std::none_of(registry().begin(), registry().end(), [&](const auto& e) { return e.section == section; }))
                throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside any section");
        try {
            if (phase)
                set_phase_value(*phase, key, value, "phase." + key);
            else
                set_config_value(c, section + "." + key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    return c;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw MissingFileError("config not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base), path.string());
}

std::string render_config(const RunConfig& config) {
    auto& c = const_cast<RunConfig&>(config);
    std::ostringstream os;
    std::string section;
    for (const auto& e : registry()) {
        if (e.section != section) {
            // Phases follow the [train] block.
            if (section == "train")
                for (auto& p : c.train.plan.phases) {
                    os << "\n[[phase]]\n";
                    for (const auto& pe : phase_registry()) os << pe.key << " = " << pe.get(p) << "\n";
                }
            section = e.section;
            os << (os.tellp() > 0 ? "\n" : "") << "[" << section << "]\n";
        }
        os << e.key << " = " << e.get(c) << "\n";
    }
    return os.str();
}

std::filesystem::path preset_path(const std::string& name) {
    const char* env = std::getenv("DDIT_PRESET_DIR");
    const std::filesystem::path dir = env && *env ? env : DDIT_PRESET_DIR;
    const auto p = dir / (name + ".cfg");
    if (!std::filesystem::exists(p)) throw MissingFileError("preset not found: " + p.string());
    return p;
}

RunConfig load_preset(const std::string& name) { return load_config(preset_path(name)); }

nlohmann::json model_config_to_json(const ModelConfig& m) {
    return {{"width", m.width},
            {"depth", m.depth},
            {"patch_size", m.patch_size},
            {"head_dim", m.head_dim},
            {"attn_mult", {m.attn_mult_lo, m.attn_mult_hi}},
            {"ffn_mult", {m.ffn_mult_lo, m.ffn_mult_hi}},
            {"mixer_depth", m.mixer_depth},
            {"mixer_attn_mult", m.mixer_attn_mult},
            {"mixer_ffn_mult", m.mixer_ffn_mult},
            {"decoder_depth", m.decoder_depth},
            {"activation", activation_name(m.activation)},
            {"qk_norm", m.qk_norm},
            {"moe",
             {{"enabled", m.moe.enabled},
              {"num_experts", m.moe.num_experts},
              {"capacity_factor", m.moe.capacity_factor},
              {"expert_lr_scale", m.moe.expert_lr_scale}}},
            {"latent", {m.latent_height, m.latent_width, m.channels}},
            {"caption_length", m.caption_length},
            {"caption_dim", m.caption_dim},
            {"sigma_embed_dim", m.sigma_embed_dim},
            {"sigma_data", m.sigma_data}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig m;
        m.width = j.at("width");
        m.depth = j.at("depth");
        m.patch_size = j.at("patch_size");
        m.head_dim = j.at("head_dim");
        m.attn_mult_lo = j.at("attn_mult").at(0), m.attn_mult_hi = j.at("attn_mult").at(1);
        m.ffn_mult_lo = j.at("ffn_mult").at(0), m.ffn_mult_hi = j.at("ffn_mult").at(1);
        m.mixer_depth = j.at("mixer_depth");
        m.mixer_attn_mult = j.at("mixer_attn_mult");
        m.mixer_ffn_mult = j.at("mixer_ffn_mult");
        m.decoder_depth = j.at("decoder_depth");
        m.activation = parse_activation(j.at("activation").get<std::string>());
        m.qk_norm = j.at("qk_norm");
        const auto& moe = j.at("moe");
        m.moe.enabled = moe.at("enabled");
        m.moe.num_experts = moe.at("num_experts");
        m.moe.capacity_factor = moe.at("capacity_factor");
        m.moe.expert_lr_scale = moe.at("expert_lr_scale");
        m.latent_height = j.at("latent").at(0), m.latent_width = j.at("latent").at(1), m.channels = j.at("latent").at(2);
        m.caption_length = j.at("caption_length");
        m.caption_dim = j.at("caption_dim");
        m.sigma_embed_dim = j.at("sigma_embed_dim");
        m.sigma_data = j.at("sigma_data");
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

} // namespace ddit
