// SPDX-License-Identifier: Apache-2.0

#include "ddit/cost.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "ddit/errors.hpp"

namespace ddit {

namespace {

using D = double;

// Linear layer applied to `rows` rows: in x out multiply-adds per row.
D linear(int64_t rows, int64_t in, int64_t out) { return 2.0 * D(rows) * D(in) * D(out); }

D ffn_flops(const ModelConfig& c, int64_t tokens, int64_t hidden) {
    const int matrices = c.activation == Activation::gelu ? 2 : 3;
    return D(matrices) * linear(tokens, c.width, hidden);
}

// Rows each expert processes for a sequence of `tokens`.
int64_t expert_rows(const ModelConfig& c, int64_t tokens) {
    const int64_t k = expert_capacity(tokens, c.moe.num_experts, c.moe.capacity_factor);
    return k < 1 ? tokens : std::min(k, tokens);
}

struct BlockFlops {
    D linear = 0, scores = 0, cross = 0, context = 0;
    D total() const { return linear + scores + cross + context; }
};

BlockFlops block_flops(const ModelConfig& c, const BlockWidths& w, int64_t tokens) {
    const int64_t d = c.width, l = c.caption_length;
    BlockFlops f;
    // Self-attention q, k, v and output projections.
    f.linear += 3.0 * linear(tokens, d, w.attn) + linear(tokens, w.attn, d);
    f.scores += 2.0 * (2.0 * D(tokens) * D(tokens) * D(w.attn));
    // Cross-attention: queries/outputs per token, keys/values per caption token.
    f.linear += 2.0 * linear(tokens, d, d);
    f.context += 2.0 * linear(l, d, d);
    f.cross += 2.0 * (2.0 * D(tokens) * D(l) * D(d));
    if (w.moe) {
        f.linear += linear(tokens, d, c.moe.num_experts);
        f.linear += D(c.moe.num_experts) * ffn_flops(c, expert_rows(c, tokens), w.ffn);
    } else {
        f.linear += ffn_flops(c, tokens, w.ffn);
    }
    return f;
}

int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }

int64_t attention_params(int64_t width, int64_t inner) {
    return linear_params(width, inner) * 3 + linear_params(inner, width);
}

int64_t ffn_params(const ModelConfig& c, int64_t hidden) {
    if (c.activation == Activation::gelu) return linear_params(c.width, hidden) + linear_params(hidden, c.width);
    return 2 * linear_params(c.width, hidden) + linear_params(hidden, c.width);
}

struct BlockParams {
    int64_t total = 0;
    double active = 0;
};

BlockParams block_params(const ModelConfig& c, const BlockWidths& w) {
    const int64_t d = c.width;
    const int64_t shared = 3 * 2 * d + attention_params(d, w.attn) + attention_params(d, d);
    if (!w.moe) {
        const int64_t p = shared + ffn_params(c, w.ffn);
        return {p, double(p)};
    }
    const int64_t e = c.moe.num_experts, s = c.patches();
    const int64_t router = linear_params(d, e);
    const int64_t expert = ffn_params(c, w.ffn);
    // Average experts per token: every expert takes expert_rows of S tokens.
    const double per_token = double(e) * double(expert_rows(c, s)) / double(s);
    return {shared + router + e * expert, double(shared + router) + per_token * double(expert)};
}

} // namespace

double FlopBreakdown::total() const {
    return embed + conditioning + mixer + backbone() + decoder + head;
}

FlopBreakdown flops_forward(const ModelConfig& c, int64_t kept) {
    c.validate();
    const int64_t s = c.patches(), d = c.width, l = c.caption_length;
    if (kept < 1 || kept > s)
        throw std::invalid_argument("flops_forward: kept tokens " + std::to_string(kept) + " outside [1, " +
                                    std::to_string(s) + "]");
    FlopBreakdown f;
    f.embed = linear(s, c.patch_dim(), d);
    f.conditioning = linear(1, c.sigma_embed_dim, d) + linear(1, d, d);
    if (c.caption_dim != d) f.conditioning += linear(l, c.caption_dim, d);
    f.conditioning += 4.0 * linear(l, d, d) + 2.0 * (2.0 * D(l) * D(l) * D(d));
    for (const BlockWidths& w : mixer_widths(c)) f.mixer += block_flops(c, w, s).total();
    for (const BlockWidths& w : build_layerwise_widths(c)) {
        const BlockFlops b = block_flops(c, w, kept);
        f.backbone_linear += b.linear;
        f.backbone_scores += b.scores;
        f.backbone_cross += b.cross;
        f.backbone_context += b.context;
    }
    for (const BlockWidths& w : decoder_widths(c)) f.decoder += block_flops(c, w, s).total();
    f.head = linear(c.decoder_depth > 0 ? s : kept, d, c.patch_dim());
    return f;
}

ModelConfig at_latent_size(const ModelConfig& config, int64_t latent_size) {
    ModelConfig c = config;
    if (latent_size > 0) c.latent_height = c.latent_width = latent_size;
    return c;
}

ParamCount count_params(const ModelConfig& c) {
    c.validate();
    const int64_t d = c.width;
    ParamCount p;
    int64_t shared = linear_params(c.patch_dim(), d) + c.patches() * d;
    shared += linear_params(c.sigma_embed_dim, d) + linear_params(d, d);
    shared += c.caption_length * c.caption_dim;
    if (c.caption_dim != d) shared += linear_params(c.caption_dim, d);
    shared += 2 * d + attention_params(d, d);
    shared += 2 * d + linear_params(d, c.patch_dim());
    double active = double(shared);
    for (const BlockWidths& w : mixer_widths(c)) {
        const BlockParams b = block_params(c, w);
        p.mixer += b.total;
        active += b.active;
    }
    for (const BlockWidths& w : build_layerwise_widths(c)) {
        const BlockParams b = block_params(c, w);
        p.backbone += b.total;
        active += b.active;
    }
    int64_t decoder = 0;
    if (c.decoder_depth > 0) {
        decoder += d;
        for (const BlockWidths& w : decoder_widths(c)) decoder += block_params(c, w).total;
    }
    p.total = shared + p.mixer + p.backbone + decoder;
    p.active = active + double(decoder);
    return p;
}

int64_t backbone_tokens(const ModelConfig& config, Pipeline pipeline, double mask_ratio) {
    const int64_t s = config.patches();
    if (pipeline == Pipeline::unmasked || mask_ratio == 0.0) return s;
    return keep_count(s, mask_ratio);
}

double step_flops(const ModelConfig& config, Pipeline pipeline, double mask_ratio, int64_t batch) {
    return double(batch) * 3.0 * flops_forward(config, backbone_tokens(config, pipeline, mask_ratio)).total();
}

CostReport plan_flops(const ModelConfig& config, Pipeline pipeline, const TrainPlan& plan,
                      const CostAssumptions& assumptions) {
    plan.validate();
    if (!(assumptions.throughput > 0) || !(assumptions.dollars_per_hour >= 0))
        throw ConfigError("cost: throughput must be positive and the hourly rate non-negative");
    CostReport r;
    r.assumptions = assumptions;
    r.params = count_params(config);
    const double seconds_per_day = 86400.0;
    for (const PhaseConfig& ph : plan.phases) {
        const ModelConfig c = at_latent_size(config, ph.latent_size);
        PhaseCost pc;
        pc.name = ph.name;
        pc.latent_size = c.latent_height;
        pc.resolution = c.latent_height * assumptions.pixels_per_latent;
        pc.mask_ratio = ph.mask_ratio;
        pc.steps = ph.steps;
        pc.batch = ph.batch;
        pc.patches = c.patches();
        pc.kept = backbone_tokens(c, pipeline, ph.mask_ratio);
        pc.forward_per_sample = flops_forward(c, pc.kept).total();
        pc.step_flops = double(ph.batch) * 3.0 * pc.forward_per_sample;
        pc.total_flops = double(ph.steps) * pc.step_flops;
        pc.days = pc.total_flops / assumptions.throughput / seconds_per_day;
        pc.dollars = pc.days * 24.0 * assumptions.dollars_per_hour;
        r.total_flops += pc.total_flops;
        r.days += pc.days;
        r.dollars += pc.dollars;
        r.phases.push_back(pc);
    }
    return r;
}

namespace {

ModelConfig scale_multipliers(const ModelConfig& c, double attn, double ffn) {
    ModelConfig out = c;
    out.attn_mult_lo *= attn;
    out.attn_mult_hi *= attn;
    out.ffn_mult_lo *= attn * ffn;
    out.ffn_mult_hi *= attn * ffn;
    out.mixer_attn_mult *= attn;
    out.mixer_ffn_mult *= attn * ffn;
    return out;
}

// Residual width g * d rounded to a multiple of head_dim (at least one head).
ModelConfig scale_width(const ModelConfig& c, double g) {
    ModelConfig out = c;
    const double heads = std::round(g * double(c.width) / double(c.head_dim));
    out.width = std::max<int64_t>(1, static_cast<int64_t>(heads)) * c.head_dim;
    return out;
}

// Largest factor in [lo, hi] whose config stays at or below the target.
double bisect_below(const std::function<double(double)>& flops, double target, double lo, double hi) {
    for (int i = 0; i < 80; ++i) {
        const double mid = 0.5 * (lo + hi);
        (flops(mid) <= target ? lo : hi) = mid;
    }
    return lo;
}

} // namespace

ModelConfig isoflops_downscale(const ModelConfig& config, double target, int64_t batch, double tolerance) {
    if (batch < 1) throw ConfigError("isoflops: batch must be positive");
    if (!(target > 0)) throw ConfigError("isoflops: target FLOPs must be positive");
    auto unmasked = [&](const ModelConfig& c) { return step_flops(c, Pipeline::unmasked, 0.0, batch); };
    auto close = [&](double f) { return std::abs(f - target) <= tolerance * target; };

    const double full = unmasked(config);
    if (target >= full) {
        if (close(full)) return config;
        throw ConfigError("isoflops: target " + std::to_string(target) + " exceeds the unmasked step FLOPs " +
                          std::to_string(full));
    }
    // Multipliers must stay positive; this one rounds every width to its minimum.
    const double smallest = 1e-9;
    const double floor_flops = unmasked(scale_multipliers(scale_width(config, smallest), smallest, 1.0));
    if (floor_flops > target * (1 + tolerance))
        throw ConfigError("isoflops: target " + std::to_string(target) + " unreachable; minimum widths give " +
                          std::to_string(floor_flops));

    // Residual width first, then attention/FFN widths at that d, then FFN
    // alone; each stage keeps the largest setting at or below the target.
    const double g = bisect_below([&](double x) { return unmasked(scale_width(config, x)); }, target, smallest, 1.0);
    const ModelConfig narrow = scale_width(config, g);
    if (close(unmasked(narrow))) return narrow;

    auto grow_limit = [&](const std::function<double(double)>& f) {
        double cap = 2.0;
        while (f(cap) <= target && cap < 1e6) cap *= 2.0;
        return cap;
    };
    auto by_attn = [&](double h) { return unmasked(scale_multipliers(narrow, h, 1.0)); };
    const double h = bisect_below(by_attn, target, smallest, grow_limit(by_attn));
    ModelConfig best = scale_multipliers(narrow, h, 1.0);
    if (close(unmasked(best))) return best;

    auto by_ffn = [&](double f) { return unmasked(scale_multipliers(narrow, h, f)); };
    const double f = bisect_below(by_ffn, target, 1.0, grow_limit(by_ffn));
    best = scale_multipliers(narrow, h, f);
    if (close(unmasked(best))) return best;
    throw ConfigError("isoflops: width rounding cannot reach within " + std::to_string(tolerance * 100) +
                      "% of the target");
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

} // namespace

std::string format_cost_table(const CostReport& r) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "params %lld (active %.0f, mixer %lld, backbone %lld)\n",
                  static_cast<long long>(r.params.total), r.params.active, static_cast<long long>(r.params.mixer),
                  static_cast<long long>(r.params.backbone));
    out << line;
    int name_width = 12;
    for (const PhaseCost& p : r.phases) name_width = std::max(name_width, static_cast<int>(p.name.size()));
    std::snprintf(line, sizeof line, "%-*s %6s %6s %6s %9s %6s %9s %12s %9s %10s\n", name_width, "phase", "res", "latent",
                  "ratio", "steps", "batch", "kept/S", "flops", "days", "dollars");
    out << line;
    for (const PhaseCost& p : r.phases) {
        const std::string kept = std::to_string(p.kept) + "/" + std::to_string(p.patches);
        std::snprintf(line, sizeof line, "%-*s %6lld %6lld %6.3f %9lld %6lld %9s %12.4g %9.3g %10.2f\n",
                      name_width, p.name.c_str(), static_cast<long long>(p.resolution), static_cast<long long>(p.latent_size),
                      p.mask_ratio, static_cast<long long>(p.steps), static_cast<long long>(p.batch), kept.c_str(),
                      p.total_flops, p.days, p.dollars);
        out << line;
    }
    std::snprintf(line, sizeof line, "%-*s %6s %6s %6s %9s %6s %9s %12.4g %9.3g %10.2f\n", name_width, "total", "", "", "", "",
                  "", "", r.total_flops, r.days, r.dollars);
    out << line;
    out << "assumes " << fmt("%.4g", r.assumptions.throughput) << " FLOP/s at $"
        << fmt("%.2f", r.assumptions.dollars_per_hour) << "/hour; backward counted as 2x forward\n";
    return out.str();
}

std::string format_cost_csv(const CostReport& r) {
    std::ostringstream out;
    out << "phase,resolution,latent_size,mask_ratio,steps,batch,kept,patches,forward_per_sample,step_flops,"
           "total_flops,days,dollars\n";
    auto row = [&](const std::string& name, const PhaseCost& p) {
        out << name << ',' << p.resolution << ',' << p.latent_size << ',' << fmt("%.17g", p.mask_ratio) << ','
            << p.steps << ',' << p.batch << ',' << p.kept << ',' << p.patches << ','
            << fmt("%.17g", p.forward_per_sample) << ',' << fmt("%.17g", p.step_flops) << ','
            << fmt("%.17g", p.total_flops) << ',' << fmt("%.17g", p.days) << ',' << fmt("%.17g", p.dollars) << '\n';
    };
    for (const PhaseCost& p : r.phases) row(p.name, p);
    PhaseCost total;
    total.total_flops = r.total_flops;
    total.days = r.days;
    total.dollars = r.dollars;
    out << "total,,,,,,,,,," << fmt("%.17g", r.total_flops) << ',' << fmt("%.17g", r.days) << ','
        << fmt("%.17g", r.dollars) << '\n';
    return out.str();
}

} // namespace ddit
