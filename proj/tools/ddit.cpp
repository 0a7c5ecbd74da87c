// SPDX-License-Identifier: Apache-2.0
//
// ddit: make-data, train, sample, eval, flops and grad-check.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "ddit/blob.hpp"
#include "ddit/config.hpp"
#include "ddit/cost.hpp"
#include "ddit/errors.hpp"
#include "ddit/evaluate.hpp"
#include "ddit/grad_check.hpp"
#include "ddit/kernels.hpp"
#include "ddit/trainer.hpp"

namespace fs = std::filesystem;
using namespace ddit;

namespace {

enum Exit { ok = 0, generic = 1, config_error = 2, missing_file = 3, shape_error = 4, format_error = 5 };

// Published total for the large plan; the reference preset is compared against it.
constexpr double published_total_flops = 3.45e20;

struct Common {
    std::string config_file, preset;
    bool deterministic = false;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_file, "INI config file");
    app->add_option("--preset", c.preset, "Preset name (tiny, reference)");
    app->add_flag("--deterministic", c.deterministic, "Fixed reduction order in every kernel");
    app->allow_extras();
    app->footer("Any config key can be overridden with --section.key=value (e.g. --model.width=64, --phase.0.lr=1e-4).");
}

// Extras left by CLI11 are --section.key=value (or --section.key value) overrides.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
    std::vector<std::pair<std::string, std::string>> out;
    for (size_t i = 0; i < extras.size(); ++i) {
        const std::string& a = extras[i];
        if (a.rfind("--", 0) != 0 || a.size() < 3) throw ConfigError("unexpected argument '" + a + "'");
        const std::string body = a.substr(2);
        const auto eq = body.find('=');
        if (eq != std::string::npos) {
            out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
        } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
            out.emplace_back(body, extras[++i]);
        } else {
            throw ConfigError("config key '" + body + "' needs a value (--" + body + "=<value>)");
        }
    }
    return out;
}

RunConfig resolve(const Common& c, const std::vector<std::string>& extras, std::optional<RunConfig> base = {}) {
    RunConfig rc = base ? *base : default_run_config();
    if (!c.preset.empty()) rc = load_preset(c.preset);
    if (!c.config_file.empty()) rc = load_config(c.config_file, rc);
    for (const auto& [key, value] : parse_overrides(extras)) set_config_value(rc, key, value);
    if (c.deterministic) rc.train.deterministic = true;
    rc.validate();
    kernels::set_deterministic(rc.train.deterministic);
    return rc;
}

fs::path run_path(const std::string& name) {
    const fs::path p(name);
    if (p.is_absolute()) return p;
    const char* root = std::getenv("DDIT_RUNS_ROOT");
    return root && *root ? fs::path(root) / p : p;
}

Dataset load_data(const RunConfig& rc) {
    if (rc.data_dir.empty()) return gen_toy_dataset(rc.data);
    fs::path p(rc.data_dir);
    if (fs::is_directory(p)) p /= "manifest.json";
    return load_dataset(p);
}

// Train records and the held-out reference set used by eval.
std::pair<Dataset, Dataset> split_data(const RunConfig& rc) {
    return split_holdout(load_data(rc), rc.eval.holdout, rc.data.seed);
}

RunConfig run_config_of(const fs::path& run_dir) {
    const fs::path cfg = run_dir / "config.cfg";
    if (!fs::exists(cfg)) throw MissingFileError("run directory has no config.cfg: " + run_dir.string());
    return load_config(cfg);
}

std::vector<int32_t> parse_ids(const std::string& list) {
    std::vector<int32_t> ids;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            ids.push_back(static_cast<int32_t>(std::stoi(item, &used)));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("invalid class id '" + item + "' in --classes");
        }
    }
    return ids;
}

int cmd_make_data(const Common& common, const std::vector<std::string>& extras, const std::string& out,
                  int64_t shard_records) {
    const RunConfig rc = resolve(common, extras);
    const Dataset d = gen_toy_dataset(rc.data);
    const fs::path manifest = write_dataset(out, d, rc.data, shard_records);
    std::cout << "wrote " << d.size() << " records to " << manifest.string() << "\n";
    return ok;
}

int cmd_train(const Common& common, const std::vector<std::string>& extras, const std::string& run, bool resume,
              int64_t stop_after) {
    const fs::path dir = run_path(run);
    const RunConfig rc = resolve(common, extras);
    if (!resume && fs::exists(dir / "checkpoints"))
        throw std::runtime_error("run directory " + dir.string() + " already has checkpoints (use --resume)");
    if (resume && fs::exists(dir / "config.cfg") && render_config(run_config_of(dir)) != render_config(rc))
        throw ConfigError("resolved config differs from " + (dir / "config.cfg").string());
    fs::create_directories(dir);
    std::ofstream(dir / "config.cfg") << render_config(rc);

    const auto [train, reference] = split_data(rc);
    Trainer t(rc.train, train, dir);
    if (resume && t.resume()) std::cout << "resumed at step " << t.global_step() << "\n";
    t.run(stop_after);
    std::cout << "trained to step " << t.global_step() << " of " << rc.train.plan.total_steps() << "; metrics in "
              << t.metrics_path().string() << "\n";
    return ok;
}

struct Loaded {
    RunConfig rc;
    fs::path checkpoint;
    bool ema = false;
};

Loaded load_run(const Common& common, const std::vector<std::string>& extras, const fs::path& dir,
                const std::string& checkpoint, bool no_ema, DenoiserNet*& net, std::unique_ptr<DenoiserNet>& hold) {
    Loaded l;
    l.rc = resolve(common, extras, run_config_of(dir));
    l.checkpoint = checkpoint.empty() ? latest_checkpoint(dir) : fs::path(checkpoint);
    if (l.checkpoint.empty()) throw MissingFileError("no checkpoint in " + (dir / "checkpoints").string());
    if (!fs::exists(l.checkpoint)) throw MissingFileError("checkpoint not found: " + l.checkpoint.string());
    hold = std::make_unique<DenoiserNet>(l.rc.train.model, 0, l.rc.train.dtype);
    net = hold.get();
    l.ema = load_weights(*net, l.checkpoint, !no_ema && l.rc.eval.use_ema);
    return l;
}

int cmd_sample(const Common& common, const std::vector<std::string>& extras, const std::string& run,
               const std::string& checkpoint, const std::string& out, const std::string& classes, int64_t n,
               int64_t grid_batch, uint64_t seed, bool no_ema) {
    const fs::path dir = run_path(run);
    DenoiserNet* net = nullptr;
    std::unique_ptr<DenoiserNet> hold;
    const Loaded l = load_run(common, extras, dir, checkpoint, no_ema, net, hold);
    const std::vector<int32_t> labels = classes.empty() ? balanced_labels(n, l.rc.data.num_classes) : parse_ids(classes);
    for (int32_t id : labels)
        if (id < 0 || id >= l.rc.data.num_classes) throw ConfigError("class id " + std::to_string(id) + " out of range");
    const CaptionStub stub(l.rc.train.model.caption_length, l.rc.train.model.caption_dim);
    const Tensor x = generate(*net, stub, labels, l.rc.sampler, seed, grid_batch);

    const fs::path out_dir = out.empty() ? dir / "samples" : fs::path(out);
    fs::create_directories(out_dir);
    nlohmann::json meta = {{"labels", labels},
                           {"checkpoint", l.checkpoint.string()},
                           {"ema", l.ema},
                           {"seed", seed},
                           {"steps", l.rc.sampler.steps},
                           {"guidance", l.rc.sampler.guidance},
                           {"mode", sampler_mode_name(l.rc.sampler.mode)}};
    save_tensors(out_dir / "samples.json", {{"latents", x}}, meta);
    const int64_t total = x.dim(0);
    for (int64_t b = 0, i = 0; b < total; b += grid_batch, ++i) {
        Index idx;
        for (int64_t j = b; j < std::min(total, b + grid_batch); ++j) idx.push_back(j);
        char name[32];
        std::snprintf(name, sizeof name, "grid-%03lld.png", static_cast<long long>(i));
        write_png_grid(out_dir / name, gather_rows(x, idx), 8, 4, l.rc.data.value_scale);
    }
    std::cout << "wrote " << total << " samples to " << (out_dir / "samples.json").string() << "\n";
    return ok;
}

int cmd_eval(const Common& common, const std::vector<std::string>& extras, const std::string& run,
             const std::string& samples, const std::string& checkpoint, const std::string& csv_path, bool no_ema) {
    Tensor x;
    std::vector<int32_t> labels;
    RunConfig rc;
    std::string source;
    const fs::path dir = run.empty() ? fs::path() : run_path(run);
    if (!samples.empty()) {
        rc = run.empty() ? resolve(common, extras) : resolve(common, extras, run_config_of(dir));
        const TensorBundle b = load_tensors(samples);
        x = b.get("latents");
        labels = b.meta.at("labels").get<std::vector<int32_t>>();
        source = samples;
    } else {
        if (run.empty()) throw ConfigError("eval needs --samples or --run");
        DenoiserNet* net = nullptr;
        std::unique_ptr<DenoiserNet> hold;
        const Loaded l = load_run(common, extras, dir, checkpoint, no_ema, net, hold);
        rc = l.rc;
        SamplerConfig sc = rc.sampler;
        if (rc.eval.guidance > 0) sc.guidance = rc.eval.guidance;
        labels = balanced_labels(rc.eval.samples, rc.data.num_classes);
        const CaptionStub stub(rc.train.model.caption_length, rc.train.model.caption_dim);
        x = generate(*net, stub, labels, sc, rc.eval.sample_seed);
        source = l.checkpoint.string();
    }
    const auto [train, reference] = split_data(rc);
    const EvalResult r = score_samples(x, labels, reference, rc.data.num_classes, rc.eval.feature_dim, rc.eval.feature_seed);
    std::cout << "samples " << r.samples << "  desk_fid " << r.desk_fid << "  class_alignment " << r.alignment << "\n";

    fs::path csv = csv_path.empty() ? (dir.empty() ? fs::path("eval.csv") : dir / "eval.csv") : fs::path(csv_path);
    const bool fresh = !fs::exists(csv);
    std::ofstream os(csv, std::ios::app);
    if (!os) throw std::runtime_error("cannot write " + csv.string());
    if (fresh) os << "source,samples,desk_fid,class_alignment\n";
    char line[64];
    std::snprintf(line, sizeof line, ",%lld,%.6f,%.6f\n", static_cast<long long>(r.samples), r.desk_fid, r.alignment);
    os << source << line;
    return ok;
}

int cmd_flops(const Common& common, const std::vector<std::string>& extras, const std::string& csv_path) {
    const RunConfig rc = resolve(common, extras);
    const CostReport r = plan_flops(rc.train.model, rc.train.mask.pipeline, rc.train.plan);
    std::cout << format_cost_table(r) << "\n";
    const std::string csv = format_cost_csv(r);
    if (csv_path.empty()) std::cout << csv;
    else std::ofstream(csv_path) << csv;
    if (common.preset == "reference") {
        const double ratio = r.total_flops / published_total_flops;
        std::printf("\nadvisory: reconstructed reference plan totals %.3g FLOPs, %.2fx the published %.3g (%s the 1.5x band)\n",
                    r.total_flops, ratio, published_total_flops, ratio <= 1.5 && ratio >= 1.0 / 1.5 ? "within" : "outside");
    }
    return ok;
}

int cmd_grad_check(uint64_t seed, double tolerance) {
    const GradCheckReport r = grad_check_all(seed, tolerance);
    for (const KernelCheck& k : r.kernels)
        std::printf("%-20s max_rel_error %.3e  %s\n", k.kernel.c_str(), k.max_rel_error, k.passed ? "ok" : "FAIL");
    std::printf("%zu kernels, %zu failed (tolerance %.1e)\n", r.kernels.size(), r.failures().size(), r.tolerance);
    return r.all_passed() ? ok : generic;
}

std::string one_line(std::string s) {
    for (char& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

int fail(int code, const char* kind, const std::exception& e) {
    std::fprintf(stderr, "error: %s: %s\n", kind, one_line(e.what()).c_str());
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked diffusion transformer toolkit"};
    app.require_subcommand(1);
    Common common;

    auto* make_data = app.add_subcommand("make-data", "Generate the toy latent dataset as shards");
    std::string data_out;
    int64_t shard_records = 1000;
    add_common(make_data, common);
    make_data->add_option("--out", data_out, "Output directory")->required();
    make_data->add_option("--shard-records", shard_records, "Records per shard")->check(CLI::PositiveNumber);

    auto* train = app.add_subcommand("train", "Train a model through the configured phases");
    std::string run = "default";
    bool resume = false;
    int64_t stop_after = 0;
    add_common(train, common);
    train->add_option("--run", run, "Run directory (relative paths resolve under $DDIT_RUNS_ROOT)");
    train->add_flag("--resume", resume, "Continue from the newest checkpoint");
    train->add_option("--stop-after", stop_after, "Stop (with a checkpoint) after this global step");

    auto* sample = app.add_subcommand("sample", "Sample latents from a trained run");
    std::string checkpoint, sample_out, classes;
    int64_t n = 64, grid_batch = 64;
    uint64_t seed = 0;
    bool no_ema = false;
    add_common(sample, common);
    sample->add_option("--run", run, "Run directory")->required();
    sample->add_option("--checkpoint", checkpoint, "Checkpoint manifest (default: newest)");
    sample->add_option("--out", sample_out, "Output directory (default: <run>/samples)");
    sample->add_option("--classes", classes, "Comma-separated class ids to condition on");
    sample->add_option("-n,--count", n, "Number of class-balanced samples when --classes is absent")->check(CLI::PositiveNumber);
    sample->add_option("--batch", grid_batch, "Samples per PNG grid")->check(CLI::PositiveNumber);
    sample->add_option("--seed", seed, "Noise seed");
    sample->add_flag("--no-ema", no_ema, "Use raw weights even when an EMA shadow exists");

    auto* eval = app.add_subcommand("eval", "Desk-FID and class alignment of samples");
    std::string eval_run, samples_path, csv_path;
    add_common(eval, common);
    eval->add_option("--run", eval_run, "Run directory (config source; samples are generated when --samples is absent)");
    eval->add_option("--samples", samples_path, "Sample blob manifest written by sample");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint manifest (default: newest)");
    eval->add_option("--csv", csv_path, "Metrics CSV to append to (default: <run>/eval.csv)");
    eval->add_flag("--no-ema", no_ema, "Use raw weights even when an EMA shadow exists");

    auto* flops = app.add_subcommand("flops", "Training FLOP, time and cost ledger of the configured plan");
    std::string flops_csv;
    add_common(flops, common);
    flops->add_option("--csv", flops_csv, "Write the CSV table here instead of stdout");

    auto* grad_check = app.add_subcommand("grad-check", "Finite-difference check of every kernel adjoint");
    uint64_t gc_seed = 1;
    double tolerance = 1e-4;
    grad_check->add_option("--seed", gc_seed);
    grad_check->add_option("--tolerance", tolerance);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::fprintf(stderr, "error: usage: %s\n", one_line(e.what()).c_str());
        return config_error;
    }

    try {
        if (*make_data) return cmd_make_data(common, make_data->remaining(), data_out, shard_records);
        if (*train) return cmd_train(common, train->remaining(), run, resume, stop_after);
        if (*sample)
            return cmd_sample(common, sample->remaining(), run, checkpoint, sample_out, classes, n, grid_batch, seed, no_ema);
        if (*eval) return cmd_eval(common, eval->remaining(), eval_run, samples_path, checkpoint, csv_path, no_ema);
        if (*flops) return cmd_flops(common, flops->remaining(), flops_csv);
        if (*grad_check) return cmd_grad_check(gc_seed, tolerance);
    } catch (const ConfigError& e) {
        return fail(config_error, "config", e);
    } catch (const MissingFileError& e) {
        return fail(missing_file, "missing-file", e);
    } catch (const ShapeError& e) {
        return fail(shape_error, "shape", e);
    } catch (const FormatError& e) {
        return fail(format_error, "format", e);
    } catch (const std::exception& e) {
        return fail(generic, "runtime", e);
    }
    return generic;
}
