// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: INI-style files with [section] blocks and repeated
// [[phase]] blocks, typed key registry, --section.key=value overrides.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddit/eval.hpp"
#include "ddit/sampler.hpp"
#include "ddit/trainer.hpp"

namespace ddit {

struct EvalConfig {
    int64_t samples = 500;
    int64_t feature_dim = 64;
    uint64_t feature_seed = FeatureExtractor::default_seed;
    uint64_t sample_seed = 99;
    bool use_ema = true;
    // Guidance strength for eval sampling; negative means use [sampler] guidance.
    double guidance = -1.0;
    // Fraction of each class held out as the reference set.
    double holdout = 0.1;

    void validate() const;
};

struct RunConfig {
    TrainConfig train;
    SamplerConfig sampler;
    ToySpec data;
    // Directory with manifest.json; empty means generate from [data] in memory.
    std::string data_dir;
    EvalConfig eval;

    void validate() const;
};

// Defaults: desk-scale model and a two-phase plan (masked, then unmasked).
RunConfig default_run_config();

// Applies one "section.key" (or "phase.<i>.key") assignment. Unknown keys throw ConfigError naming them.
void set_config_value(RunConfig& config, const std::string& path, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& path);
// Every non-phase key path, in registry order.
std::vector<std::string> config_keys();

// Parses INI text on top of `base`. A [[phase]] block starts a new phase;
// the first one discards the plan inherited from `base`.
RunConfig parse_config(const std::string& text, RunConfig base = default_run_config(),
                       const std::string& source = "<string>");
RunConfig load_config(const std::filesystem::path& path, RunConfig base = default_run_config());
// Fully resolved INI text; parse_config(render_config(c)) reproduces c.
std::string render_config(const RunConfig& config);

// Presets shipped in presets/<name>.cfg (directory overridable by DDIT_PRESET_DIR).
std::filesystem::path preset_path(const std::string& name);
RunConfig load_preset(const std::string& name);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

} // namespace ddit
