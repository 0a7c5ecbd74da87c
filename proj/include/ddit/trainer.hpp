// SPDX-License-Identifier: Apache-2.0
//
// Training plan, AdamW with parameter-group learning rates, schedules, EMA,
// gradient clipping and the phase-by-phase training driver.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ddit/data.hpp"
#include "ddit/masking.hpp"

namespace ddit {

enum class Schedule { constant, cosine, cyclic };

const char* schedule_name(Schedule s);
Schedule parse_schedule(const std::string& s);

struct PhaseConfig {
    std::string name = "phase";
    double mask_ratio = 0.75;
    int64_t steps = 1000;
    int64_t batch = 16;
    double lr = 2.4e-4;
    Schedule schedule = Schedule::cosine;
    int64_t warmup = 0;
    // Cyclic cosine: first cycle length and growth factor of each next cycle.
    int64_t cycle_steps = 0;
    double cycle_mult = 2.0;
    double weight_decay = 0.1;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip = 0.25;
    // 0 disables EMA for the phase.
    double ema = 0.0;
    double caption_dropout = 0.1;
    double p_mean = -0.6, p_std = 1.2;
    // Latent side length used by the cost ledger; 0 means the model's own.
    int64_t latent_size = 0;

    void validate() const;
};

struct TrainPlan {
    std::vector<PhaseConfig> phases;

    void validate() const;
    int64_t total_steps() const;
};

// Two-phase large-scale plan with the published per-phase hyperparameters:
// 256px masked/unmasked then 512px masked/unmasked.
TrainPlan reference_plan();

// Learning rate at a 0-based step within the phase.
double lr_at(const PhaseConfig& phase, int64_t step);

// Global L2 norm over all parameter gradients (missing gradients count as zero).
double grad_norm(const ParamStore& store);
bool grads_finite(const ParamStore& store);
// Scales all gradients by max_norm / norm when norm > max_norm; returns the scale.
double clip_grad_norm(ParamStore& store, double max_norm);

struct AdamWHyper {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Decoupled weight decay Adam. Each parameter's step uses lr * lr_scale, and
// decay only touches parameters flagged for it.
class AdamW {
public:
    explicit AdamW(const ParamStore& store);

    // Returns false (and counts a skip) when any gradient is non-finite.
    bool step(ParamStore& store, const AdamWHyper& h);

    int64_t steps() const { return steps_; }
    int64_t skipped() const { return skipped_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void restore(int64_t steps, int64_t skipped) { steps_ = steps, skipped_ = skipped; }

private:
    std::vector<Tensor> m_, v_;
    int64_t steps_ = 0, skipped_ = 0;
};

// ema <- coeff * ema + (1 - coeff) * value
void ema_update(Tensor& ema, const Tensor& value, double coeff);

class Ema {
public:
    bool active() const { return !shadow_.empty(); }
    void start(const ParamStore& store);
    void update(const ParamStore& store, double coeff);
    std::vector<Tensor>& shadow() { return shadow_; }
    const std::vector<Tensor>& shadow() const { return shadow_; }

private:
    std::vector<Tensor> shadow_;
};

struct TrainConfig {
    ModelConfig model;
    NoiseSpec noise;
    MaskConfig mask;
    TrainPlan plan;
    uint64_t seed = 0;
    uint64_t data_seed = 0;
    bool deterministic = false;
    // 0: checkpoints only at phase boundaries.
    int64_t checkpoint_every = 0;
    DType dtype = DType::f32;

    void validate() const;
};

struct StepMetrics {
    int64_t step = 0;  // 1-based global step
    int phase = 0;
    double loss = 0.0;
    double diff = 0.0, mae = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    int64_t kept_patches = 0;
    bool ema_active = false;
    bool skipped = false;
};

std::string metrics_header();
std::string metrics_row(const StepMetrics& m);

// Per-sample caption-drop flags drawn with probability p.
std::vector<uint8_t> draw_caption_drop(int64_t batch, double p, Rng& rng);

class Trainer {
public:
    Trainer(TrainConfig config, const Dataset& data, std::filesystem::path run_dir);

    // One optimization step at a 0-based global step index.
    StepMetrics train_step(int64_t global_step);

    // Runs the remaining plan from the current step. Stops early after
    // `stop_after` global steps when positive (writing a checkpoint there).
    void run(int64_t stop_after = 0);

    // Loads the newest checkpoint in the run directory, if any; returns whether one was found.
    bool resume();

    std::filesystem::path save_checkpoint() const;
    void load_checkpoint(const std::filesystem::path& manifest);

    int64_t global_step() const { return step_; }
    DenoiserNet& net() { return net_; }
    const Ema& ema() const { return ema_; }
    const CaptionStub& captions() const { return stub_; }
    const TrainConfig& config() const { return config_; }
    std::filesystem::path metrics_path() const { return run_dir_ / "metrics.csv"; }

private:
    std::pair<int, int64_t> locate(int64_t global_step) const;

    TrainConfig config_;
    const Dataset& data_;
    std::filesystem::path run_dir_;
    DenoiserNet net_;
    CaptionStub stub_;
    AdamW opt_;
    Ema ema_;
    int64_t step_ = 0;
};

// Copies weights from a checkpoint into a net; with prefer_ema the EMA
// shadow is used when present. Returns true when EMA weights were loaded.
bool load_weights(DenoiserNet& net, const std::filesystem::path& checkpoint, bool prefer_ema = true);
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

} // namespace ddit
