#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "data/datapipe.hpp"
#include "dit/dit.hpp"
#include "rae/rae.hpp"

namespace l3d::train {

using ad::Mat;

struct TrainConfig {
    double peak_lr = 2e-4;
    double floor_lr = 0.0;
    std::int64_t warmup = 8000;
    std::int64_t total = 20000;
    double beta1 = 0.9, beta2 = 0.95;
    double grad_clip = 1.0;
    double weight_decay = 0.0;
    std::int64_t disc_start = 50000;
    std::int64_t adv_start = 60000;
    double cond_drop = 0.1;  // stage-1 label drop probability (CFG)
    double disc_lr_scale = 1.0;
    std::int64_t log_every = 100;
    std::uint64_t seed = 0;
    int calib_latents = 4096;  // latent rows used for calibration stats

    data::BudgetConfig budget;
    data::MaskPolicy rae_mask{0.1, 0.1, 0.6, 0.0};
    data::MaskPolicy dit_mask{1.0, 0.6, 0.9, 0.1};

    void validate() const;
    static TrainConfig from_config(const io::Config& cfg);
    void echo(io::Config& cfg) const;
};

// Linear warmup to the peak, cosine decay to the floor, clamped past total.
double lr_schedule(std::int64_t step, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoint plumbing (directory of tensor containers + meta.cfg)
// ---------------------------------------------------------------------------

void save_store(const std::filesystem::path& dir, const nn::ParamStore<float>& store);
nn::ParamStore<float> load_store(const std::filesystem::path& dir);

struct RaeState {
    rae::RAEModel<float> model;
    nn::ParamStore<float> disc;
    nn::AdamW opt, disc_opt;
    Rng rng;
    std::int64_t step = 0;
};

RaeState init_rae_state(const rae::RAEConfig& cfg, const TrainConfig& tc, std::uint64_t seed);
void save_rae_state(const std::filesystem::path& dir, const RaeState& state);
RaeState load_rae_state(const std::filesystem::path& dir);

struct DitState {
    dit::DiTModel<float> model;
    nn::ParamStore<float> ema;
    nn::AdamW opt;
    Rng rng;
    std::int64_t step = 0;
    data::Stage stage = data::Stage::DitStage1;
};

DitState init_dit_state(const dit::DiTConfig& cfg, const TrainConfig& tc, data::Stage stage,
                        std::uint64_t seed);
void save_dit_state(const std::filesystem::path& dir, const DitState& state);
DitState load_dit_state(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Shared forward helpers
// ---------------------------------------------------------------------------

// Encode one pose-normalized sample with its visibility pattern into latent
// tokens (layer-norm space, optionally pushed through the frozen calibration).
Mat<float> encode_latents(const rae::RAEModel<float>& model, const data::Sample& sample,
                          bool standardized);

// One-time latent calibration pass; fills model.calib_mu / calib_sigma.
void compute_calibration(rae::RAEModel<float>& model, const data::Dataset& dataset,
                         const TrainConfig& tc, std::uint64_t seed);

dit::ConditionTokens make_condition(const rae::RAEModel<float>& model, data::Sample sample,
                                    const std::vector<bool>& visibility,
                                    std::optional<int> label);

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct RaeStepStats {
    double total = 0, mse = 0, perceptual = 0, adversarial = 0, pointmap = 0;
    double disc_loss = 0, grad_norm = 0, lr = 0;
};

RaeStepStats rae_train_step(RaeState& state, const data::Dataset& dataset,
                            const TrainConfig& tc);

struct DitStepStats {
    double loss = 0, grad_norm = 0, lr = 0;
};

DitStepStats dit_train_step(DitState& state, const rae::RAEModel<float>& rae_model,
                            const data::Dataset& dataset, const TrainConfig& tc);

using LogSink = std::function<void(const std::string& line)>;

// Runs state.step -> tc.total, appending tab-separated metric rows to
// <out_dir>/metrics.tsv and saving the final checkpoint into out_dir.
void train_rae(const TrainConfig& tc, RaeState& state, const data::Dataset& dataset,
               const std::filesystem::path& out_dir, const LogSink& log = {});

// The autoencoder is frozen: its parameter norm is asserted unchanged.
void train_dit(const TrainConfig& tc, DitState& state, const rae::RAEModel<float>& rae_model,
               const data::Dataset& dataset, const std::filesystem::path& out_dir,
               const LogSink& log = {});

}  // namespace l3d::train
