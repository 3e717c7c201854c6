// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ccm/data_pipeline.hpp"
#include "ccm/encoders.hpp"
#include "ccm/generator.hpp"

namespace ccm {

enum class ScheduleKind { linear, scaled_linear };

std::string schedule_kind_name(ScheduleKind k);
ScheduleKind schedule_kind_from_name(const std::string& s);

struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::scaled_linear;
    std::vector<double> betas;
    std::vector<double> alphas_cumprod;

    static NoiseSchedule make(ScheduleKind kind, int T, double beta_start, double beta_end);
    // alpha_bar(-1) == 1 by convention (the fully denoised endpoint).
    double alpha_bar(int t) const;
};

struct SamplerConfig {
    int ddim_steps = 50;
    double guidance_scale = 5.0;
    double eta = 0.0;
    void validate(int T) const;
};

// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);
// eps_uncond + s (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s);
// One deterministic (eta = 0) or stochastic DDIM update from t to t_prev.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& sched,
                 double eta = 0.0, Rng* noise_rng = nullptr);
// Recovers the x0 prediction used inside ddim_step.
Tensor ddim_pred_x0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched);

struct ModelConfig {
    EncoderConfig enc;
    GeneratorConfig gen;
    ScheduleKind sched_kind = ScheduleKind::scaled_linear;
    int T = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    std::uint64_t init_seed = 0;
    void validate() const;
};

// The full composition model: latent autoencoder, foreground encoder,
// controllable U-Net, and the shared parameter store.
class CompositionModel {
public:
    explicit CompositionModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const Autoencoder& ae() const { return *ae_; }
    const ForegroundEncoder& fg() const { return *fg_; }
    ForegroundEncoder& fg() { return *fg_; }
    const UNet& unet() const { return *unet_; }
    const NoiseSchedule& schedule() const { return sched_; }

    std::int64_t trained_steps = 0;

    void save(const std::string& path) const;
    static std::unique_ptr<CompositionModel> load(const std::string& path);

    // Predicate over parameter storage for Tape trainable filters.
    std::function<bool(const Tensor*)> prefix_filter(const std::vector<std::string>& prefixes) const;

private:
    ModelConfig cfg_;
    ParamStore ps_;
    std::unique_ptr<Autoencoder> ae_;
    std::unique_ptr<ForegroundEncoder> fg_;
    std::unique_ptr<UNet> unet_;
    NoiseSchedule sched_;
};

struct LossGraph {
    Var loss;
    bool used_null = false;
    int t = 0;
};

// Builds the training objective graph for one tuple: MSE between eps and
// the U-Net prediction on the assembled input, with the foreground
// encoder in-graph. The autoencoder runs frozen.
LossGraph build_loss_graph(Tape& tape, const CompositionModel& model, const TrainingTuple& tuple, int tstep,
                           const Tensor& eps, bool use_null_global);

// Value-only objective; draws the classifier-free substitution from rng.
double loss_g(const CompositionModel& model, const TrainingTuple& tuple, int tstep, const Tensor& eps, Rng& rng);

struct TrainOptions {
    int epochs = 2000;
    double lr = 1e-4;
    int batch = 8;
    std::uint64_t seed = 0;
    int threads = 1;
    double divergence_threshold = 1e3;
    // Called once per processed sample: (step, loss, indicator).
    std::function<void(std::int64_t, double, Indicator)> on_sample;
};

struct TrainResult {
    std::vector<double> epoch_losses;
    std::int64_t steps = 0;
};

// Adam training of the generator objective with indicator-balanced
// batches. The autoencoder stays frozen; the foreground encoder trains
// unless the config says otherwise.
TrainResult train(CompositionModel& model, const std::vector<TrainingTuple>& dataset, const TrainOptions& opts);

// Reconstruction pretraining for the autoencoder on [0,1] images.
TrainResult pretrain_autoencoder(CompositionModel& model, const std::vector<Tensor>& images01, int steps, double lr,
                                 std::uint64_t seed, int threads = 1);

// Full sampling path: fills the box of the background, encodes it and
// the foreground, then runs CFG-guided DDIM from seed-derived noise and
// decodes. Inputs/outputs are [-1,1] images.
Tensor sample(const CompositionModel& model, const Tensor& background, const Tensor& foreground,
              const BoundingBox& box, Indicator indicator, const SamplerConfig& sampler, std::uint64_t seed);

// Initial-noise digest so callers can verify shared-noise protocols.
std::uint64_t initial_noise_hash(const CompositionModel& model, std::uint64_t seed);

} // namespace ccm
