#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "unetmm/model.hpp"

namespace unetmm {

struct TrainConfig {
    int iterations = 200;
    int batch_size = 4;
    double lr_init = 1e-3;
    double lr_min = 1e-7;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.9;
    double adam_epsilon = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    double noise_sigma = 0.1;
    std::int64_t patch_size = 16;
    int val_every = 50;
    int val_count = 16;
    std::uint64_t val_seed = 20240601;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct SynthPair {
    Tensor noisy;
    Tensor clean;
};

/// Smooth procedural images in [0, 1]: a linear ramp plus random Gaussian
/// bumps per channel, rescaled into [0.05, 0.95].
Tensor synth_clean(std::mt19937_64& rng, const Shape& shape);
/// clean + N(0, sigma^2), optionally clamped to [0, 1].
Tensor add_noise(const Tensor& clean, double sigma, std::mt19937_64& rng, bool clamp = true);
SynthPair synth_pair(std::mt19937_64& rng, const Shape& shape, double sigma);

/// Fixed validation pairs derived from tcfg.val_seed.
std::vector<SynthPair> validation_set(const TrainConfig& tcfg, std::int64_t channels);

/// Differentiable -PSNR: 10*log10(MSE + epsilon) - 20*log10(max_val).
Tensor psnr_loss(const Tensor& pred, const Tensor& target, double max_val = 1.0, double epsilon = 1e-8);

/// lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2
double cosine_lr(std::int64_t step, std::int64_t total, double lr_init, double lr_min);

/// Bias-corrected Adam with optional L2 weight decay folded into the gradient.
class Adam {
public:
    Adam(const ParamStore& params, double beta1, double beta2, double epsilon, double weight_decay = 0.0);

    /// Throws ContractError if any parameter has no gradient buffer.
    void step(double lr);
    std::int64_t steps() const { return steps_; }
    std::span<const float> first_moment(std::size_t i) const { return m_.at(i); }
    std::span<const float> second_moment(std::size_t i) const { return v_.at(i); }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    double beta1_, beta2_, epsilon_, weight_decay_;
    std::int64_t steps_ = 0;
};

struct TrainState {
    std::int64_t step = 0;
    std::unique_ptr<UNet> model;
    std::unique_ptr<Adam> optimizer;
    std::mt19937_64 rng;
};

struct HistoryRow {
    std::int64_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_psnr = 0.0;

    friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

/// CSV with header `step,lr,train_loss,val_psnr`.
std::string history_csv(const std::vector<HistoryRow>& rows);
std::vector<HistoryRow> parse_history_csv(const std::string& text);

struct EvalReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double baseline_psnr = 0.0;  // noisy input against clean
    double baseline_ssim = 0.0;
};

/// Mean per-image PSNR/SSIM of the model's restorations over `pairs`.
EvalReport evaluate(const UNet& model, const std::vector<SynthPair>& pairs);

struct TrainResult {
    TrainState state;
    std::vector<HistoryRow> history;
};

/// Optional per-step hook, called after each optimizer update.
using StepCallback = std::function<void(const TrainState&, const HistoryRow* validation)>;

/// Trains on synthetic denoising pairs. Validation runs every val_every steps
/// and after the last step. Throws NumericError on a non-finite loss.
TrainResult train(const ModelConfig& cfg, const TrainConfig& tcfg, const StepCallback& on_step = {});

/// Writes `<name>.tnsr` per parameter plus `manifest.csv` (`name,n,c,h,w`).
void save_checkpoint(const std::filesystem::path& dir, const ParamStore& params);

class CheckpointMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

/// Loads values into `params`. Throws CheckpointMismatch listing expected vs
/// found entries when names or shapes disagree, FormatError on bad files.
void load_checkpoint(const std::filesystem::path& dir, ParamStore& params);

}  // namespace unetmm
