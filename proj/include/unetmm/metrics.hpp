#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unetmm/tensor.hpp"

namespace unetmm {

/// 10*log10(max_val^2 / MSE) in dB; +infinity when the inputs are identical.
double psnr(const Tensor& pred, const Tensor& target, double max_val = 1.0);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    /// Dynamic range L; stabilizers are (0.01 L)^2 and (0.03 L)^2.
    double data_range = 1.0;
};

/// Mean local SSIM over every valid window position, channel and batch item,
/// clamped to [0, 1]. Planes smaller than the window use the largest odd
/// window that fits.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});

/// Min-max normalizes each channel (over batch and space) to [0, 1], takes
/// SSIM per channel, and averages over channels.
double feature_similarity(const Tensor& encoder, const Tensor& generated);

struct RepresentativeAbility {
    double mean = 0.0;
    /// Population variance of the pairwise distances; the RA scalar.
    double variance = 0.0;
    /// Channels with zero norm; their pairs were scored as distance 1.
    std::vector<std::int64_t> zero_norm_channels;
};

/// Pairwise cosine distances 1 - cos(ch_i, ch_j), i < j, with every channel
/// flattened over batch and space.
RepresentativeAbility representative_ability(const Tensor& features);

struct FeatureDiagnostics {
    int stage = 0;
    double ssim_to_encoder = 0.0;
    double ra_mean = 0.0;
    double ra_variance = 0.0;
};

/// One row per stage comparing encoder maps with the generated ones; the RA
/// columns describe the generated maps.
std::vector<FeatureDiagnostics> diagnose_stages(const std::vector<Tensor>& encoder,
                                                const std::vector<Tensor>& generated);

/// CSV with header `stage,ssim,ra_mean,ra_variance`.
std::string diagnostics_csv(const std::vector<FeatureDiagnostics>& rows);
std::vector<FeatureDiagnostics> parse_diagnostics_csv(const std::string& text);

}  // namespace unetmm
