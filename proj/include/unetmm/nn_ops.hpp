#pragma once

#include <cstdint>

#include "unetmm/tensor.hpp"

namespace unetmm {

/// Weight is (out_c, in_c/groups, k, k); bias, when defined, holds out_c values.
struct Conv2dParams {
    Tensor weight;
    Tensor bias;
    int stride = 1;
    int padding = 0;
    int groups = 1;

    std::int64_t out_channels() const { return weight.shape().n; }
    std::int64_t kernel() const { return weight.shape().h; }
};

/// gamma/beta hold c values each.
struct NormParams {
    Tensor gamma;
    Tensor beta;
    float epsilon = 1e-6f;
};

struct GrnParams {
    Tensor gamma;
    Tensor beta;
    float epsilon = 1e-6f;
};

struct SeparableConvParams {
    Conv2dParams depthwise;
    Conv2dParams pointwise;
};

/// 7x7 depthwise, channel norm, expand, GELU, GRN, project back, residual add.
struct ConvNeXtV2Params {
    Conv2dParams depthwise;
    NormParams norm;
    Conv2dParams expand;
    GrnParams grn;
    Conv2dParams project;
};

Tensor conv2d(const Tensor& x, const Conv2dParams& p);
Tensor pointwise_conv(const Tensor& x, const Conv2dParams& p);
Tensor depthwise_conv(const Tensor& x, const Conv2dParams& p);
Tensor separable_conv(const Tensor& x, const SeparableConvParams& p);

/// out[b][c*r*r + dy*r + dx][y][x] = in[b][c][y*r + dy][x*r + dx]
Tensor pixel_unshuffle(const Tensor& x, int r);
/// Exact inverse of pixel_unshuffle.
Tensor pixel_shuffle(const Tensor& x, int r);

/// Normalizes across channels at every spatial position, then scales and shifts.
Tensor layer_norm_channelwise(const Tensor& x, const NormParams& p);

// Global response normalization:
//   G_c = ||x_c||_2 over (h, w),  N_c = G_c / (mean_c G + eps),
//   y_c = gamma_c * x_c * N_c + beta_c + x_c
// computed independently for every batch item.
Tensor grn(const Tensor& x, const GrnParams& p);

/// Exact form 0.5 * x * (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& x);

Tensor convnext_v2_block(const Tensor& x, const ConvNeXtV2Params& p);

/// Counts multiply-accumulates issued by conv2d on this thread while alive.
/// Every output element adds (in_c / groups) * k * k.
class MacCounter {
public:
    MacCounter();
    ~MacCounter();
    MacCounter(const MacCounter&) = delete;
    MacCounter& operator=(const MacCounter&) = delete;

    std::int64_t count() const { return count_; }
    void add(std::int64_t macs) { count_ += macs; }
    static MacCounter* active();

private:
    std::int64_t count_ = 0;
    MacCounter* previous_;
};

}  // namespace unetmm
