#pragma once

#include <cstdint>
#include <vector>

#include "unetmm/layers.hpp"
#include "unetmm/memory.hpp"
#include "unetmm/model_config.hpp"

namespace unetmm {

/// Encoder outputs E_1..E_N; E_n has base_width*2^(n-1) channels at H/2^(n-1).
struct StageFeatures {
    std::vector<Tensor> features;

    const Tensor& stage(int n) const { return features.at(static_cast<std::size_t>(n - 1)); }
};

struct ForwardOptions {
    /// Receives skip-buffer retain/release events and stage boundaries.
    MemoryTrace* trace = nullptr;
    /// When set, keeps E_1..E_{N-1} and (for MsiamIem) IEM_1..IEM_{N-1}.
    bool capture_features = false;
};

struct ForwardResult {
    Tensor output;
    std::vector<Tensor> encoder;  // E_1..E_{N-1}, if captured
    std::vector<Tensor> iem;      // IEM_1..IEM_{N-1}, if captured
};

/// U-Net whose skip paths are full, masked, or replaced by MSIAM + IEM.
///
/// Parameters are created deterministically from `seed`; only the modules the
/// skip mode needs are instantiated.
class UNet {
public:
    UNet(ModelConfig cfg, std::uint64_t seed);

    UNet(const UNet&) = delete;
    UNet& operator=(const UNet&) = delete;
    UNet(UNet&&) = default;

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    StageFeatures encode(const Tensor& x) const;
    /// MSIAM over E_1..E_{N-1}: reduce, resize to the target level, concat, fuse.
    Tensor aggregate(const StageFeatures& feats) const;
    /// IEM for decoder stage n: resize E' to stage n, ConvNeXt V2 block, separable conv.
    Tensor enhance(const Tensor& aggregated, int stage) const;
    /// Decoder from the bottleneck. `skips[n-1]` feeds stage n; undefined entries are absent.
    Tensor decode(const Tensor& bottleneck, const std::vector<Tensor>& skips) const;

    /// Full model with streaming skip handling: MSIAM reduces each E_n as soon
    /// as it is produced and IEM_n is computed only when decoder stage n runs.
    ForwardResult run(const Tensor& x, const ForwardOptions& opts = {}) const;
    Tensor forward(const Tensor& x) const { return run(x).output; }

    // Building blocks shared by run() and the staged API above.
    Tensor reduce_level(const Tensor& encoded, int level) const;
    Tensor fuse_levels(const std::vector<Tensor>& reduced) const;

private:
    struct Stage {
        std::vector<ResidualBlockParams> blocks;
    };
    struct Iem {
        ConvNeXtV2Params block;
        SeparableConvParams project;
    };

    Tensor encoder_stage(const Tensor& x, int stage) const;
    Tensor decoder_stage(const Tensor& x, int stage, const Tensor& skip) const;
    Tensor head(const Tensor& input, const Tensor& features) const;

    ModelConfig cfg_;
    ParamStore params_;
    Conv2dParams intro_;
    std::vector<Stage> encoder_;
    std::vector<Conv2dParams> down_;
    std::vector<Conv2dParams> reduce_;
    Conv2dParams aggregate_fuse_;
    std::vector<Iem> iem_;
    std::vector<Conv2dParams> up_;
    std::vector<Conv2dParams> fuse_;
    std::vector<Stage> decoder_;
    Conv2dParams ending_;
};

/// Analytic multiply-accumulate count of one forward pass (convolutions only).
std::int64_t count_macs(const ModelConfig& cfg, const Shape& input);

}  // namespace unetmm
