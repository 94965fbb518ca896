#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unetmm/tensor.hpp"

namespace unetmm {

/// Exact positive fraction, used for MSIAM channel reduction ratios.
struct Ratio {
    std::int64_t num = 1;
    std::int64_t den = 1;

    /// Accepts "a/b" or an integer; throws ConfigError otherwise.
    static Ratio parse(const std::string& text);
    std::string str() const;
    friend bool operator==(const Ratio&, const Ratio&) = default;
};

enum class SkipKind { Full, None, Single, MsiamIem };

struct SkipMode {
    SkipKind kind = SkipKind::MsiamIem;
    int stage = 0;  // only meaningful for Single

    static SkipMode full() { return {SkipKind::Full, 0}; }
    static SkipMode none() { return {SkipKind::None, 0}; }
    static SkipMode single(int k) { return {SkipKind::Single, k}; }
    static SkipMode msiam_iem() { return {SkipKind::MsiamIem, 0}; }

    /// "full", "none", "single:K", "msiam-iem".
    static SkipMode parse(const std::string& text);
    std::string str() const;
    /// True when encoder stage `n` feeds decoder stage `n` directly.
    bool direct_skip_at(int n) const {
        return kind == SkipKind::Full || (kind == SkipKind::Single && stage == n);
    }
    friend bool operator==(const SkipMode&, const SkipMode&) = default;
};

enum class Fusion { Add, Concat };

std::string fusion_name(Fusion f);
Fusion parse_fusion(const std::string& text);

/// Declarative description of a U-Net with configurable skip handling.
///
/// Stages are 1-based. Stage n runs at resolution H/2^(n-1) with
/// base_width*2^(n-1) channels; stage N is the bottleneck and never feeds a
/// skip. MSIAM levels are 1..N-1 and target_level selects the resolution of
/// the aggregated map (N-1 is the coarsest skip resolution).
struct ModelConfig {
    int num_stages = 5;
    std::int64_t base_width = 32;
    std::int64_t in_channels = 3;
    /// 2N-1 entries: encoder stages 1..N followed by decoder stages 1..N-1.
    std::vector<int> blocks_per_stage{1, 1, 1, 1, 1, 1, 1, 1, 1};
    SkipMode skip_mode = SkipMode::msiam_iem();
    std::vector<Ratio> msiam_reduction{{1, 16}, {1, 16}, {1, 16}, {1, 8}};
    int target_level = 4;
    int iem_expand = 4;
    int iem_kernel = 3;
    int accounting_bits = 8;
    bool conv_bias = true;
    bool global_residual = true;
    Fusion fusion = Fusion::Add;

    /// The NAFNet-scale layout: 5 stages, width 32, reductions {1/16,1/16,1/16,1/8}.
    static ModelConfig reference_default();
    /// Desk-scale model: 3 stages, width 4, reductions {1/2, 1/2}, target level 2.
    static ModelConfig micro();

    std::int64_t stage_channels(int stage) const;
    int encoder_blocks(int stage) const { return blocks_per_stage.at(static_cast<std::size_t>(stage - 1)); }
    int decoder_blocks(int stage) const {
        return blocks_per_stage.at(static_cast<std::size_t>(num_stages + stage - 1));
    }
    /// RC output channels at skip level n.
    std::int64_t reduced_channels(int level) const;
    /// Channel count of the aggregated map E'.
    std::int64_t aggregated_channels() const;
    /// Channels of E' after resizing to stage n's resolution.
    std::int64_t iem_channels(int stage) const;

    /// Structural checks; throws ConfigError.
    void validate() const;
    /// Input must be divisible by 2^(N-1) and match in_channels; throws ShapeError.
    void validate_input(const Shape& input) const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Signed power-of-two resize factor between two levels: positive means the
/// map grows spatially (pixel shuffle), negative means it shrinks (unshuffle).
int resize_factor(int from_level, int to_level);

}  // namespace unetmm
