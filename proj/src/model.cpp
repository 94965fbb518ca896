#include "unetmm/model.hpp"

#include <map>

#include <fmt/core.h>

namespace unetmm {

namespace {

// Seed offset for the MSIAM/IEM parameters, so the backbone initialisation
// is identical across skip modes for a given seed.
constexpr std::uint64_t kSkipModuleSeedOffset = 0x9E3779B97F4A7C15ull;

Tensor resize(const Tensor& x, int factor) {
    if (factor > 1) return pixel_shuffle(x, factor);
    if (factor < 0) return pixel_unshuffle(x, -factor);
    return x;
}

// Owns the tensors kept alive for skip paths and reports them to the trace.
class SkipStore {
public:
    SkipStore(MemoryTrace* trace, int bits) : trace_(trace), bits_(bits) {}

    void retain(const std::string& tag, const Tensor& t) {
        held_.emplace(tag, t);
        if (trace_) trace_->retain(tag, t.numel() * bits_ / 8);
    }
    const Tensor& get(const std::string& tag) const { return held_.at(tag); }
    void release(const std::string& tag) {
        held_.erase(tag);
        if (trace_) trace_->release(tag);
    }
    void end_phase(const std::string& phase) {
        if (trace_) trace_->end_phase(phase);
    }

private:
    MemoryTrace* trace_;
    int bits_;
    std::map<std::string, Tensor> held_;
};

}  // namespace

UNet::UNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int n_stages = cfg_.num_stages;
    ParamBuilder pb(params_, seed, cfg_.conv_bias);

    intro_ = pb.conv("intro", cfg_.in_channels, cfg_.base_width, 3);
    for (int i = 1; i <= n_stages; ++i) {
        Stage s;
        for (int j = 1; j <= cfg_.encoder_blocks(i); ++j) {
            s.blocks.push_back(pb.residual(fmt::format("enc{}.block{}", i, j), cfg_.stage_channels(i)));
        }
        encoder_.push_back(std::move(s));
        if (i < n_stages) {
            down_.push_back(pb.conv(fmt::format("down{}", i), cfg_.stage_channels(i), cfg_.stage_channels(i + 1), 3, 2, 1));
        }
    }
    for (int n = 1; n < n_stages; ++n) {
        const std::int64_t c_next = cfg_.stage_channels(n + 1);
        up_.push_back(pb.pointwise(fmt::format("up{}", n), c_next, 2 * c_next));
        if (cfg_.fusion == Fusion::Concat) {
            fuse_.push_back(pb.pointwise(fmt::format("dec{}.fuse", n), 2 * cfg_.stage_channels(n), cfg_.stage_channels(n)));
        }
        Stage s;
        for (int j = 1; j <= cfg_.decoder_blocks(n); ++j) {
            s.blocks.push_back(pb.residual(fmt::format("dec{}.block{}", n, j), cfg_.stage_channels(n)));
        }
        decoder_.push_back(std::move(s));
    }
    ending_ = pb.conv("ending", cfg_.base_width, cfg_.in_channels, 3);

    if (cfg_.skip_mode.kind == SkipKind::MsiamIem) {
        ParamBuilder sb(params_, seed + kSkipModuleSeedOffset, cfg_.conv_bias);
        for (int n = 1; n < n_stages; ++n) {
            reduce_.push_back(sb.pointwise(fmt::format("msiam.rc{}", n), cfg_.stage_channels(n), cfg_.reduced_channels(n)));
        }
        const std::int64_t k = cfg_.aggregated_channels();
        aggregate_fuse_ = sb.pointwise("msiam.fuse", k, k);
        for (int n = 1; n < n_stages; ++n) {
            const std::int64_t kn = cfg_.iem_channels(n);
            Iem iem;
            iem.block = sb.convnext(fmt::format("iem{}.block", n), kn, cfg_.iem_expand);
            iem.project = sb.separable(fmt::format("iem{}.sep", n), kn, cfg_.stage_channels(n), cfg_.iem_kernel);
            iem_.push_back(std::move(iem));
        }
    }
}

Tensor UNet::encoder_stage(const Tensor& x, int stage) const {
    Tensor h = x;
    for (const auto& block : encoder_[static_cast<std::size_t>(stage - 1)].blocks) h = residual_block(h, block);
    return h;
}

Tensor UNet::decoder_stage(const Tensor& x, int stage, const Tensor& skip) const {
    const auto idx = static_cast<std::size_t>(stage - 1);
    Tensor h = pixel_shuffle(pointwise_conv(x, up_[idx]), 2);
    if (skip.defined() && skip.shape() != h.shape()) {
        throw ShapeError(fmt::format("decoder stage {}: skip {} does not match {}", stage, skip.shape().str(),
                                     h.shape().str()));
    }
    if (cfg_.fusion == Fusion::Add) {
        if (skip.defined()) h = add(h, skip);
    } else {
        h = pointwise_conv(concat_channels({h, skip.defined() ? skip : zeros(h.shape())}), fuse_[idx]);
    }
    for (const auto& block : decoder_[idx].blocks) h = residual_block(h, block);
    return h;
}

Tensor UNet::head(const Tensor& input, const Tensor& features) const {
    Tensor out = conv2d(features, ending_);
    return cfg_.global_residual ? add(out, input) : out;
}

StageFeatures UNet::encode(const Tensor& x) const {
    cfg_.validate_input(x.shape());
    StageFeatures f;
    Tensor h = conv2d(x, intro_);
    for (int i = 1; i <= cfg_.num_stages; ++i) {
        h = encoder_stage(h, i);
        f.features.push_back(h);
        if (i < cfg_.num_stages) h = conv2d(h, down_[static_cast<std::size_t>(i - 1)]);
    }
    return f;
}

Tensor UNet::reduce_level(const Tensor& encoded, int level) const {
    if (cfg_.skip_mode.kind != SkipKind::MsiamIem) {
        throw ContractError("reduce_level: model has no MSIAM");
    }
    Tensor r = pointwise_conv(encoded, reduce_.at(static_cast<std::size_t>(level - 1)));
    return resize(r, resize_factor(level, cfg_.target_level));
}

Tensor UNet::fuse_levels(const std::vector<Tensor>& reduced) const {
    return pointwise_conv(concat_channels(reduced), aggregate_fuse_);
}

Tensor UNet::aggregate(const StageFeatures& feats) const {
    std::vector<Tensor> reduced;
    for (int n = 1; n < cfg_.num_stages; ++n) reduced.push_back(reduce_level(feats.stage(n), n));
    return fuse_levels(reduced);
}

Tensor UNet::enhance(const Tensor& aggregated, int stage) const {
    if (cfg_.skip_mode.kind != SkipKind::MsiamIem) {
        throw ContractError("enhance: model has no IEM");
    }
    const Iem& iem = iem_.at(static_cast<std::size_t>(stage - 1));
    Tensor h = resize(aggregated, resize_factor(cfg_.target_level, stage));
    h = convnext_v2_block(h, iem.block);
    return separable_conv(h, iem.project);
}

Tensor UNet::decode(const Tensor& bottleneck, const std::vector<Tensor>& skips) const {
    if (skips.size() != static_cast<std::size_t>(cfg_.num_stages - 1)) {
        throw ArityError(fmt::format("decode: expected {} skip slots, got {}", cfg_.num_stages - 1, skips.size()));
    }
    Tensor h = bottleneck;
    for (int n = cfg_.num_stages - 1; n >= 1; --n) h = decoder_stage(h, n, skips[static_cast<std::size_t>(n - 1)]);
    return conv2d(h, ending_);
}

ForwardResult UNet::run(const Tensor& x, const ForwardOptions& opts) const {
    cfg_.validate_input(x.shape());
    const int n_stages = cfg_.num_stages;
    const SkipMode mode = cfg_.skip_mode;
    const bool msiam = mode.kind == SkipKind::MsiamIem;
    SkipStore store(opts.trace, cfg_.accounting_bits);
    ForwardResult result;

    Tensor h = conv2d(x, intro_);
    std::vector<Tensor> reduced;
    for (int i = 1; i <= n_stages; ++i) {
        h = encoder_stage(h, i);
        if (i < n_stages) {
            if (opts.capture_features) result.encoder.push_back(h);
            if (mode.direct_skip_at(i)) store.retain(fmt::format("E{}", i), h);
            if (msiam) {
                Tensor r = reduce_level(h, i);
                store.retain(fmt::format("rs{}", i), r);
                reduced.push_back(std::move(r));
                if (i == n_stages - 1) {
                    Tensor agg = fuse_levels(reduced);
                    reduced.clear();
                    for (int n = 1; n < n_stages; ++n) store.release(fmt::format("rs{}", n));
                    store.retain("aggregate", agg);
                }
            }
        }
        store.end_phase(fmt::format("EndOfE{}", i));
        if (i < n_stages) h = conv2d(h, down_[static_cast<std::size_t>(i - 1)]);
    }

    if (opts.capture_features && msiam) result.iem.resize(static_cast<std::size_t>(n_stages - 1));
    for (int n = n_stages - 1; n >= 1; --n) {
        Tensor skip;
        if (mode.direct_skip_at(n)) skip = store.get(fmt::format("E{}", n));
        if (msiam) {
            skip = enhance(store.get("aggregate"), n);
            if (opts.capture_features) result.iem[static_cast<std::size_t>(n - 1)] = skip;
        }
        h = decoder_stage(h, n, skip);
        if (mode.direct_skip_at(n)) store.release(fmt::format("E{}", n));
        if (msiam && n == 1) store.release("aggregate");
        store.end_phase(fmt::format("EndOfD{}", n));
    }
    result.output = head(x, h);
    return result;
}

std::int64_t count_macs(const ModelConfig& cfg, const Shape& input) {
    cfg.validate();
    cfg.validate_input(input);
    auto pixels = [&](int stage) { return (input.h >> (stage - 1)) * (input.w >> (stage - 1)); };
    auto conv = [](std::int64_t px, std::int64_t in_c, std::int64_t out_c, std::int64_t k, std::int64_t groups = 1) {
        return px * out_c * (in_c / groups) * k * k;
    };
    const int n_stages = cfg.num_stages;
    std::int64_t macs = conv(pixels(1), cfg.in_channels, cfg.base_width, 3);
    for (int i = 1; i <= n_stages; ++i) {
        const std::int64_t c = cfg.stage_channels(i);
        macs += cfg.encoder_blocks(i) * 2 * conv(pixels(i), c, c, 3);
        if (i < n_stages) macs += conv(pixels(i + 1), c, 2 * c, 3);
    }
    for (int n = 1; n < n_stages; ++n) {
        const std::int64_t c = cfg.stage_channels(n);
        const std::int64_t c_next = cfg.stage_channels(n + 1);
        macs += conv(pixels(n + 1), c_next, 2 * c_next, 1);
        if (cfg.fusion == Fusion::Concat) macs += conv(pixels(n), 2 * c, c, 1);
        macs += cfg.decoder_blocks(n) * 2 * conv(pixels(n), c, c, 3);
    }
    macs += conv(pixels(1), cfg.base_width, cfg.in_channels, 3);

    if (cfg.skip_mode.kind == SkipKind::MsiamIem) {
        const std::int64_t k = cfg.aggregated_channels();
        for (int n = 1; n < n_stages; ++n) macs += conv(pixels(n), cfg.stage_channels(n), cfg.reduced_channels(n), 1);
        macs += conv(pixels(cfg.target_level), k, k, 1);
        for (int n = 1; n < n_stages; ++n) {
            const std::int64_t kn = cfg.iem_channels(n);
            const std::int64_t wide = kn * cfg.iem_expand;
            macs += conv(pixels(n), kn, kn, 7, kn);
            macs += conv(pixels(n), kn, wide, 1) + conv(pixels(n), wide, kn, 1);
            macs += conv(pixels(n), kn, kn, cfg.iem_kernel, kn);
            macs += conv(pixels(n), kn, cfg.stage_channels(n), 1);
        }
    }
    return macs * input.n;
}

}  // namespace unetmm
