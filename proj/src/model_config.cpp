#include "unetmm/model_config.hpp"

#include <charconv>

#include <fmt/core.h>

namespace unetmm {

namespace {

std::int64_t parse_int(const std::string& text, const std::string& what) {
    std::int64_t v = 0;
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError(fmt::format("{}: '{}' is not an integer", what, text));
    }
    return v;
}

}  // namespace

Ratio Ratio::parse(const std::string& text) {
    Ratio r;
    const auto slash = text.find('/');
    if (slash == std::string::npos) {
        r.num = parse_int(text, "ratio");
        r.den = 1;
    } else {
        r.num = parse_int(text.substr(0, slash), "ratio numerator");
        r.den = parse_int(text.substr(slash + 1), "ratio denominator");
    }
    if (r.num < 1 || r.den < 1) {
        throw ConfigError(fmt::format("ratio '{}' must be positive", text));
    }
    return r;
}

std::string Ratio::str() const { return den == 1 ? std::to_string(num) : fmt::format("{}/{}", num, den); }

SkipMode SkipMode::parse(const std::string& text) {
    if (text == "full") return full();
    if (text == "none") return none();
    if (text == "msiam-iem") return msiam_iem();
    if (text.rfind("single:", 0) == 0) {
        const auto k = parse_int(text.substr(7), "single skip stage");
        return single(static_cast<int>(k));
    }
    throw ConfigError(fmt::format("unknown skip mode '{}' (expected full, none, single:K, msiam-iem)", text));
}

std::string SkipMode::str() const {
    switch (kind) {
        case SkipKind::Full: return "full";
        case SkipKind::None: return "none";
        case SkipKind::Single: return fmt::format("single:{}", stage);
        case SkipKind::MsiamIem: return "msiam-iem";
    }
    return "?";
}

std::string fusion_name(Fusion f) { return f == Fusion::Add ? "add" : "concat"; }

Fusion parse_fusion(const std::string& text) {
    if (text == "add") return Fusion::Add;
    if (text == "concat") return Fusion::Concat;
    throw ConfigError(fmt::format("unknown fusion '{}' (expected add or concat)", text));
}

int resize_factor(int from_level, int to_level) {
    const int d = from_level - to_level;
    if (d == 0) return 1;
    return d > 0 ? (1 << d) : -(1 << -d);
}

ModelConfig ModelConfig::reference_default() { return ModelConfig{}; }

ModelConfig ModelConfig::micro() {
    ModelConfig cfg;
    cfg.num_stages = 3;
    cfg.base_width = 4;
    cfg.blocks_per_stage.assign(5, 1);
    cfg.msiam_reduction = {{1, 2}, {1, 2}};
    cfg.target_level = 2;
    return cfg;
}

std::int64_t ModelConfig::stage_channels(int stage) const { return base_width << (stage - 1); }

std::int64_t ModelConfig::reduced_channels(int level) const {
    const Ratio& r = msiam_reduction.at(static_cast<std::size_t>(level - 1));
    return stage_channels(level) * r.num / r.den;
}

std::int64_t ModelConfig::aggregated_channels() const {
    std::int64_t total = 0;
    for (int n = 1; n < num_stages; ++n) {
        const int f = resize_factor(n, target_level);
        const std::int64_t c = reduced_channels(n);
        // Unshuffle (f < 0) multiplies channels, shuffle divides them.
        total += f < 0 ? c * f * f : c / (static_cast<std::int64_t>(f) * f);
    }
    return total;
}

std::int64_t ModelConfig::iem_channels(int stage) const {
    const int f = resize_factor(target_level, stage);
    const std::int64_t k = aggregated_channels();
    return f < 0 ? k * f * f : k / (static_cast<std::int64_t>(f) * f);
}

void ModelConfig::validate() const {
    if (num_stages < 2 || num_stages > 12) {
        throw ConfigError(fmt::format("num_stages must be in [2, 12], got {}", num_stages));
    }
    if (base_width < 1) throw ConfigError("base_width must be positive");
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (blocks_per_stage.size() != static_cast<std::size_t>(2 * num_stages - 1)) {
        throw ConfigError(fmt::format("blocks_per_stage needs {} entries (encoder then decoder), got {}",
                                      2 * num_stages - 1, blocks_per_stage.size()));
    }
    for (int b : blocks_per_stage) {
        if (b < 0) throw ConfigError("blocks_per_stage entries must be non-negative");
    }
    if (accounting_bits != 8 && accounting_bits != 16 && accounting_bits != 32) {
        throw ConfigError(fmt::format("accounting_bits must be 8, 16 or 32, got {}", accounting_bits));
    }
    if (skip_mode.kind == SkipKind::Single && (skip_mode.stage < 1 || skip_mode.stage >= num_stages)) {
        throw ConfigError(fmt::format("single skip stage must be in [1, {}], got {}", num_stages - 1, skip_mode.stage));
    }
    if (skip_mode.kind != SkipKind::MsiamIem) return;

    if (msiam_reduction.size() != static_cast<std::size_t>(num_stages - 1)) {
        throw ConfigError(fmt::format("msiam_reduction needs {} ratios, got {}", num_stages - 1, msiam_reduction.size()));
    }
    if (target_level < 1 || target_level >= num_stages) {
        throw ConfigError(fmt::format("target_level must be in [1, {}], got {}", num_stages - 1, target_level));
    }
    if (iem_expand < 1) throw ConfigError("iem_expand must be positive");
    if (iem_kernel < 1 || iem_kernel % 2 == 0) throw ConfigError("iem_kernel must be a positive odd number");
    for (int n = 1; n < num_stages; ++n) {
        const Ratio& r = msiam_reduction[static_cast<std::size_t>(n - 1)];
        const std::int64_t c = stage_channels(n) * r.num;
        if (c % r.den != 0 || c / r.den < 1) {
            throw ConfigError(fmt::format("stage {} has {} channels; reduction {} does not give a positive integer",
                                          n, stage_channels(n), r.str()));
        }
        const int f = resize_factor(n, target_level);
        if (f > 1 && (c / r.den) % (static_cast<std::int64_t>(f) * f) != 0) {
            throw ConfigError(fmt::format("level {}: {} reduced channels cannot be pixel-shuffled by {}", n, c / r.den, f));
        }
    }
    const std::int64_t k = aggregated_channels();
    for (int n = 1; n < num_stages; ++n) {
        const int f = resize_factor(target_level, n);
        if (f > 1 && k % (static_cast<std::int64_t>(f) * f) != 0) {
            throw ConfigError(fmt::format("aggregated map has {} channels; cannot pixel-shuffle by {} for stage {}",
                                          k, f, n));
        }
    }
}

void ModelConfig::validate_input(const Shape& input) const {
    const std::int64_t div = std::int64_t{1} << (num_stages - 1);
    if (input.h % div != 0 || input.w % div != 0) {
        throw ShapeError(fmt::format("input {} must have H and W divisible by {}", input.str(), div));
    }
    if (input.c != in_channels) {
        throw ShapeError(fmt::format("input {} has {} channels, model expects {}", input.str(), input.c, in_channels));
    }
}

}  // namespace unetmm
