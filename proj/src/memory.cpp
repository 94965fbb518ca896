#include "unetmm/memory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <fmt/core.h>

namespace unetmm {

std::int64_t feature_bytes(std::int64_t c, std::int64_t h, std::int64_t w, int bits) {
    return c * h * w * bits / 8;
}

double to_megabytes(std::int64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

std::string format_megabytes(std::int64_t bytes) {
    std::string s = fmt::format("{:.2f}", to_megabytes(bytes));
    while (s.size() > 1 && s.back() == '0' && s[s.size() - 2] != '.') s.pop_back();
    return s;
}

std::int64_t MemoryTimeline::peak() const {
    std::int64_t p = 0;
    for (const auto& s : samples) p = std::max(p, s.live_bytes);
    return p;
}

std::int64_t MemoryTimeline::live_at(const std::string& phase) const {
    for (const auto& s : samples) {
        if (s.phase == phase) return s.live_bytes;
    }
    throw ContractError(fmt::format("timeline has no phase '{}'", phase));
}

std::string MemoryTimeline::to_csv() const {
    std::string out = "phase,live_bytes\n";
    for (const auto& s : samples) out += fmt::format("{},{}\n", s.phase, s.live_bytes);
    return out;
}

MemoryTimeline MemoryTimeline::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "phase,live_bytes") {
        throw FormatError("timeline CSV: missing `phase,live_bytes` header");
    }
    MemoryTimeline t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw FormatError(fmt::format("timeline CSV: bad row '{}'", line));
        try {
            t.samples.push_back({line.substr(0, comma), std::stoll(line.substr(comma + 1))});
        } catch (const std::logic_error&) {
            throw FormatError(fmt::format("timeline CSV: bad byte count in '{}'", line));
        }
    }
    return t;
}

std::vector<std::string> phase_labels(int num_stages) {
    std::vector<std::string> labels;
    for (int i = 1; i <= num_stages; ++i) labels.push_back(fmt::format("EndOfE{}", i));
    for (int i = num_stages - 1; i >= 1; --i) labels.push_back(fmt::format("EndOfD{}", i));
    return labels;
}

namespace {

// Accumulates events for the phase in progress, then closes it with a sample.
struct TimelineBuilder {
    MemoryTimeline timeline;
    std::int64_t live = 0;
    std::vector<MemoryEvent> pending;

    void change(const std::string& tag, std::int64_t delta) {
        live += delta;
        pending.push_back({"", delta, tag});
    }
    void close(const std::string& phase) {
        for (auto& e : pending) {
            e.phase = phase;
            timeline.events.push_back(std::move(e));
        }
        pending.clear();
        timeline.samples.push_back({phase, live});
    }
};

}  // namespace

MemoryTimeline skip_timeline(const ModelConfig& cfg, const Shape& input) {
    cfg.validate();
    cfg.validate_input(input);
    const int n_stages = cfg.num_stages;
    auto stage_bytes = [&](std::int64_t c, int stage) {
        return input.n * feature_bytes(c, input.h >> (stage - 1), input.w >> (stage - 1), cfg.accounting_bits);
    };

    TimelineBuilder b;
    std::vector<std::int64_t> held(static_cast<std::size_t>(n_stages), 0);
    const SkipMode mode = cfg.skip_mode;

    for (int i = 1; i <= n_stages; ++i) {
        if (i < n_stages && mode.direct_skip_at(i)) {
            held[i] = stage_bytes(cfg.stage_channels(i), i);
            b.change(fmt::format("E{}", i), held[i]);
        }
        if (i < n_stages && mode.kind == SkipKind::MsiamIem) {
            // Resizing by pixel (un)shuffle keeps the element count.
            held[i] = stage_bytes(cfg.reduced_channels(i), i);
            b.change(fmt::format("rs{}", i), held[i]);
            if (i == n_stages - 1) {
                for (int n = 1; n < n_stages; ++n) b.change(fmt::format("rs{}", n), -held[n]);
                b.change("aggregate", stage_bytes(cfg.aggregated_channels(), cfg.target_level));
            }
        }
        b.close(fmt::format("EndOfE{}", i));
    }
    for (int n = n_stages - 1; n >= 1; --n) {
        if (mode.direct_skip_at(n)) {
            b.change(fmt::format("E{}", n), -held[n]);
        }
        if (mode.kind == SkipKind::MsiamIem && n == 1) {
            b.change("aggregate", -stage_bytes(cfg.aggregated_channels(), cfg.target_level));
        }
        b.close(fmt::format("EndOfD{}", n));
    }
    return std::move(b.timeline);
}

ComparisonReport compare(const ModelConfig& a, const ModelConfig& b, const Shape& input) {
    if (a.accounting_bits != b.accounting_bits) {
        throw ConfigError("compare: both configs must use the same accounting_bits");
    }
    ComparisonReport r;
    r.label_a = a.skip_mode.str();
    r.label_b = b.skip_mode.str();
    r.peak_a = skip_timeline(a, input).peak();
    r.peak_b = skip_timeline(b, input).peak();
    if (r.peak_a > 0) {
        const double pct = (1.0 - static_cast<double>(r.peak_b) / static_cast<double>(r.peak_a)) * 100.0;
        r.reduction_percent = std::round(pct * 10.0) / 10.0;
    }
    return r;
}

std::string ComparisonReport::to_text() const {
    return fmt::format(
        "baseline  {:<10} peak {} bytes ({} MB)\n"
        "candidate {:<10} peak {} bytes ({} MB)\n"
        "reduction {:.1f}%\n",
        label_a, peak_a, format_megabytes(peak_a), label_b, peak_b, format_megabytes(peak_b), reduction_percent);
}

std::string ComparisonReport::to_csv() const {
    return fmt::format(
        "role,skip_mode,peak_bytes,peak_mb,reduction_percent\n"
        "baseline,{},{},{},0.0\n"
        "candidate,{},{},{},{:.1f}\n",
        label_a, peak_a, format_megabytes(peak_a), label_b, peak_b, format_megabytes(peak_b), reduction_percent);
}

void MemoryTrace::retain(const std::string& tag, std::int64_t bytes) {
    if (live_.count(tag) != 0) {
        throw ContractError(fmt::format("skip buffer '{}' retained twice", tag));
    }
    live_[tag] = bytes;
    live_bytes_ += bytes;
    retained_tags_.push_back(tag);
    pending_.push_back({"", bytes, tag});
}

void MemoryTrace::release(const std::string& tag) {
    auto it = live_.find(tag);
    if (it == live_.end()) {
        throw ContractError(fmt::format("skip buffer '{}' released but not held", tag));
    }
    live_bytes_ -= it->second;
    pending_.push_back({"", -it->second, tag});
    live_.erase(it);
}

void MemoryTrace::end_phase(const std::string& phase) {
    for (auto& e : pending_) {
        e.phase = phase;
        timeline_.events.push_back(std::move(e));
    }
    pending_.clear();
    timeline_.samples.push_back({phase, live_bytes_});
}

}  // namespace unetmm
