#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unetmm/model_config.hpp"

namespace unetmm {

/// Bytes held by a c x h x w feature map stored with `bits` per element.
std::int64_t feature_bytes(std::int64_t c, std::int64_t h, std::int64_t w, int bits);

/// Binary megabytes (2^20 bytes).
double to_megabytes(std::int64_t bytes);
/// "3.75", "0.25", "7.5": at most two decimals, trailing zeros trimmed, at
/// least one decimal kept.
std::string format_megabytes(std::int64_t bytes);

struct MemoryEvent {
    std::string phase;  // the phase at whose end the event has happened
    std::int64_t delta_bytes = 0;
    std::string tag;

    friend bool operator==(const MemoryEvent&, const MemoryEvent&) = default;
};

struct MemorySample {
    std::string phase;
    std::int64_t live_bytes = 0;

    friend bool operator==(const MemorySample&, const MemorySample&) = default;
};

/// Bytes held alive for skip paths, sampled at the end of every stage:
/// EndOfE1..EndOfEN, then EndOfD(N-1)..EndOfD1.
struct MemoryTimeline {
    std::vector<MemorySample> samples;
    std::vector<MemoryEvent> events;

    std::int64_t peak() const;
    std::int64_t live_at(const std::string& phase) const;
    /// CSV with header `phase,live_bytes`.
    std::string to_csv() const;
    static MemoryTimeline from_csv(const std::string& text);
};

/// Phase labels in execution order for an N-stage model.
std::vector<std::string> phase_labels(int num_stages);

/// Symbolic skip-storage timeline for one forward pass over `input`
/// (the batch extent scales every buffer). Parameters and transient
/// workspace are not counted.
///
/// Full: E_k is kept from the end of encoder stage k until decoder stage k
/// has fused it. MsiamIem: each level's reduced, resized map is kept from
/// the end of its stage; once level N-1 is reduced they are replaced by the
/// aggregated map, which lives until decoder stage 1 has consumed it.
MemoryTimeline skip_timeline(const ModelConfig& cfg, const Shape& input);

struct ComparisonReport {
    std::string label_a;
    std::string label_b;
    std::int64_t peak_a = 0;
    std::int64_t peak_b = 0;
    /// (1 - peak_b / peak_a) * 100, rounded to one decimal.
    double reduction_percent = 0.0;

    std::string to_text() const;
    /// Header `role,skip_mode,peak_bytes,peak_mb,reduction_percent`.
    std::string to_csv() const;
};

ComparisonReport compare(const ModelConfig& a, const ModelConfig& b, const Shape& input);

/// Runtime counterpart of skip_timeline: the model reports every skip buffer
/// it retains or releases and marks the end of each stage.
class MemoryTrace {
public:
    void retain(const std::string& tag, std::int64_t bytes);
    void release(const std::string& tag);
    void end_phase(const std::string& phase);

    std::int64_t live_bytes() const { return live_bytes_; }
    const MemoryTimeline& timeline() const { return timeline_; }
    /// Tags of every buffer ever retained, in order.
    const std::vector<std::string>& retained_tags() const { return retained_tags_; }

private:
    std::map<std::string, std::int64_t> live_;
    std::vector<MemoryEvent> pending_;
    std::vector<std::string> retained_tags_;
    std::int64_t live_bytes_ = 0;
    MemoryTimeline timeline_;
};

}  // namespace unetmm
