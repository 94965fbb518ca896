#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "unetmm/model.hpp"

namespace unetmm {

/// One differentiable function under test. `fn` maps `inputs` to an output of
/// any shape; the checker projects it onto a fixed random tensor R so the
/// scalar compared is sum(R * fn(inputs)).
///
/// The error of a probe group is ||a - n|| / max(||a||, ||n||) over its
/// analytic (a) and central-difference (n) entries. Groups are the inputs,
/// or all probes together when `pooled` is set.
struct GradCase {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> fn;
    double tolerance = 1e-3;
    /// Explicit (input, element) probes. Empty means every element of every
    /// input, thinned to GradOptions::max_per_input.
    std::vector<std::pair<std::size_t, std::int64_t>> probes;
    bool pooled = false;
};

struct GradOptions {
    double epsilon = 1e-3;
    /// Lower bound on the error denominator; only matters for all-zero groups.
    double floor = 1e-12;
    std::int64_t max_per_input = 48;
};

struct GradResult {
    std::string name;
    std::int64_t checked = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::string worst;  // largest single-entry mismatch, for diagnostics
    bool passed() const { return max_rel_error <= tolerance; }
};

struct GradReport {
    std::vector<GradResult> results;
    std::vector<std::string> warnings;

    bool passed() const;
    std::vector<std::string> failures() const;
    std::string to_text() const;
};

/// Compares tape gradients with central differences. Inputs are modified in
/// place during probing and restored afterwards.
GradResult check_gradient(const GradCase& gc, std::uint64_t seed, const GradOptions& opts = {});
/// Runs every case; an empty list passes vacuously with a warning.
GradReport run_gradcheck(const std::vector<GradCase>& cases, std::uint64_t seed, const GradOptions& opts = {});

/// One case per differentiable op on random inputs in [-1, 1].
std::vector<GradCase> default_op_cases(std::uint64_t seed);
/// Whole-model case: `samples` parameter elements of a model built from `cfg`
/// with perturbed weights so every path carries gradient. Tolerance 1e-2.
GradCase end_to_end_case(const ModelConfig& cfg, std::uint64_t seed, int samples = 50);

}  // namespace unetmm
