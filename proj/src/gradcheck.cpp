#include "unetmm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include <fmt/core.h>

#include "unetmm/training.hpp"

namespace unetmm {

namespace {

Tensor random_tensor(std::mt19937_64& rng, const Shape& shape, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> dist(lo, hi);
    Tensor t(shape);
    for (float& v : t.data()) v = dist(rng);
    return t;
}

double projected(const Tensor& y, const Tensor& r) {
    auto a = y.data();
    auto b = r.data();
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

std::vector<std::pair<std::size_t, std::int64_t>> default_probes(const std::vector<Tensor>& inputs,
                                                                 std::int64_t max_per_input, std::mt19937_64& rng) {
    std::vector<std::pair<std::size_t, std::int64_t>> probes;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::int64_t n = inputs[i].numel();
        if (n <= max_per_input) {
            for (std::int64_t k = 0; k < n; ++k) probes.emplace_back(i, k);
        } else {
            std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
            for (std::int64_t k = 0; k < max_per_input; ++k) probes.emplace_back(i, pick(rng));
        }
    }
    return probes;
}

}  // namespace

GradResult check_gradient(const GradCase& gc, std::uint64_t seed, const GradOptions& opts) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> inputs = gc.inputs;
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.clear_grad();
    }

    Tape::current().clear();
    const Tensor y = gc.fn(inputs);
    const Tensor r = random_tensor(rng, y.shape());
    backward(sum(mul(y, r)));

    GradResult res;
    res.name = gc.name;
    res.tolerance = gc.tolerance;
    const auto probes = gc.probes.empty() ? default_probes(inputs, opts.max_per_input, rng) : gc.probes;

    struct Group {
        double diff = 0.0, analytic = 0.0, numeric = 0.0;
    };
    std::vector<Group> groups(gc.pooled ? 1 : inputs.size());
    double worst_abs = -1.0;

    NoGradGuard no_grad;
    for (const auto& [i, k] : probes) {
        Tensor x = inputs.at(i);
        const double analytic = x.has_grad() ? x.grad()[static_cast<std::size_t>(k)] : 0.0;
        float& slot = x.data()[static_cast<std::size_t>(k)];
        const float original = slot;
        const float plus = static_cast<float>(original + opts.epsilon);
        const float minus = static_cast<float>(original - opts.epsilon);
        slot = plus;
        const double f_plus = projected(gc.fn(inputs), r);
        slot = minus;
        const double f_minus = projected(gc.fn(inputs), r);
        slot = original;
        const double numeric = (f_plus - f_minus) / (static_cast<double>(plus) - minus);

        Group& g = groups[gc.pooled ? 0 : i];
        g.diff += (analytic - numeric) * (analytic - numeric);
        g.analytic += analytic * analytic;
        g.numeric += numeric * numeric;
        ++res.checked;
        const double abs_err = std::abs(analytic - numeric);
        if (std::isnan(abs_err) || abs_err > worst_abs) {
            worst_abs = std::isnan(abs_err) ? std::numeric_limits<double>::infinity() : abs_err;
            res.worst = fmt::format("input {} [{}]: analytic {}, numeric {}", i, k, analytic, numeric);
        }
    }
    for (const Group& g : groups) {
        const double denom = std::max({std::sqrt(g.analytic), std::sqrt(g.numeric), opts.floor});
        const double rel = std::sqrt(g.diff) / denom;
        if (std::isnan(rel)) {
            res.max_rel_error = std::numeric_limits<double>::infinity();
        } else if (g.diff > 0.0) {
            res.max_rel_error = std::max(res.max_rel_error, rel);
        }
    }
    for (auto& t : inputs) t.clear_grad();
    return res;
}

bool GradReport::passed() const {
    return std::all_of(results.begin(), results.end(), [](const GradResult& r) { return r.passed(); });
}

std::vector<std::string> GradReport::failures() const {
    std::vector<std::string> names;
    for (const auto& r : results) {
        if (!r.passed()) names.push_back(r.name);
    }
    return names;
}

std::string GradReport::to_text() const {
    std::string out;
    for (const auto& w : warnings) out += fmt::format("warning: {}\n", w);
    for (const auto& r : results) {
        out += fmt::format("{:<4} {:<28} checked {:>4}  max rel err {:.3e} (tol {:.0e})", r.passed() ? "ok" : "FAIL",
                           r.name, r.checked, r.max_rel_error, r.tolerance);
        if (!r.passed()) out += fmt::format("  worst {}", r.worst);
        out += "\n";
    }
    out += fmt::format("{} of {} cases passed\n", results.size() - failures().size(), results.size());
    return out;
}

GradReport run_gradcheck(const std::vector<GradCase>& cases, std::uint64_t seed, const GradOptions& opts) {
    GradReport report;
    if (cases.empty()) report.warnings.push_back("no gradient cases given; nothing was checked");
    for (std::size_t i = 0; i < cases.size(); ++i) report.results.push_back(check_gradient(cases[i], seed + i, opts));
    return report;
}

std::vector<GradCase> default_op_cases(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto rnd = [&](const Shape& s) { return random_tensor(rng, s); };
    auto positive = [&](const Shape& s) { return random_tensor(rng, s, 0.5f, 1.5f); };
    // Conv weights inside the composite blocks use the +-1/sqrt(fan_in) range of
    // the real initialisation; full-range weights make the block ill-conditioned.
    auto weight = [&](const Shape& s) {
        const auto bound = static_cast<float>(1.0 / std::sqrt(static_cast<double>(s.c * s.h * s.w)));
        return random_tensor(rng, s, -bound, bound);
    };
    const Shape small{2, 3, 4, 5};
    std::vector<GradCase> cases;
    auto add_case = [&](std::string name, std::vector<Tensor> inputs,
                        std::function<Tensor(const std::vector<Tensor>&)> fn) {
        GradCase gc;
        gc.name = std::move(name);
        gc.inputs = std::move(inputs);
        gc.fn = std::move(fn);
        cases.push_back(std::move(gc));
    };

    add_case("add", {rnd(small), rnd(small)}, [](const auto& in) { return add(in[0], in[1]); });
    add_case("sub", {rnd(small), rnd(small)}, [](const auto& in) { return sub(in[0], in[1]); });
    add_case("mul", {rnd(small), rnd(small)}, [](const auto& in) { return mul(in[0], in[1]); });
    add_case("mul_broadcast", {rnd(small), rnd(Shape{1, 1, 1, 1})}, [](const auto& in) { return mul(in[0], in[1]); });
    add_case("scale", {rnd(small)}, [](const auto& in) { return scale(in[0], -1.75f); });
    add_case("log", {positive(small)}, [](const auto& in) { return log(in[0]); });
    add_case("sum", {rnd(small)}, [](const auto& in) { return sum(in[0]); });
    add_case("mean", {rnd(small)}, [](const auto& in) { return mean(in[0]); });
    add_case("concat_channels", {rnd(Shape{2, 2, 3, 3}), rnd(Shape{2, 3, 3, 3})},
                     [](const auto& in) { return concat_channels({in[0], scale(in[1], 2.0f)}); });
    add_case("split_channels", {rnd(Shape{2, 5, 3, 3})}, [](const auto& in) {
                         auto parts = split_channels(in[0], {2, 3});
                         return concat_channels({scale(parts[1], 3.0f), parts[0]});
                     });

    auto conv_case = [&](const std::string& name, const Shape& x, std::int64_t out_c, int k, int stride, int padding,
                         int groups) {
        const Shape w{out_c, x.c / groups, k, k};
        add_case(name, {rnd(x), rnd(w), rnd(Shape{1, out_c, 1, 1})}, [=](const auto& in) {
                             Conv2dParams p{in[1], in[2], stride, padding, groups};
                             return conv2d(in[0], p);
                         });
    };
    conv_case("conv2d_3x3", Shape{2, 3, 8, 8}, 4, 3, 1, 1, 1);
    conv_case("conv2d_stride2", Shape{1, 4, 8, 8}, 8, 3, 2, 1, 1);
    conv_case("conv2d_grouped", Shape{1, 4, 6, 6}, 6, 3, 1, 1, 2);
    conv_case("conv2d_7x7_valid", Shape{1, 2, 9, 9}, 2, 7, 1, 0, 1);

    add_case("pointwise_conv", {rnd(Shape{2, 8, 16, 16}), rnd(Shape{4, 8, 1, 1}), rnd(Shape{1, 4, 1, 1})},
                     [](const auto& in) { return pointwise_conv(in[0], Conv2dParams{in[1], in[2]}); });
    add_case("depthwise_conv", {rnd(Shape{2, 4, 8, 8}), rnd(Shape{4, 1, 7, 7}), rnd(Shape{1, 4, 1, 1})},
                     [](const auto& in) { return depthwise_conv(in[0], Conv2dParams{in[1], in[2], 1, 3, 4}); });
    add_case("separable_conv",
                     {rnd(Shape{1, 4, 8, 8}), rnd(Shape{4, 1, 3, 3}), rnd(Shape{1, 4, 1, 1}), rnd(Shape{6, 4, 1, 1}),
                      rnd(Shape{1, 6, 1, 1})},
                     [](const auto& in) {
                         SeparableConvParams p{Conv2dParams{in[1], in[2], 1, 1, 4}, Conv2dParams{in[3], in[4]}};
                         return separable_conv(in[0], p);
                     });
    add_case("pixel_shuffle", {rnd(Shape{2, 8, 3, 3})}, [](const auto& in) { return pixel_shuffle(in[0], 2); });
    add_case("pixel_unshuffle", {rnd(Shape{2, 2, 4, 4})}, [](const auto& in) { return pixel_unshuffle(in[0], 2); });
    add_case("layer_norm", {rnd(Shape{2, 6, 4, 4}), rnd(Shape{1, 6, 1, 1}), rnd(Shape{1, 6, 1, 1})},
                     [](const auto& in) { return layer_norm_channelwise(in[0], NormParams{in[1], in[2]}); });
    add_case("grn", {rnd(Shape{2, 6, 4, 4}), rnd(Shape{1, 6, 1, 1}), rnd(Shape{1, 6, 1, 1})},
                     [](const auto& in) { return grn(in[0], GrnParams{in[1], in[2]}); });
    add_case("gelu", {rnd(Shape{2, 3, 8, 8})}, [](const auto& in) { return gelu(in[0]); });

    {
        const std::int64_t c = 4;
        const std::int64_t wide = 16;
        add_case("convnext_v2_block",
                         {rnd(Shape{1, c, 8, 8}), weight(Shape{c, 1, 7, 7}), rnd(Shape{1, c, 1, 1}), rnd(Shape{1, c, 1, 1}),
                          rnd(Shape{1, c, 1, 1}), weight(Shape{wide, c, 1, 1}), rnd(Shape{1, wide, 1, 1}),
                          rnd(Shape{1, wide, 1, 1}), rnd(Shape{1, wide, 1, 1}), weight(Shape{c, wide, 1, 1}),
                          rnd(Shape{1, c, 1, 1})},
                         [=](const auto& in) {
                             ConvNeXtV2Params p{Conv2dParams{in[1], in[2], 1, 3, static_cast<int>(c)},
                                                NormParams{in[3], in[4]}, Conv2dParams{in[5], in[6]},
                                                GrnParams{in[7], in[8]}, Conv2dParams{in[9], in[10]}};
                             return convnext_v2_block(in[0], p);
                         });
    }
    {
        const std::int64_t c = 4;
        add_case("residual_block",
                         {rnd(Shape{1, c, 8, 8}), weight(Shape{c, c, 3, 3}), rnd(Shape{1, c, 1, 1}), rnd(Shape{1, c, 1, 1}),
                          rnd(Shape{1, c, 1, 1}), weight(Shape{c, c, 3, 3}), rnd(Shape{1, c, 1, 1})},
                         [](const auto& in) {
                             ResidualBlockParams p{Conv2dParams{in[1], in[2], 1, 1}, NormParams{in[3], in[4]},
                                                   Conv2dParams{in[5], in[6], 1, 1}};
                             return residual_block(in[0], p);
                         });
    }
    add_case("psnr_loss", {rnd(Shape{1, 1, 4, 4}), rnd(Shape{1, 1, 4, 4})}, [](const auto& in) { return psnr_loss(in[0], in[1]); });
    return cases;
}

GradCase end_to_end_case(const ModelConfig& cfg, std::uint64_t seed, int samples) {
    auto model = std::make_shared<UNet>(cfg, seed);
    std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
    // Zero-initialised biases and GRN affines would otherwise carry no gradient signal.
    std::uniform_real_distribution<float> jitter(-0.2f, 0.2f);
    GradCase gc;
    gc.name = "end_to_end";
    gc.tolerance = 1e-2;
    gc.pooled = true;
    for (const auto& [name, t] : model->params().entries()) {
        Tensor p = t;
        for (float& v : p.data()) v += jitter(rng);
        gc.inputs.push_back(p);
    }
    const std::int64_t side = std::max<std::int64_t>(16, std::int64_t{1} << (cfg.num_stages - 1));
    const Tensor x = random_tensor(rng, Shape{1, cfg.in_channels, side, side}, 0.0f, 1.0f);
    // Tensor first, then element, so small tensors are probed as often as large ones.
    std::uniform_int_distribution<std::size_t> pick_tensor(0, gc.inputs.size() - 1);
    for (int s = 0; s < samples; ++s) {
        const std::size_t i = pick_tensor(rng);
        std::uniform_int_distribution<std::int64_t> pick(0, gc.inputs[i].numel() - 1);
        gc.probes.emplace_back(i, pick(rng));
    }
    gc.fn = [model, x](const std::vector<Tensor>&) { return model->forward(x); };
    return gc;
}

}  // namespace unetmm
