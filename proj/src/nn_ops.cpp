#include "unetmm/nn_ops.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include <fmt/core.h>

#include "unetmm/parallel.hpp"

namespace unetmm {

namespace {

thread_local MacCounter* g_mac_counter = nullptr;

struct ConvGeometry {
    std::int64_t n, in_c, in_h, in_w;
    std::int64_t out_c, out_h, out_w;
    std::int64_t k, stride, pad, groups;
    std::int64_t in_per_group, out_per_group;

    // Output columns whose receptive tap `kx` lands inside the input row.
    std::int64_t ox_begin(std::int64_t kx) const {
        const std::int64_t num = pad - kx;
        return num <= 0 ? 0 : (num + stride - 1) / stride;
    }
    std::int64_t ox_end(std::int64_t kx) const {
        const std::int64_t num = in_w - 1 + pad - kx;
        if (num < 0) return 0;
        return std::min(out_w, num / stride + 1);
    }
};

ConvGeometry conv_geometry(const Tensor& x, const Conv2dParams& p) {
    if (!p.weight.defined()) {
        throw ShapeError("conv2d: weight is undefined");
    }
    const Shape& xs = x.shape();
    const Shape& ws = p.weight.shape();
    if (ws.h != ws.w) {
        throw ShapeError(fmt::format("conv2d: kernel must be square, weight {}", ws.str()));
    }
    if (p.stride < 1 || p.padding < 0 || p.groups < 1) {
        throw ShapeError(fmt::format("conv2d: invalid stride {} / padding {} / groups {}", p.stride,
                                     p.padding, p.groups));
    }
    if (xs.c % p.groups != 0 || ws.n % p.groups != 0) {
        throw ShapeError(fmt::format("conv2d: groups {} must divide in_c {} and out_c {}", p.groups, xs.c, ws.n));
    }
    if (ws.c != xs.c / p.groups) {
        throw ShapeError(fmt::format("conv2d: weight {} expects {} input channels per group, input {} has {}",
                                     ws.str(), ws.c, xs.str(), xs.c / p.groups));
    }
    if (p.bias.defined() && p.bias.numel() != ws.n) {
        throw ShapeError(fmt::format("conv2d: bias has {} values for {} output channels", p.bias.numel(), ws.n));
    }
    const std::int64_t k = ws.h;
    if (xs.h + 2 * p.padding < k || xs.w + 2 * p.padding < k) {
        throw ShapeError(fmt::format("conv2d: input {} smaller than kernel {} after padding {}", xs.str(), k,
                                     p.padding));
    }
    ConvGeometry g{};
    g.n = xs.n;
    g.in_c = xs.c;
    g.in_h = xs.h;
    g.in_w = xs.w;
    g.out_c = ws.n;
    g.k = k;
    g.stride = p.stride;
    g.pad = p.padding;
    g.groups = p.groups;
    g.out_h = (xs.h + 2 * p.padding - k) / p.stride + 1;
    g.out_w = (xs.w + 2 * p.padding - k) / p.stride + 1;
    g.in_per_group = xs.c / p.groups;
    g.out_per_group = ws.n / p.groups;
    return g;
}

void conv_forward(const ConvGeometry& g, const float* x, const float* w, const float* bias, float* out) {
    const std::int64_t in_plane = g.in_h * g.in_w;
    const std::int64_t out_plane = g.out_h * g.out_w;
    const std::int64_t cost = g.n * g.out_c * out_plane * g.in_per_group * g.k * g.k;
    parallel_for(g.n * g.out_c, cost, [&](std::int64_t job) {
        const std::int64_t b = job / g.out_c;
        const std::int64_t oc = job % g.out_c;
        // Double accumulators keep the output within one rounding of exact.
        std::vector<double> acc(static_cast<std::size_t>(out_plane), bias ? bias[oc] : 0.0);
        const std::int64_t group = oc / g.out_per_group;
        for (std::int64_t icl = 0; icl < g.in_per_group; ++icl) {
            const std::int64_t ic = group * g.in_per_group + icl;
            const float* in = x + (b * g.in_c + ic) * in_plane;
            const float* wk = w + (oc * g.in_per_group + icl) * g.k * g.k;
            for (std::int64_t ky = 0; ky < g.k; ++ky) {
                for (std::int64_t kx = 0; kx < g.k; ++kx) {
                    const double wv = wk[ky * g.k + kx];
                    const std::int64_t lo = g.ox_begin(kx);
                    const std::int64_t hi = g.ox_end(kx);
                    for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                        const std::int64_t iy = oy * g.stride - g.pad + ky;
                        if (iy < 0 || iy >= g.in_h) continue;
                        const float* irow = in + iy * g.in_w - g.pad + kx;
                        double* orow = acc.data() + oy * g.out_w;
                        if (g.stride == 1) {
                            for (std::int64_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox];
                        } else {
                            for (std::int64_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * g.stride];
                        }
                    }
                }
            }
        }
        float* o = out + job * out_plane;
        for (std::int64_t i = 0; i < out_plane; ++i) o[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
    });
}

void conv_backward_input(const ConvGeometry& g, const float* w, const float* gout, float* gx) {
    const std::int64_t in_plane = g.in_h * g.in_w;
    const std::int64_t out_plane = g.out_h * g.out_w;
    const std::int64_t cost = g.n * g.out_c * out_plane * g.in_per_group * g.k * g.k;
    parallel_for(g.n, cost, [&](std::int64_t b) {
        for (std::int64_t oc = 0; oc < g.out_c; ++oc) {
            const float* go = gout + (b * g.out_c + oc) * out_plane;
            const std::int64_t group = oc / g.out_per_group;
            for (std::int64_t icl = 0; icl < g.in_per_group; ++icl) {
                const std::int64_t ic = group * g.in_per_group + icl;
                float* gi = gx + (b * g.in_c + ic) * in_plane;
                const float* wk = w + (oc * g.in_per_group + icl) * g.k * g.k;
                for (std::int64_t ky = 0; ky < g.k; ++ky) {
                    for (std::int64_t kx = 0; kx < g.k; ++kx) {
                        const float wv = wk[ky * g.k + kx];
                        const std::int64_t lo = g.ox_begin(kx);
                        const std::int64_t hi = g.ox_end(kx);
                        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                            const std::int64_t iy = oy * g.stride - g.pad + ky;
                            if (iy < 0 || iy >= g.in_h) continue;
                            float* irow = gi + iy * g.in_w - g.pad + kx;
                            const float* grow = go + oy * g.out_w;
                            for (std::int64_t ox = lo; ox < hi; ++ox) irow[ox * g.stride] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
}

void conv_backward_weight(const ConvGeometry& g, const float* x, const float* gout, float* gw, float* gb) {
    const std::int64_t in_plane = g.in_h * g.in_w;
    const std::int64_t out_plane = g.out_h * g.out_w;
    const std::int64_t cost = g.n * g.out_c * out_plane * g.in_per_group * g.k * g.k;
    parallel_for(g.out_c, cost, [&](std::int64_t oc) {
        const std::int64_t group = oc / g.out_per_group;
        for (std::int64_t b = 0; b < g.n; ++b) {
            const float* go = gout + (b * g.out_c + oc) * out_plane;
            if (gb) {
                double s = 0.0;
                for (std::int64_t i = 0; i < out_plane; ++i) s += go[i];
                gb[oc] += static_cast<float>(s);
            }
            if (!gw) continue;
            for (std::int64_t icl = 0; icl < g.in_per_group; ++icl) {
                const std::int64_t ic = group * g.in_per_group + icl;
                const float* in = x + (b * g.in_c + ic) * in_plane;
                float* gk = gw + (oc * g.in_per_group + icl) * g.k * g.k;
                for (std::int64_t ky = 0; ky < g.k; ++ky) {
                    for (std::int64_t kx = 0; kx < g.k; ++kx) {
                        const std::int64_t lo = g.ox_begin(kx);
                        const std::int64_t hi = g.ox_end(kx);
                        float acc = 0.0f;
                        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                            const std::int64_t iy = oy * g.stride - g.pad + ky;
                            if (iy < 0 || iy >= g.in_h) continue;
                            const float* irow = in + iy * g.in_w - g.pad + kx;
                            const float* grow = go + oy * g.out_w;
                            for (std::int64_t ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[ox * g.stride];
                        }
                        gk[ky * g.k + kx] += acc;
                    }
                }
            }
        }
    });
}

void check_channel_vector(const Tensor& t, std::int64_t c, const char* op, const char* what) {
    if (!t.defined() || t.numel() != c) {
        throw ShapeError(fmt::format("{}: {} must hold {} values", op, what, c));
    }
}

// Shared index map. `forward` moves data from the unshuffled layout (src
// of shape (n, c, h*r, w*r)) into the shuffled-down layout, or back.
void unshuffle_copy(const Shape& big, int r, const float* src, float* dst, bool to_small, bool accumulate) {
    const std::int64_t oh = big.h / r;
    const std::int64_t ow = big.w / r;
    const std::int64_t rr = static_cast<std::int64_t>(r) * r;
    for (std::int64_t b = 0; b < big.n; ++b) {
        for (std::int64_t c = 0; c < big.c; ++c) {
            for (std::int64_t dy = 0; dy < r; ++dy) {
                for (std::int64_t dx = 0; dx < r; ++dx) {
                    const std::int64_t oc = c * rr + dy * r + dx;
                    for (std::int64_t y = 0; y < oh; ++y) {
                        for (std::int64_t x = 0; x < ow; ++x) {
                            const std::int64_t bi = ((b * big.c + c) * big.h + y * r + dy) * big.w + x * r + dx;
                            const std::int64_t si = ((b * big.c * rr + oc) * oh + y) * ow + x;
                            const std::int64_t from = to_small ? bi : si;
                            const std::int64_t to = to_small ? si : bi;
                            if (accumulate) {
                                dst[to] += src[from];
                            } else {
                                dst[to] = src[from];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

MacCounter::MacCounter() : previous_(g_mac_counter) { g_mac_counter = this; }
MacCounter::~MacCounter() { g_mac_counter = previous_; }
MacCounter* MacCounter::active() { return g_mac_counter; }

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
    const ConvGeometry g = conv_geometry(x, p);
    Tensor out(Shape{g.n, g.out_c, g.out_h, g.out_w});
    conv_forward(g, x.data().data(), p.weight.data().data(), p.bias.defined() ? p.bias.data().data() : nullptr,
                 out.data().data());

    if (auto* counter = MacCounter::active()) {
        const std::int64_t per_output = g.in_per_group * g.k * g.k;
        for (std::int64_t i = 0; i < out.numel(); ++i) counter->add(per_output);
    }

    if (Tape::should_record({&x, &p.weight, &p.bias})) {
        std::vector<Tensor> inputs{x, p.weight};
        if (p.bias.defined()) inputs.push_back(p.bias);
        Tape::current().record("conv2d", inputs, out,
                               [g, x, w = p.weight, b = p.bias](std::span<const float> gout) mutable {
                                   if (x.requires_grad()) {
                                       conv_backward_input(g, w.data().data(), gout.data(), x.grad_buffer().data());
                                   }
                                   float* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
                                   float* gb = (b.defined() && b.requires_grad()) ? b.grad_buffer().data() : nullptr;
                                   if (gw || gb) conv_backward_weight(g, x.data().data(), gout.data(), gw, gb);
                               });
    }
    return out;
}

Tensor pointwise_conv(const Tensor& x, const Conv2dParams& p) {
    if (p.weight.defined() && p.weight.shape().h != 1) {
        throw ShapeError("pointwise_conv: kernel must be 1x1");
    }
    if (p.stride != 1 || p.padding != 0 || p.groups != 1) {
        throw ShapeError("pointwise_conv: stride 1, padding 0, groups 1 required");
    }
    return conv2d(x, p);
}

Tensor depthwise_conv(const Tensor& x, const Conv2dParams& p) {
    if (p.groups != x.shape().c || p.out_channels() != x.shape().c) {
        throw ShapeError(fmt::format("depthwise_conv: groups {} and out_c {} must equal channels {}", p.groups,
                                     p.out_channels(), x.shape().c));
    }
    return conv2d(x, p);
}

Tensor separable_conv(const Tensor& x, const SeparableConvParams& p) {
    return pointwise_conv(depthwise_conv(x, p.depthwise), p.pointwise);
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
    const Shape& s = x.shape();
    if (r < 1 || s.h % r != 0 || s.w % r != 0) {
        throw ShapeError(fmt::format("pixel_unshuffle: {} not divisible by r={}", s.str(), r));
    }
    Tensor out(Shape{s.n, s.c * r * r, s.h / r, s.w / r});
    unshuffle_copy(s, r, x.data().data(), out.data().data(), true, false);
    if (Tape::should_record({&x})) {
        Tape::current().record("pixel_unshuffle", {x}, out, [x, r](std::span<const float> g) mutable {
            unshuffle_copy(x.shape(), r, g.data(), x.grad_buffer().data(), false, true);
        });
    }
    return out;
}

Tensor pixel_shuffle(const Tensor& x, int r) {
    const Shape& s = x.shape();
    if (r < 1 || s.c % (static_cast<std::int64_t>(r) * r) != 0) {
        throw ShapeError(fmt::format("pixel_shuffle: channels of {} not divisible by r^2={}", s.str(), r * r));
    }
    const Shape big{s.n, s.c / (r * r), s.h * r, s.w * r};
    Tensor out(big);
    unshuffle_copy(big, r, x.data().data(), out.data().data(), false, false);
    if (Tape::should_record({&x})) {
        Tape::current().record("pixel_shuffle", {x}, out, [x, big, r](std::span<const float> g) mutable {
            unshuffle_copy(big, r, g.data(), x.grad_buffer().data(), true, true);
        });
    }
    return out;
}

Tensor layer_norm_channelwise(const Tensor& x, const NormParams& p) {
    const Shape s = x.shape();
    check_channel_vector(p.gamma, s.c, "layer_norm_channelwise", "gamma");
    check_channel_vector(p.beta, s.c, "layer_norm_channelwise", "beta");
    if (!(p.epsilon > 0.0f)) {
        throw ShapeError("layer_norm_channelwise: epsilon must be positive");
    }
    const std::int64_t plane = s.plane();
    Tensor out(s);
    std::vector<float> xhat(static_cast<std::size_t>(s.numel()));
    std::vector<float> inv_std(static_cast<std::size_t>(s.n * plane));
    auto in = x.data();
    auto o = out.data();
    auto gamma = p.gamma.data();
    auto beta = p.beta.data();
    for (std::int64_t b = 0; b < s.n; ++b) {
        for (std::int64_t i = 0; i < plane; ++i) {
            const std::int64_t base = b * s.c * plane + i;
            double m = 0.0;
            for (std::int64_t c = 0; c < s.c; ++c) m += in[base + c * plane];
            m /= static_cast<double>(s.c);
            double v = 0.0;
            for (std::int64_t c = 0; c < s.c; ++c) {
                const double d = in[base + c * plane] - m;
                v += d * d;
            }
            v /= static_cast<double>(s.c);
            const double rstd = 1.0 / std::sqrt(v + p.epsilon);
            inv_std[b * plane + i] = static_cast<float>(rstd);
            for (std::int64_t c = 0; c < s.c; ++c) {
                const std::int64_t idx = base + c * plane;
                const double xh = (in[idx] - m) * rstd;
                xhat[idx] = static_cast<float>(xh);
                o[idx] = static_cast<float>(gamma[c] * xh + beta[c]);
            }
        }
    }
    if (Tape::should_record({&x, &p.gamma, &p.beta})) {
        Tape::current().record(
            "layer_norm_channelwise", {x, p.gamma, p.beta}, out,
            [x, gm = p.gamma, bt = p.beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                std::span<const float> g) mutable {
                const Shape& s = x.shape();
                const std::int64_t plane = s.plane();
                auto gamma = gm.data();
                float* gg = gm.requires_grad() ? gm.grad_buffer().data() : nullptr;
                float* gbeta = bt.requires_grad() ? bt.grad_buffer().data() : nullptr;
                float* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
                for (std::int64_t b = 0; b < s.n; ++b) {
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const std::int64_t base = b * s.c * plane + i;
                        double mean_d = 0.0;
                        double mean_dx = 0.0;
                        for (std::int64_t c = 0; c < s.c; ++c) {
                            const std::int64_t idx = base + c * plane;
                            const double d = static_cast<double>(g[idx]) * gamma[c];
                            mean_d += d;
                            mean_dx += d * xhat[idx];
                            if (gg) gg[c] += g[idx] * xhat[idx];
                            if (gbeta) gbeta[c] += g[idx];
                        }
                        if (!gx) continue;
                        mean_d /= static_cast<double>(s.c);
                        mean_dx /= static_cast<double>(s.c);
                        const float rstd = inv_std[b * plane + i];
                        for (std::int64_t c = 0; c < s.c; ++c) {
                            const std::int64_t idx = base + c * plane;
                            const double d = static_cast<double>(g[idx]) * gamma[c];
                            gx[idx] += static_cast<float>(rstd * (d - mean_d - xhat[idx] * mean_dx));
                        }
                    }
                }
            });
    }
    return out;
}

Tensor grn(const Tensor& x, const GrnParams& p) {
    const Shape s = x.shape();
    check_channel_vector(p.gamma, s.c, "grn", "gamma");
    check_channel_vector(p.beta, s.c, "grn", "beta");
    const std::int64_t plane = s.plane();
    auto in = x.data();
    auto gamma = p.gamma.data();
    auto beta = p.beta.data();
    Tensor out(s);
    auto o = out.data();
    // Per (b, c): channel L2 norm and its normalized response.
    std::vector<double> norms(static_cast<std::size_t>(s.n * s.c));
    std::vector<double> mean_norm(static_cast<std::size_t>(s.n));
    for (std::int64_t b = 0; b < s.n; ++b) {
        double total = 0.0;
        for (std::int64_t c = 0; c < s.c; ++c) {
            const float* xc = in.data() + (b * s.c + c) * plane;
            double sq = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) sq += static_cast<double>(xc[i]) * xc[i];
            norms[b * s.c + c] = std::sqrt(sq);
            total += norms[b * s.c + c];
        }
        mean_norm[b] = total / static_cast<double>(s.c);
        for (std::int64_t c = 0; c < s.c; ++c) {
            const double scale_c = gamma[c] * norms[b * s.c + c] / (mean_norm[b] + p.epsilon) + 1.0;
            const float* xc = in.data() + (b * s.c + c) * plane;
            float* oc = o.data() + (b * s.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) oc[i] = static_cast<float>(scale_c * xc[i] + beta[c]);
        }
    }
    if (Tape::should_record({&x, &p.gamma, &p.beta})) {
        Tape::current().record(
            "grn", {x, p.gamma, p.beta}, out,
            [x, gm = p.gamma, bt = p.beta, eps = static_cast<double>(p.epsilon), norms = std::move(norms),
             mean_norm = std::move(mean_norm)](std::span<const float> g) mutable {
                const Shape& s = x.shape();
                const std::int64_t plane = s.plane();
                auto in = x.data();
                auto gamma = gm.data();
                float* gg = gm.requires_grad() ? gm.grad_buffer().data() : nullptr;
                float* gbeta = bt.requires_grad() ? bt.grad_buffer().data() : nullptr;
                float* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
                std::vector<double> d_response(static_cast<std::size_t>(s.c));
                for (std::int64_t b = 0; b < s.n; ++b) {
                    const double denom = mean_norm[b] + eps;
                    double weighted = 0.0;
                    for (std::int64_t c = 0; c < s.c; ++c) {
                        const float* xc = in.data() + (b * s.c + c) * plane;
                        const float* gc = g.data() + (b * s.c + c) * plane;
                        double gx_dot = 0.0;
                        double gsum = 0.0;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            gx_dot += static_cast<double>(gc[i]) * xc[i];
                            gsum += gc[i];
                        }
                        const double response = norms[b * s.c + c] / denom;
                        if (gg) gg[c] += static_cast<float>(gx_dot * response);
                        if (gbeta) gbeta[c] += static_cast<float>(gsum);
                        d_response[c] = gx_dot * gamma[c];
                        weighted += d_response[c] * norms[b * s.c + c];
                    }
                    if (!gx) continue;
                    const double shared = weighted / (static_cast<double>(s.c) * denom * denom);
                    for (std::int64_t c = 0; c < s.c; ++c) {
                        const double norm = norms[b * s.c + c];
                        const double d_norm = d_response[c] / denom - shared;
                        const double response = norm / denom;
                        const double through_norm = norm > 0.0 ? d_norm / norm : 0.0;
                        const float* xc = in.data() + (b * s.c + c) * plane;
                        const float* gc = g.data() + (b * s.c + c) * plane;
                        float* gxc = gx + (b * s.c + c) * plane;
                        const double direct = gamma[c] * response + 1.0;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            gxc[i] += static_cast<float>(gc[i] * direct + through_norm * xc[i]);
                        }
                    }
                }
            });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    auto in = x.data();
    auto o = out.data();
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = in[i];
        o[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    if (Tape::should_record({&x})) {
        Tape::current().record("gelu", {x}, out, [x](std::span<const float> g) mutable {
            auto in = x.data();
            auto gx = x.grad_buffer();
            const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
            const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = in[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += static_cast<float>(g[i] * (cdf + v * pdf));
            }
        });
    }
    return out;
}

Tensor convnext_v2_block(const Tensor& x, const ConvNeXtV2Params& p) {
    Tensor h = depthwise_conv(x, p.depthwise);
    h = layer_norm_channelwise(h, p.norm);
    h = pointwise_conv(h, p.expand);
    h = gelu(h);
    h = grn(h, p.grn);
    h = pointwise_conv(h, p.project);
    return add(x, h);
}

}  // namespace unetmm
