#include "unetmm/layers.hpp"

#include <cmath>

#include <fmt/core.h>

namespace unetmm {

Tensor ParamStore::add(const std::string& name, Tensor t) {
    if (find(name) != nullptr) {
        throw ContractError(fmt::format("duplicate parameter name '{}'", name));
    }
    t.set_requires_grad(true);
    entries_.emplace_back(name, t);
    return t;
}

const Tensor* ParamStore::find(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return &t;
    }
    return nullptr;
}

std::int64_t ParamStore::element_count() const {
    std::int64_t total = 0;
    for (const auto& e : entries_) total += e.second.numel();
    return total;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

Tensor residual_block(const Tensor& x, const ResidualBlockParams& p) {
    Tensor h = conv2d(x, p.conv1);
    h = layer_norm_channelwise(h, p.norm);
    h = gelu(h);
    h = conv2d(h, p.conv2);
    return add(x, h);
}

Tensor ParamBuilder::uniform(const Shape& shape, float bound) {
    Tensor t(shape);
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& v : t.data()) v = dist(rng_);
    return t;
}

Conv2dParams ParamBuilder::conv(const std::string& name, std::int64_t in_c, std::int64_t out_c, int k, int stride,
                                int padding, int groups) {
    if (in_c % groups != 0 || out_c % groups != 0) {
        throw ShapeError(fmt::format("{}: groups {} must divide {} and {}", name, groups, in_c, out_c));
    }
    Conv2dParams p;
    const std::int64_t fan_in = in_c / groups * k * k;
    const auto bound = static_cast<float>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    p.weight = store_.add(name + ".weight", uniform(Shape{out_c, in_c / groups, k, k}, bound));
    if (conv_bias_) {
        p.bias = store_.add(name + ".bias", zeros(Shape{1, out_c, 1, 1}));
    }
    p.stride = stride;
    p.padding = padding < 0 ? k / 2 : padding;
    p.groups = groups;
    return p;
}

Conv2dParams ParamBuilder::pointwise(const std::string& name, std::int64_t in_c, std::int64_t out_c) {
    return conv(name, in_c, out_c, 1, 1, 0, 1);
}

Conv2dParams ParamBuilder::depthwise(const std::string& name, std::int64_t c, int k) {
    return conv(name, c, c, k, 1, k / 2, static_cast<int>(c));
}

NormParams ParamBuilder::norm(const std::string& name, std::int64_t c) {
    NormParams p;
    p.gamma = store_.add(name + ".gamma", full(Shape{1, c, 1, 1}, 1.0f));
    p.beta = store_.add(name + ".beta", zeros(Shape{1, c, 1, 1}));
    return p;
}

GrnParams ParamBuilder::grn(const std::string& name, std::int64_t c) {
    GrnParams p;
    p.gamma = store_.add(name + ".gamma", zeros(Shape{1, c, 1, 1}));
    p.beta = store_.add(name + ".beta", zeros(Shape{1, c, 1, 1}));
    return p;
}

SeparableConvParams ParamBuilder::separable(const std::string& name, std::int64_t in_c, std::int64_t out_c, int k) {
    SeparableConvParams p;
    p.depthwise = depthwise(name + ".dw", in_c, k);
    p.pointwise = pointwise(name + ".pw", in_c, out_c);
    return p;
}

ConvNeXtV2Params ParamBuilder::convnext(const std::string& name, std::int64_t c, int expand) {
    ConvNeXtV2Params p;
    p.depthwise = depthwise(name + ".dw", c, 7);
    p.norm = norm(name + ".norm", c);
    p.expand = pointwise(name + ".pw1", c, c * expand);
    p.grn = grn(name + ".grn", c * expand);
    p.project = pointwise(name + ".pw2", c * expand, c);
    return p;
}

ResidualBlockParams ParamBuilder::residual(const std::string& name, std::int64_t c) {
    ResidualBlockParams p;
    p.conv1 = conv(name + ".conv1", c, c, 3);
    p.norm = norm(name + ".norm", c);
    p.conv2 = conv(name + ".conv2", c, c, 3);
    return p;
}

}  // namespace unetmm
