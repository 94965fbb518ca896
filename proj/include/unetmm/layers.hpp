#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "unetmm/nn_ops.hpp"

namespace unetmm {

/// Named, ordered collection of trainable tensors.
class ParamStore {
public:
    /// Registers `t` under `name` and turns on gradient tracking.
    Tensor add(const std::string& name, Tensor t);

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    const Tensor* find(const std::string& name) const;
    std::int64_t element_count() const;
    void zero_grad();

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// Backbone block: 3x3 conv, channel norm, GELU, 3x3 conv, plus the input.
struct ResidualBlockParams {
    Conv2dParams conv1;
    NormParams norm;
    Conv2dParams conv2;
};

Tensor residual_block(const Tensor& x, const ResidualBlockParams& p);

/// Creates parameters with deterministic initial values and registers them.
///
/// Conv weights are uniform in +-1/sqrt(fan_in), conv biases and norm shifts
/// start at zero, norm scales at one, and GRN gamma/beta at zero so GRN starts
/// as the identity.
class ParamBuilder {
public:
    ParamBuilder(ParamStore& store, std::uint64_t seed, bool conv_bias = true)
        : store_(store), rng_(seed), conv_bias_(conv_bias) {}

    Conv2dParams conv(const std::string& name, std::int64_t in_c, std::int64_t out_c, int k, int stride = 1,
                      int padding = -1, int groups = 1);
    Conv2dParams pointwise(const std::string& name, std::int64_t in_c, std::int64_t out_c);
    Conv2dParams depthwise(const std::string& name, std::int64_t c, int k);
    NormParams norm(const std::string& name, std::int64_t c);
    GrnParams grn(const std::string& name, std::int64_t c);
    SeparableConvParams separable(const std::string& name, std::int64_t in_c, std::int64_t out_c, int k);
    ConvNeXtV2Params convnext(const std::string& name, std::int64_t c, int expand);
    ResidualBlockParams residual(const std::string& name, std::int64_t c);

private:
    Tensor uniform(const Shape& shape, float bound);

    ParamStore& store_;
    std::mt19937_64 rng_;
    bool conv_bias_;
};

}  // namespace unetmm
