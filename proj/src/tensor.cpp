#include "unetmm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>

#include <fmt/core.h>

namespace unetmm {

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty when absent
    bool requires_grad = false;
    bool is_leaf = true;
};

}  // namespace detail

std::int64_t Shape::numel() const {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
        throw ShapeError(fmt::format("invalid shape {}: every extent must be >= 1", str()));
    }
    constexpr std::int64_t limit =
        static_cast<std::int64_t>(std::numeric_limits<std::ptrdiff_t>::max() / sizeof(float));
    std::int64_t total = 1;
    for (std::int64_t e : {n, c, h, w}) {
        if (__builtin_mul_overflow(total, e, &total) || total > limit) {
            throw SizeError(fmt::format("shape {} exceeds the addressable element count", str()));
        }
    }
    return total;
}

std::string Shape::str() const { return fmt::format("({},{},{},{})", n, c, h, w); }

Tensor::Tensor(const Shape& shape, float fill) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->shape = shape;
    impl_->data.assign(static_cast<std::size_t>(shape.numel()), fill);
}

Tensor::Tensor(const Shape& shape, std::vector<float> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
        throw ShapeError(fmt::format("{} values do not fill shape {}", values.size(), shape.str()));
    }
    impl_->shape = shape;
    impl_->data = std::move(values);
}

detail::TensorImpl& Tensor::impl() const {
    if (!impl_) {
        throw ContractError("use of an undefined tensor");
    }
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl().data.size()); }
std::span<const float> Tensor::data() const { return impl().data; }
std::span<float> Tensor::data() { return impl().data; }

float Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError(fmt::format("item() on tensor of shape {}", shape().str()));
    }
    return impl().data[0];
}

float Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const Shape& s = shape();
    return impl().data[static_cast<std::size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

float& Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    const Shape& s = shape();
    return impl().data[static_cast<std::size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    impl().requires_grad = on;
    return *this;
}

bool Tensor::is_leaf() const { return impl().is_leaf; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl().grad; }

std::span<float> Tensor::grad_buffer() const {
    auto& i = impl();
    if (i.grad.empty()) {
        i.grad.assign(i.data.size(), 0.0f);
    }
    return i.grad;
}

void Tensor::zero_grad() {
    auto& g = impl().grad;
    std::fill(g.begin(), g.end(), 0.0f);
}

void Tensor::clear_grad() {
    impl().grad.clear();
    impl().grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
    Tensor out(shape());
    std::copy(impl().data.begin(), impl().data.end(), out.impl_->data.begin());
    return out;
}

Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0f); }
Tensor full(const Shape& shape, float value) { return Tensor(shape, value); }
Tensor scalar(float value) { return Tensor(Shape{1, 1, 1, 1}, value); }

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t != nullptr && t->requires_grad(); });
}

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor& output,
                  BackwardFn backward) {
    output.impl().requires_grad = true;
    output.impl().is_leaf = false;
    nodes_.push_back(Node{std::string(op), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.shape() != Shape{1, 1, 1, 1}) {
        throw ContractError(fmt::format("backward() needs a scalar loss, got shape {}", loss.shape().str()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward() on a loss that does not depend on any tracked tensor");
    }
    if (loss.is_leaf()) {
        Tensor l = loss;
        l.grad_buffer()[0] += 1.0f;
        return;
    }

    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [&](const Node& n) { return n.output.same_storage(loss); });
    if (it == nodes_.rend()) {
        throw ContractError("backward() on a loss that was not recorded on this thread's tape");
    }

    // Intermediate gradients start from zero on every call; leaves accumulate.
    for (auto& node : nodes_) {
        node.output.clear_grad();
    }
    it->output.grad_buffer()[0] = 1.0f;

    for (; it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) {
            continue;
        }
        it->backward(it->output.grad());
    }
    nodes_.clear();
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

bool is_scalar(const Tensor& t) { return t.numel() == 1; }

void check_binary(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape() && !is_scalar(b)) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape().str(), b.shape().str()));
    }
}

template <typename F>
Tensor binary_forward(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.shape());
    auto x = a.data();
    auto y = b.data();
    auto o = out.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
    } else {
        const float s = y[0];
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], s);
    }
    return out;
}

// Reduces a gradient onto `b`, summing when b was broadcast from a scalar.
void accumulate_b(const Tensor& b, std::span<const float> g, const Tensor& a, float sign) {
    auto gb = b.grad_buffer();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
    } else {
        double s = 0.0;
        for (float v : g) s += v;
        gb[0] += sign * static_cast<float>(s);
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_binary(a, b, "add");
    Tensor out = binary_forward(a, b, [](float x, float y) { return x + y; });
    if (Tape::should_record({&a, &b})) {
        Tape::current().record("add", {a, b}, out, [a, b](std::span<const float> g) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) accumulate_b(b, g, a, 1.0f);
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_binary(a, b, "sub");
    Tensor out = binary_forward(a, b, [](float x, float y) { return x - y; });
    if (Tape::should_record({&a, &b})) {
        Tape::current().record("sub", {a, b}, out, [a, b](std::span<const float> g) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) accumulate_b(b, g, a, -1.0f);
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_binary(a, b, "mul");
    Tensor out = binary_forward(a, b, [](float x, float y) { return x * y; });
    if (Tape::should_record({&a, &b})) {
        Tape::current().record("mul", {a, b}, out, [a, b](std::span<const float> g) mutable {
            auto x = a.data();
            auto y = b.data();
            const bool bcast = a.shape() != b.shape();
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[bcast ? 0 : i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                if (!bcast) {
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                } else {
                    double s = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) s += static_cast<double>(g[i]) * x[i];
                    gb[0] += static_cast<float>(s);
                }
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, float factor) {
    Tensor out(x.shape());
    auto in = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * factor;
    if (Tape::should_record({&x})) {
        Tape::current().record("scale", {x}, out, [x, factor](std::span<const float> g) mutable {
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
        });
    }
    return out;
}

Tensor log(const Tensor& x) {
    Tensor out(x.shape());
    auto in = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (!(in[i] > 0.0f)) {
            throw NumericError(fmt::format("log of non-positive value {}", in[i]));
        }
        o[i] = std::log(in[i]);
    }
    if (Tape::should_record({&x})) {
        Tape::current().record("log", {x}, out, [x](std::span<const float> g) mutable {
            auto in = x.data();
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / in[i];
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    Tensor out = scalar(static_cast<float>(s));
    if (Tape::should_record({&x})) {
        Tape::current().record("sum", {x}, out, [x](std::span<const float> g) mutable {
            auto gx = x.grad_buffer();
            for (float& v : gx) v += g[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    const auto count = static_cast<double>(x.numel());
    Tensor out = scalar(static_cast<float>(s / count));
    if (Tape::should_record({&x})) {
        Tape::current().record("mean", {x}, out, [x, count](std::span<const float> g) mutable {
            auto gx = x.grad_buffer();
            const auto share = static_cast<float>(g[0] / count);
            for (float& v : gx) v += share;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel concatenation

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ArityError("concat_channels: empty part list");
    }
    const Shape& first = parts.front().shape();
    std::int64_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError(fmt::format("concat_channels: {} incompatible with {}", s.str(), first.str()));
        }
        channels += s.c;
    }
    Shape os{first.n, channels, first.h, first.w};
    Tensor out(os);
    const std::int64_t plane = first.plane();
    auto o = out.data();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t block = p.shape().c * plane;
        auto in = p.data();
        for (std::int64_t b = 0; b < os.n; ++b) {
            std::copy_n(in.begin() + b * block, block, o.begin() + b * os.c * plane + offset * plane);
        }
        offset += p.shape().c;
    }

    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any && grad_enabled()) {
        Tape::current().record("concat_channels", parts, out, [parts, os](std::span<const float> g) mutable {
            const std::int64_t plane = os.h * os.w;
            std::int64_t offset = 0;
            for (auto& p : parts) {
                const std::int64_t block = p.shape().c * plane;
                if (p.requires_grad()) {
                    auto gp = p.grad_buffer();
                    for (std::int64_t b = 0; b < os.n; ++b) {
                        const float* src = g.data() + b * os.c * plane + offset * plane;
                        float* dst = gp.data() + b * block;
                        for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                }
                offset += p.shape().c;
            }
        });
    }
    return out;
}

std::vector<Tensor> split_channels(const Tensor& x, const std::vector<std::int64_t>& sizes) {
    if (sizes.empty()) {
        throw ArityError("split_channels: empty size list");
    }
    const Shape& s = x.shape();
    std::int64_t total = 0;
    for (auto c : sizes) {
        if (c < 1) throw ShapeError("split_channels: sizes must be positive");
        total += c;
    }
    if (total != s.c) {
        throw ShapeError(fmt::format("split_channels: sizes sum to {} but tensor has {} channels", total, s.c));
    }
    const std::int64_t plane = s.plane();
    std::vector<Tensor> outs;
    std::int64_t offset = 0;
    for (auto c : sizes) {
        Tensor part(Shape{s.n, c, s.h, s.w});
        auto in = x.data();
        auto o = part.data();
        for (std::int64_t b = 0; b < s.n; ++b) {
            std::copy_n(in.begin() + (b * s.c + offset) * plane, c * plane, o.begin() + b * c * plane);
        }
        if (Tape::should_record({&x})) {
            Tape::current().record("split_channels", {x}, part,
                                   [x, offset, c](std::span<const float> g) mutable {
                                       const Shape& s = x.shape();
                                       const std::int64_t plane = s.plane();
                                       auto gx = x.grad_buffer();
                                       for (std::int64_t b = 0; b < s.n; ++b) {
                                           float* dst = gx.data() + (b * s.c + offset) * plane;
                                           const float* src = g.data() + b * c * plane;
                                           for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                       }
                                   });
        }
        outs.push_back(std::move(part));
        offset += c;
    }
    return outs;
}

}  // namespace unetmm
