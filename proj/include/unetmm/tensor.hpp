#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unetmm/error.hpp"

namespace unetmm {

/// Extents of a dense NCHW array. Every extent must be at least 1.
struct Shape {
    std::int64_t n = 1;
    std::int64_t c = 1;
    std::int64_t h = 1;
    std::int64_t w = 1;

    /// Element count; throws SizeError if it does not fit in memory and
    /// ShapeError if any extent is below 1.
    std::int64_t numel() const;
    std::int64_t plane() const { return h * w; }
    std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

namespace detail {
struct TensorImpl;
}

/// Dense 32-bit NCHW tensor with optional gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets parameters receive gradients through the tape. Use clone() for an
/// independent deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(const Shape& shape, float fill = 0.0f);
    Tensor(const Shape& shape, std::vector<float> values);

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const;
    std::int64_t numel() const;

    std::span<const float> data() const;
    std::span<float> data();
    float item() const;
    float at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
    float& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    /// True if the tensor was produced by a recorded op rather than created directly.
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const float> grad() const;
    /// Gradient buffer, allocated as zeros on first access.
    std::span<float> grad_buffer() const;
    void zero_grad();
    void clear_grad();

    Tensor clone() const;
    Tensor detach() const { return clone(); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    detail::TensorImpl& impl() const;

    std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor zeros(const Shape& shape);
Tensor full(const Shape& shape, float value);
Tensor scalar(float value);

/// Receives the output gradient of a recorded op and accumulates into the
/// op's inputs through Tensor::grad_buffer().
using BackwardFn = std::function<void(std::span<const float> grad_out)>;

/// Per-thread record of differentiable ops, in creation order.
class Tape {
public:
    struct Node {
        std::string op;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };

    static Tape& current();

    /// True when grad mode is on and any input tracks gradients.
    static bool should_record(std::initializer_list<const Tensor*> inputs);
    /// Appends a node and marks `output` as a non-leaf that requires grad.
    void record(std::string_view op, std::vector<Tensor> inputs, Tensor& output, BackwardFn backward);

    void backward(const Tensor& loss);
    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    std::vector<Node> nodes_;
};

/// Disables recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Runs reverse accumulation from a scalar loss on the current thread's tape,
/// then clears the tape.
void backward(const Tensor& loss);

// Elementwise arithmetic. `b` must match `a` exactly or hold a single value.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat_channels(const std::vector<Tensor>& parts);
std::vector<Tensor> split_channels(const Tensor& x, const std::vector<std::int64_t>& sizes);

}  // namespace unetmm
