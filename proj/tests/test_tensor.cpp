#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "unetmm/tensor.hpp"
#include "unetmm/tnsr_io.hpp"

using namespace unetmm;

TEST_CASE("shape validation") {
    CHECK_THROWS_AS(Shape({1, 0, 2, 2}).numel(), ShapeError);
    CHECK_THROWS_AS(Shape({-1, 1, 1, 1}).numel(), ShapeError);
    CHECK_THROWS_AS(Shape({1 << 30, 1 << 30, 1 << 30, 1 << 30}).numel(), SizeError);
    CHECK(Shape{2, 3, 4, 5}.numel() == 120);
    CHECK_THROWS_AS(Tensor(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST_CASE("tensor copies share storage, clone does not") {
    Tensor a(Shape{1, 1, 1, 3}, 1.0f);
    Tensor b = a;
    b.data()[0] = 5.0f;
    CHECK(a.data()[0] == 5.0f);
    Tensor c = a.clone();
    c.data()[1] = 9.0f;
    CHECK(a.data()[1] == 1.0f);
    CHECK_FALSE(c.same_storage(a));
}

TEST_CASE("product rule and broadcast gradients") {
    Tensor a(Shape{1, 1, 1, 3}, std::vector<float>{1, 2, 3});
    Tensor s = scalar(2.0f);
    a.set_requires_grad(true);
    s.set_requires_grad(true);
    backward(sum(mul(mul(a, a), s)));
    // d/da sum(s a^2) = 2 s a, d/ds = sum a^2
    CHECK(a.grad()[0] == doctest::Approx(4.0));
    CHECK(a.grad()[2] == doctest::Approx(12.0));
    CHECK(s.grad()[0] == doctest::Approx(14.0));
}

TEST_CASE("leaf gradients accumulate across backward calls until zeroed") {
    Tensor a(Shape{1, 1, 1, 2}, std::vector<float>{1, -1});
    a.set_requires_grad(true);
    backward(sum(scale(a, 3.0f)));
    backward(sum(scale(a, 3.0f)));
    CHECK(a.grad()[0] == doctest::Approx(6.0));
    a.zero_grad();
    CHECK(a.grad()[1] == 0.0f);
    CHECK(Tape::current().size() == 0);
}

TEST_CASE("no-grad guard stops recording") {
    Tensor a(Shape{1, 1, 1, 2}, 1.0f);
    a.set_requires_grad(true);
    {
        NoGradGuard g;
        CHECK_FALSE(grad_enabled());
        Tensor y = add(a, a);
        CHECK_FALSE(y.requires_grad());
        CHECK(Tape::current().size() == 0);
    }
    CHECK(grad_enabled());
}

TEST_CASE("backward preconditions") {
    Tensor a(Shape{1, 1, 1, 2}, 1.0f);
    a.set_requires_grad(true);
    Tensor y = scale(a, 2.0f);
    CHECK_THROWS_AS(backward(y), ContractError);
    Tape::current().clear();
    CHECK_THROWS_AS(backward(scalar(1.0f)), ContractError);
}

TEST_CASE("elementwise shape mismatch and domain errors") {
    Tensor a(Shape{1, 2, 2, 2}, 1.0f);
    Tensor b(Shape{1, 1, 2, 2}, 1.0f);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(unetmm::log(full(Shape{1, 1, 1, 1}, -1.0f)), NumericError);
}

TEST_CASE("concat and split are inverse") {
    std::mt19937_64 rng(3);
    Tensor a = oracle::random(rng, Shape{2, 3, 4, 5});
    Tensor b = oracle::random(rng, Shape{2, 1, 4, 5});
    Tensor c = concat_channels({a, b});
    CHECK(c.shape() == Shape{2, 4, 4, 5});
    CHECK(c.at(1, 3, 2, 2) == b.at(1, 0, 2, 2));
    auto parts = split_channels(c, {3, 1});
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(parts[0].data()[i] == a.data()[i]);
    CHECK_THROWS_AS(split_channels(c, {2, 1}), ShapeError);
    CHECK_THROWS_AS(concat_channels({}), ArityError);
    CHECK_THROWS_AS(concat_channels({a, Tensor(Shape{2, 1, 4, 4})}), ShapeError);
}

TEST_CASE("TNSR round trip is bit exact") {
    std::mt19937_64 rng(11);
    Tensor t = oracle::random(rng, Shape{2, 3, 5, 7});
    t.data()[4] = -0.0f;
    t.data()[5] = 1e-40f;  // subnormal
    const auto bytes = encode_tnsr(t);
    CHECK(bytes.size() == kTnsrHeaderBytes + 4 * 210);
    CHECK(bytes[0] == 'T');
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 2);  // n, little endian
    const Tensor back = decode_tnsr(bytes);
    CHECK(back.shape() == t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        CHECK(std::signbit(back.data()[i]) == std::signbit(t.data()[i]));
        CHECK(back.data()[i] == t.data()[i]);
    }
}

TEST_CASE("TNSR rejects malformed input") {
    Tensor t(Shape{1, 1, 2, 2}, 1.0f);
    auto good = encode_tnsr(t);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_tnsr(bad_magic), FormatError);

    auto bad_version = good;
    bad_version[4] = 2;
    CHECK_THROWS_AS(decode_tnsr(bad_version), FormatError);

    auto truncated = good;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_tnsr(truncated), FormatError);

    auto zero_extent = good;
    zero_extent[5] = 0;
    CHECK_THROWS_AS(decode_tnsr(zero_extent), FormatError);

    CHECK_THROWS_AS(decode_tnsr(std::span<const std::uint8_t>(good.data(), 3)), FormatError);
}
