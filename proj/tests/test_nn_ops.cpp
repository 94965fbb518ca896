#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "unetmm/nn_ops.hpp"

using namespace unetmm;

namespace {

struct ConvCase {
    Shape x;
    Shape w;
    int stride, pad, groups;
    bool bias;
};

void check_conv(const ConvCase& cc, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor x = oracle::random(rng, cc.x);
    Conv2dParams p{oracle::random(rng, cc.w), cc.bias ? oracle::random(rng, Shape{1, 1, 1, cc.w.n}) : Tensor(),
                   cc.stride, cc.pad, cc.groups};
    const Tensor y = conv2d(x, p);
    const auto ref = oracle::conv2d(x, p.weight, p.bias, cc.stride, cc.pad, cc.groups);
    REQUIRE(static_cast<std::size_t>(y.numel()) == ref.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::fabs(y.data()[i] - ref[i])));
    }
    CHECK(worst <= 1e-5);
}

}  // namespace

TEST_CASE("conv2d matches the six-loop oracle") {
    const ConvCase cases[] = {
        {{1, 3, 8, 8}, {4, 3, 3, 3}, 1, 1, 1, true},
        {{2, 4, 9, 7}, {6, 4, 3, 3}, 2, 1, 1, true},
        {{1, 4, 8, 8}, {4, 2, 3, 3}, 1, 1, 2, false},
        {{1, 5, 10, 10}, {5, 1, 7, 7}, 1, 3, 5, true},
        {{1, 3, 6, 6}, {2, 3, 1, 1}, 1, 0, 1, true},
        {{1, 2, 9, 9}, {3, 2, 5, 5}, 1, 0, 1, true},
        {{2, 8, 16, 16}, {8, 8, 2, 2}, 2, 0, 1, false},
    };
    std::uint64_t seed = 100;
    for (const auto& cc : cases) check_conv(cc, seed++);
}

TEST_CASE("conv2d shape contracts") {
    Tensor x(Shape{1, 4, 8, 8});
    CHECK_THROWS_AS(conv2d(x, Conv2dParams{Tensor(Shape{2, 3, 3, 3}), {}, 1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Conv2dParams{Tensor(Shape{3, 2, 3, 3}), {}, 1, 1, 2}), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Conv2dParams{Tensor(Shape{2, 4, 3, 2}), {}, 1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Conv2dParams{Tensor(Shape{2, 4, 3, 3}), Tensor(Shape{1, 1, 1, 3}), 1, 1, 1}),
                    ShapeError);
    CHECK_THROWS_AS(conv2d(x, Conv2dParams{Tensor(Shape{2, 4, 9, 9}), {}, 1, 0, 1}), ShapeError);
    CHECK_THROWS_AS(pointwise_conv(x, Conv2dParams{Tensor(Shape{2, 4, 3, 3}), {}, 1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(depthwise_conv(x, Conv2dParams{Tensor(Shape{4, 1, 3, 3}), {}, 1, 1, 1}), ShapeError);
}

TEST_CASE("MAC counter adds in_c/groups * k * k per output element") {
    Tensor x(Shape{2, 4, 8, 8}, 0.5f);
    MacCounter counter;
    conv2d(x, Conv2dParams{Tensor(Shape{6, 2, 3, 3}), {}, 2, 1, 2});
    CHECK(counter.count() == 2 * 6 * 4 * 4 * 2 * 9);
    {
        MacCounter inner;
        pointwise_conv(x, Conv2dParams{Tensor(Shape{3, 4, 1, 1}), {}, 1, 0, 1});
        CHECK(inner.count() == 2 * 3 * 64 * 4);
    }
    CHECK(MacCounter::active() == &counter);
}

TEST_CASE("pixel_unshuffle follows the documented index map") {
    std::mt19937_64 rng(5);
    const int r = 2;
    Tensor x = oracle::random(rng, Shape{2, 3, 4, 6});
    Tensor y = pixel_unshuffle(x, r);
    CHECK(y.shape() == Shape{2, 12, 2, 3});
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t yy = 0; yy < 2; ++yy)
                for (std::int64_t xx = 0; xx < 3; ++xx)
                    for (int dy = 0; dy < r; ++dy)
                        for (int dx = 0; dx < r; ++dx)
                            CHECK(y.at(b, c * r * r + dy * r + dx, yy, xx) == x.at(b, c, yy * r + dy, xx * r + dx));
    CHECK_THROWS_AS(pixel_unshuffle(x, 4), ShapeError);
    CHECK_THROWS_AS(pixel_shuffle(x, 2), ShapeError);
}

TEST_CASE("shuffle round trips for every factor") {
    std::mt19937_64 rng(6);
    for (int r : {1, 2, 4, 8}) {
        Tensor x = oracle::random(rng, Shape{1, 2, 8 * 2, 8});
        Tensor y = pixel_shuffle(pixel_unshuffle(x, r), r);
        Tensor z = pixel_unshuffle(pixel_shuffle(x, 1), 1);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            REQUIRE(y.data()[i] == x.data()[i]);
            REQUIRE(z.data()[i] == x.data()[i]);
        }
        Tensor deep = oracle::random(rng, Shape{1, 2 * r * r, 3, 2});
        Tensor back = pixel_unshuffle(pixel_shuffle(deep, r), r);
        for (std::int64_t i = 0; i < deep.numel(); ++i) REQUIRE(back.data()[i] == deep.data()[i]);
    }
}

TEST_CASE("channel layer norm normalizes every position") {
    std::mt19937_64 rng(7);
    Tensor x = oracle::random(rng, Shape{2, 5, 3, 3}, -3.0f, 3.0f);
    NormParams p{Tensor(Shape{1, 1, 1, 5}, 1.0f), Tensor(Shape{1, 1, 1, 5}, 0.0f)};
    Tensor y = layer_norm_channelwise(x, p);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t i = 0; i < 3; ++i)
            for (std::int64_t j = 0; j < 3; ++j) {
                long double m = 0, v = 0, ym = 0, yv = 0;
                for (std::int64_t c = 0; c < 5; ++c) m += x.at(b, c, i, j) / 5.0L;
                for (std::int64_t c = 0; c < 5; ++c) v += (x.at(b, c, i, j) - m) * (x.at(b, c, i, j) - m) / 5.0L;
                for (std::int64_t c = 0; c < 5; ++c) {
                    const long double expect = (x.at(b, c, i, j) - m) / std::sqrt(v + 1e-6L);
                    CHECK(std::fabs(y.at(b, c, i, j) - expect) <= 1e-5L);
                    ym += y.at(b, c, i, j) / 5.0L;
                }
                for (std::int64_t c = 0; c < 5; ++c) yv += (y.at(b, c, i, j) - ym) * (y.at(b, c, i, j) - ym) / 5.0L;
                CHECK(std::fabs(ym) <= 1e-6L);
                CHECK(std::fabs(yv - 1.0L) <= 1e-4L);
            }
}

TEST_CASE("GRN with zero affine is the identity, otherwise follows its formula") {
    std::mt19937_64 rng(8);
    Tensor x = oracle::random(rng, Shape{2, 3, 4, 4});
    GrnParams id{Tensor(Shape{1, 1, 1, 3}, 0.0f), Tensor(Shape{1, 1, 1, 3}, 0.0f)};
    Tensor y = grn(x, id);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

    GrnParams p{oracle::random(rng, Shape{1, 1, 1, 3}), oracle::random(rng, Shape{1, 1, 1, 3})};
    y = grn(x, p);
    for (std::int64_t b = 0; b < 2; ++b) {
        long double norms[3] = {0, 0, 0};
        for (std::int64_t c = 0; c < 3; ++c) {
            for (std::int64_t i = 0; i < 16; ++i) norms[c] += std::pow(static_cast<long double>(x.at(b, c, i / 4, i % 4)), 2);
            norms[c] = std::sqrt(norms[c]);
        }
        const long double mean_norm = (norms[0] + norms[1] + norms[2]) / 3;
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 16; ++i) {
                const long double xv = x.at(b, c, i / 4, i % 4);
                const long double expect =
                    p.gamma.data()[c] * xv * norms[c] / (mean_norm + 1e-6L) + p.beta.data()[c] + xv;
                CHECK(std::fabs(y.at(b, c, i / 4, i % 4) - expect) <= 1e-6L);
            }
    }
}

TEST_CASE("GELU is the exact erf form") {
    Tensor x(Shape{1, 1, 1, 7}, std::vector<float>{-6, -2, -0.5f, 0, 0.5f, 2, 6});
    Tensor y = gelu(x);
    for (std::int64_t i = 0; i < 7; ++i) CHECK(std::fabs(y.data()[i] - oracle::gelu(x.data()[i])) <= 1e-6L);
}

TEST_CASE("separable conv equals depthwise then pointwise") {
    std::mt19937_64 rng(9);
    Tensor x = oracle::random(rng, Shape{1, 4, 6, 6});
    SeparableConvParams p{{oracle::random(rng, Shape{4, 1, 3, 3}), oracle::random(rng, Shape{1, 1, 1, 4}), 1, 1, 4},
                          {oracle::random(rng, Shape{7, 4, 1, 1}), oracle::random(rng, Shape{1, 1, 1, 7}), 1, 0, 1}};
    Tensor a = separable_conv(x, p);
    Tensor b = pointwise_conv(depthwise_conv(x, p.depthwise), p.pointwise);
    CHECK(a.shape() == Shape{1, 7, 6, 6});
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("ConvNeXt V2 block keeps the input shape") {
    std::mt19937_64 rng(10);
    const std::int64_t c = 4, wide = 16;
    Tensor x = oracle::random(rng, Shape{2, c, 8, 8});
    ConvNeXtV2Params p{{oracle::random(rng, Shape{c, 1, 7, 7}), {}, 1, 3, static_cast<int>(c)},
                       {Tensor(Shape{1, 1, 1, c}, 1.0f), Tensor(Shape{1, 1, 1, c}, 0.0f)},
                       {oracle::random(rng, Shape{wide, c, 1, 1}), {}, 1, 0, 1},
                       {Tensor(Shape{1, 1, 1, wide}, 0.0f), Tensor(Shape{1, 1, 1, wide}, 0.0f)},
                       {Tensor(Shape{c, wide, 1, 1}, 0.0f), {}, 1, 0, 1}};
    Tensor y = convnext_v2_block(x, p);
    CHECK(y.shape() == x.shape());
    // A zero projection leaves only the residual path.
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}
