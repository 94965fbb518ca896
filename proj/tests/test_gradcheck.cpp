#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "unetmm/gradcheck.hpp"

using namespace unetmm;

namespace {

// y = 2x with a backward that claims dy/dx = 2.2.
Tensor wrong_double(const Tensor& x) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = 2.0f * x.data()[i];
    if (Tape::should_record({&x})) {
        Tape::current().record("wrong_double", {x}, out, [x](std::span<const float> g) {
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.2f * g[i];
        });
    }
    return out;
}

}  // namespace

TEST_CASE("hand gradients on tiny graphs") {
    Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    x.set_requires_grad(true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);
    Tensor y(Shape{1, 1, 1, 1}, 3.0f);
    y.set_requires_grad(true);
    backward(sum(mul(y, y)));
    CHECK(y.grad()[0] == 6.0f);
}

TEST_CASE("every op passes the finite-difference check") {
    const auto cases = default_op_cases(0);
    std::vector<std::string> names;
    for (const auto& c : cases) names.push_back(c.name);
    for (const char* op : {"add", "mul", "conv2d_3x3", "depthwise_conv", "pixel_shuffle", "layer_norm", "grn", "gelu",
                           "convnext_v2_block", "psnr_loss"}) {
        CHECK(std::find(names.begin(), names.end(), op) != names.end());
    }
    const GradReport r = run_gradcheck(cases, 0);
    for (const auto& res : r.results) {
        CAPTURE(res.name);
        CAPTURE(res.worst);
        CHECK(res.checked > 0);
        CHECK(res.max_rel_error <= 1e-3);
    }
    CHECK(r.passed());
    CHECK(r.warnings.empty());
}

TEST_CASE("a wrong backward is reported by name") {
    std::mt19937_64 rng(1);
    GradCase bad;
    bad.name = "wrong_double";
    bad.inputs = {oracle::random(rng, Shape{1, 2, 3, 3})};
    bad.fn = [](const std::vector<Tensor>& in) { return wrong_double(in[0]); };
    GradCase good;
    good.name = "scale";
    good.inputs = {oracle::random(rng, Shape{1, 2, 3, 3})};
    good.fn = [](const std::vector<Tensor>& in) { return scale(in[0], 2.0f); };

    const GradReport r = run_gradcheck({good, bad}, 0);
    CHECK_FALSE(r.passed());
    CHECK(r.failures() == std::vector<std::string>{"wrong_double"});
    CHECK(r.results[1].max_rel_error == doctest::Approx(0.2 / 2.2).epsilon(1e-3));
    CHECK(r.to_text().find("wrong_double") != std::string::npos);
    CHECK(r.to_text().find("FAIL") != std::string::npos);
}

TEST_CASE("an empty case list passes vacuously with a warning") {
    const GradReport r = run_gradcheck({}, 0);
    CHECK(r.passed());
    CHECK(r.results.empty());
    REQUIRE(r.warnings.size() == 1);
    CHECK(r.to_text().find(r.warnings[0]) != std::string::npos);
}

TEST_CASE("explicit probes restrict the check and restore inputs") {
    std::mt19937_64 rng(2);
    GradCase gc;
    gc.name = "gelu";
    gc.inputs = {oracle::random(rng, Shape{1, 1, 4, 4})};
    const Tensor before = gc.inputs[0].clone();
    gc.fn = [](const std::vector<Tensor>& in) { return gelu(in[0]); };
    gc.probes = {{0, 3}, {0, 7}};
    const GradResult r = check_gradient(gc, 0);
    CHECK(r.checked == 2);
    CHECK(r.passed());
    for (std::int64_t i = 0; i < before.numel(); ++i) CHECK(gc.inputs[0].data()[i] == before.data()[i]);
}

TEST_CASE("micro model end-to-end gradient") {
    const GradCase gc = end_to_end_case(ModelConfig::micro(), 0);
    CHECK(gc.probes.size() == 50);
    CHECK(gc.tolerance == 1e-2);
    const GradResult r = check_gradient(gc, 0);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error <= 1e-2);
}
