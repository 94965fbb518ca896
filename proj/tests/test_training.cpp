#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "unetmm/metrics.hpp"
#include "unetmm/training.hpp"

using namespace unetmm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("unetmm_test_" + name);
    fs::remove_all(p);
    return p;
}

TrainConfig quick() {
    TrainConfig t;
    t.iterations = 6;
    t.batch_size = 2;
    t.val_every = 3;
    t.val_count = 2;
    return t;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 1e-3, 1e-7) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(cosine_lr(100, 100, 1e-3, 1e-7) == doctest::Approx(1e-7).epsilon(1e-12));
    CHECK(cosine_lr(50, 100, 1e-3, 1e-7) == doctest::Approx((1e-3 + 1e-7) / 2).epsilon(1e-12));
    CHECK(cosine_lr(25, 100, 1.0, 0.0) == doctest::Approx((1 + std::cos(std::numbers::pi / 4)) / 2));
    CHECK(cosine_lr(150, 100, 1e-3, 1e-7) == cosine_lr(100, 100, 1e-3, 1e-7));
}

TEST_CASE("Adam matches the bias-corrected update written out by hand") {
    ParamStore store;
    Tensor p = store.add("p", Tensor(Shape{1, 1, 1, 3}, std::vector<float>{0.5f, -1.0f, 2.0f}));
    const double b1 = 0.9, b2 = 0.9, eps = 1e-8, lr = 0.01;
    Adam opt(store, b1, b2, eps);
    const double g1[] = {0.3, -0.2, 0.0};
    const double g2[] = {-0.1, 0.4, 0.0};
    double w[] = {0.5, -1.0, 2.0};
    double m[3] = {}, v[3] = {};
    for (int t = 1; t <= 2; ++t) {
        const double* g = t == 1 ? g1 : g2;
        p.zero_grad();
        for (int i = 0; i < 3; ++i) p.grad_buffer()[i] = static_cast<float>(g[i]);
        opt.step(lr);
        for (int i = 0; i < 3; ++i) {
            const double gi = static_cast<float>(g[i]);
            m[i] = b1 * m[i] + (1 - b1) * gi;
            v[i] = b2 * v[i] + (1 - b2) * gi * gi;
            const double mh = m[i] / (1 - std::pow(b1, t));
            const double vh = v[i] / (1 - std::pow(b2, t));
            w[i] -= lr * mh / (std::sqrt(vh) + eps);
            CHECK(std::fabs(p.data()[i] - w[i]) <= 1e-6);
            CHECK(std::fabs(opt.first_moment(0)[i] - m[i]) <= 1e-7);
            CHECK(std::fabs(opt.second_moment(0)[i] - v[i]) <= 1e-7);
        }
    }
    // A coordinate whose gradient stayed zero never moves.
    CHECK(p.data()[2] == 2.0f);
    CHECK(opt.steps() == 2);
}

TEST_CASE("Adam with zero learning rate leaves parameters unchanged") {
    ParamStore store;
    Tensor p = store.add("p", Tensor(Shape{1, 1, 1, 2}, 1.5f));
    Adam opt(store, 0.9, 0.9, 1e-8);
    p.grad_buffer()[0] = 3.0f;
    p.grad_buffer()[1] = -3.0f;
    opt.step(0.0);
    CHECK(p.data()[0] == 1.5f);
    CHECK(p.data()[1] == 1.5f);
}

TEST_CASE("Adam weight decay is folded into the gradient") {
    ParamStore store;
    Tensor p = store.add("p", Tensor(Shape{1, 1, 1, 1}, 2.0f));
    Adam opt(store, 0.9, 0.9, 0.0, 0.5);
    p.grad_buffer()[0] = 0.0f;
    opt.step(0.1);
    // g = 0 + 0.5 * 2 = 1, first step moves by exactly lr * sign(g).
    CHECK(p.data()[0] == doctest::Approx(1.9).epsilon(1e-6));
}

TEST_CASE("Adam names a parameter without gradient") {
    ParamStore store;
    store.add("alpha", Tensor(Shape{1, 1, 1, 1}, 1.0f));
    Adam opt(store, 0.9, 0.9, 1e-8);
    try {
        opt.step(0.1);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("alpha") != std::string::npos);
    }
}

TEST_CASE("additive noise has the requested standard deviation") {
    std::mt19937_64 rng(42);
    const Tensor clean(Shape{1, 1, 1000, 1000}, 0.5f);
    const double sigma = 0.1;
    const Tensor noisy = add_noise(clean, sigma, rng, false);
    long double s1 = 0, s2 = 0;
    for (std::int64_t i = 0; i < noisy.numel(); ++i) {
        const long double d = noisy.data()[i] - 0.5L;
        s1 += d;
        s2 += d * d;
    }
    const long double n = static_cast<long double>(noisy.numel());
    const double mean = static_cast<double>(s1 / n);
    const double sd = static_cast<double>(std::sqrt(s2 / n - (s1 / n) * (s1 / n)));
    // Standard error of the sample sd is sigma / sqrt(2n), about 7e-5 here.
    CHECK(std::fabs(sd - sigma) <= 5e-4);
    CHECK(std::fabs(mean) <= 5e-4);

    const Tensor clamped = add_noise(Tensor(Shape{1, 1, 64, 64}, 0.98f), 0.5, rng);
    for (float v : clamped.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("synthetic clean images stay inside their range and vary") {
    std::mt19937_64 rng(1);
    const Tensor a = synth_clean(rng, Shape{2, 3, 16, 16});
    const Tensor b = synth_clean(rng, Shape{2, 3, 16, 16});
    bool differ = false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.data()[i] >= 0.05f - 1e-6f);
        CHECK(a.data()[i] <= 0.95f + 1e-6f);
        differ = differ || a.data()[i] != b.data()[i];
    }
    CHECK(differ);
    std::mt19937_64 r1(9), r2(9);
    const SynthPair p1 = synth_pair(r1, Shape{1, 3, 8, 8}, 0.1);
    const SynthPair p2 = synth_pair(r2, Shape{1, 3, 8, 8}, 0.1);
    for (std::int64_t i = 0; i < p1.noisy.numel(); ++i) CHECK(p1.noisy.data()[i] == p2.noisy.data()[i]);
}

TEST_CASE("validation set is fixed by its seed") {
    TrainConfig t;
    t.val_count = 3;
    const auto a = validation_set(t, 3);
    const auto b = validation_set(t, 3);
    REQUIRE(a.size() == 3);
    CHECK(a[0].clean.shape() == Shape{1, 3, 16, 16});
    for (std::int64_t i = 0; i < a[2].noisy.numel(); ++i) CHECK(a[2].noisy.data()[i] == b[2].noisy.data()[i]);
}

TEST_CASE("psnr loss is negative psnr") {
    std::mt19937_64 rng(3);
    const Tensor a = oracle::random(rng, Shape{1, 3, 8, 8}, 0.0f, 1.0f);
    const Tensor b = oracle::random(rng, Shape{1, 3, 8, 8}, 0.0f, 1.0f);
    CHECK(psnr_loss(a, b).item() == doctest::Approx(-psnr(a, b)).epsilon(1e-5));
    Tape::current().clear();
}

TEST_CASE("train config validation") {
    TrainConfig t;
    t.lr_min = 1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.adam_beta2 = 1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.batch_size = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.noise_sigma = -0.1;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("training is reproducible and logs validation rows") {
    const ModelConfig m = ModelConfig::micro();
    int calls = 0;
    const TrainResult a = train(m, quick(), [&](const TrainState&, const HistoryRow*) { ++calls; });
    const TrainResult b = train(m, quick());
    CHECK(calls == 6);
    REQUIRE(a.history.size() == 2);
    CHECK(a.history[0].step == 3);
    CHECK(a.history[1].step == 6);
    CHECK(a.history == b.history);
    CHECK(a.state.step == 6);
    CHECK(a.state.optimizer->steps() == 6);
    CHECK(std::isfinite(a.history[1].val_psnr));
}

TEST_CASE("diverging training raises a numeric error") {
    TrainConfig t = quick();
    t.lr_init = 1e30;
    t.lr_min = 1e29;
    CHECK_THROWS_AS(train(ModelConfig::micro(), t), NumericError);
    CHECK(Tape::current().size() == 0);
}

TEST_CASE("history CSV round trip") {
    const std::vector<HistoryRow> rows{{50, 1e-3, -20.5, 21.25}, {100, 5.0000001e-4, -22.125, 22.0625}};
    const std::string csv = history_csv(rows);
    CHECK(csv.rfind("step,lr,train_loss,val_psnr\n", 0) == 0);
    CHECK(parse_history_csv(csv) == rows);
    CHECK_THROWS(parse_history_csv("step,loss\n1,2\n"));
}

TEST_CASE("checkpoint round trip and mismatch report") {
    const fs::path dir = scratch("ckpt");
    UNet a(ModelConfig::micro(), 1);
    save_checkpoint(dir, a.params());
    CHECK(fs::exists(dir / "manifest.csv"));

    UNet b(ModelConfig::micro(), 2);
    load_checkpoint(dir, b.params());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const Tensor& x = a.params().entries()[i].second;
        const Tensor& y = b.params().entries()[i].second;
        for (std::int64_t j = 0; j < x.numel(); ++j) REQUIRE(x.data()[j] == y.data()[j]);
    }

    ModelConfig wider = ModelConfig::micro();
    wider.base_width = 8;
    UNet c(wider, 0);
    try {
        load_checkpoint(dir, c.params());
        FAIL("expected CheckpointMismatch");
    } catch (const CheckpointMismatch& e) {
        const std::string msg = e.what();
        CHECK(msg.find("expected") != std::string::npos);
        CHECK(msg.find("found") != std::string::npos);
    }

    std::ofstream(dir / "intro.weight.tnsr", std::ios::binary) << "garbage";
    CHECK_THROWS_AS(load_checkpoint(dir, b.params()), FormatError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing"), b.params()), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("evaluate reports the noisy baseline") {
    TrainConfig t;
    t.val_count = 2;
    const auto pairs = validation_set(t, 3);
    const UNet net(ModelConfig::micro(), 0);
    const EvalReport r = evaluate(net, pairs);
    double base = 0;
    for (const auto& p : pairs) base += psnr(p.noisy, p.clean) / 2;
    CHECK(r.baseline_psnr == doctest::Approx(base).epsilon(1e-12));
    CHECK(r.ssim >= 0.0);
    CHECK(r.ssim <= 1.0);
    CHECK(Tape::current().size() == 0);
}

TEST_CASE("zero noise leaves the clean image") {
    std::mt19937_64 rng(5);
    const Tensor clean = synth_clean(rng, Shape{1, 3, 8, 8});
    const Tensor noisy = add_noise(clean, 0.0, rng);
    for (std::int64_t i = 0; i < clean.numel(); ++i) CHECK(noisy.data()[i] == clean.data()[i]);
}

TEST_CASE("Adam under a constant gradient") {
    ParamStore store;
    Tensor p = store.add("p", Tensor(Shape{1, 1, 1, 1}, 1.0f));
    const double b1 = 0.9, b2 = 0.9, lr = 0.01, g = -0.25;
    Adam opt(store, b1, b2, 1e-8);
    for (int t = 1; t <= 10; ++t) {
        const float before = p.data()[0];
        p.zero_grad();
        p.grad_buffer()[0] = static_cast<float>(g);
        opt.step(lr);
        // Moments are partial geometric series; the bias-corrected ratio stays sign(g).
        CHECK(opt.first_moment(0)[0] == doctest::Approx(g * (1 - std::pow(b1, t))).epsilon(1e-6));
        CHECK(opt.second_moment(0)[0] == doctest::Approx(g * g * (1 - std::pow(b2, t))).epsilon(1e-6));
        CHECK(p.data()[0] - before == doctest::Approx(lr).epsilon(1e-5));
    }
}

TEST_CASE("psnr loss floor and monotonicity") {
    Tensor a(Shape{1, 1, 2, 2}, 0.3f);
    CHECK(psnr_loss(a, a).item() == doctest::Approx(-80.0).epsilon(1e-6));
    Tensor near(Shape{1, 1, 2, 2}, 0.31f), far(Shape{1, 1, 2, 2}, 0.4f);
    CHECK(psnr_loss(near, a).item() < psnr_loss(far, a).item());
    Tape::current().clear();
}

TEST_CASE("200 micro steps beat the identity baseline") {
    TrainConfig t;
    t.iterations = 200;
    const TrainResult r = train(ModelConfig::micro(), t);
    const EvalReport ev = evaluate(*r.state.model, validation_set(t, 3));
    CHECK(ev.psnr > ev.baseline_psnr);
    CHECK(r.history.back().val_psnr == ev.psnr);
}
