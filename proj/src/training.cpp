#include "unetmm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <fmt/core.h>

#include "unetmm/metrics.hpp"
#include "unetmm/tnsr_io.hpp"

namespace unetmm {

void TrainConfig::validate() const {
    if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr_min >= 0.0) || !(lr_min < lr_init)) {
        throw ConfigError("train: need 0 <= lr_min < lr_init");
    }
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("train: Adam betas must lie in (0, 1)");
    }
    if (!(adam_epsilon > 0.0)) throw ConfigError("train.adam_epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(noise_sigma >= 0.0)) throw ConfigError("train.noise_sigma must be >= 0");
    if (patch_size < 1) throw ConfigError("train.patch_size must be >= 1");
    if (val_every < 1) throw ConfigError("train.val_every must be >= 1");
    if (val_count < 1) throw ConfigError("train.val_count must be >= 1");
}

Tensor synth_clean(std::mt19937_64& rng, const Shape& shape) {
    Tensor out(shape);
    auto o = out.data();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> signed_unit(-1.0, 1.0);
    const double h = static_cast<double>(shape.h);
    const double w = static_cast<double>(shape.w);
    const double extent = std::max(h, w);
    constexpr int kBumps = 4;
    for (std::int64_t b = 0; b < shape.n; ++b) {
        // Geometry is shared by the channels of an image, amplitudes are not.
        struct Bump {
            double y, x, inv_two_var;
        };
        Bump bumps[kBumps];
        for (auto& bump : bumps) {
            const double sigma = extent * (0.08 + 0.25 * unit(rng));
            bump = {unit(rng) * h, unit(rng) * w, 1.0 / (2.0 * sigma * sigma)};
        }
        for (std::int64_t c = 0; c < shape.c; ++c) {
            const double gy = signed_unit(rng);
            const double gx = signed_unit(rng);
            double amp[kBumps];
            for (double& a : amp) a = 2.0 * signed_unit(rng);
            float* plane = o.data() + (b * shape.c + c) * shape.plane();
            for (std::int64_t y = 0; y < shape.h; ++y) {
                for (std::int64_t x = 0; x < shape.w; ++x) {
                    double v = gy * static_cast<double>(y) / h + gx * static_cast<double>(x) / w;
                    for (int k = 0; k < kBumps; ++k) {
                        const double dy = static_cast<double>(y) - bumps[k].y;
                        const double dx = static_cast<double>(x) - bumps[k].x;
                        v += amp[k] * std::exp(-(dy * dy + dx * dx) * bumps[k].inv_two_var);
                    }
                    plane[y * shape.w + x] = static_cast<float>(v);
                }
            }
            const auto [lo, hi] = std::minmax_element(plane, plane + shape.plane());
            const float min = *lo;
            const float range = *hi - *lo;
            for (std::int64_t i = 0; i < shape.plane(); ++i) {
                const float t = range > 0.0f ? (plane[i] - min) / range : 0.5f;
                plane[i] = 0.05f + 0.9f * t;
            }
        }
    }
    return out;
}

Tensor add_noise(const Tensor& clean, double sigma, std::mt19937_64& rng, bool clamp) {
    Tensor out = clean.clone();
    std::normal_distribution<double> noise(0.0, sigma);
    for (float& v : out.data()) {
        const double x = static_cast<double>(v) + (sigma > 0.0 ? noise(rng) : 0.0);
        v = static_cast<float>(clamp ? std::clamp(x, 0.0, 1.0) : x);
    }
    return out;
}

SynthPair synth_pair(std::mt19937_64& rng, const Shape& shape, double sigma) {
    Tensor clean = synth_clean(rng, shape);
    Tensor noisy = add_noise(clean, sigma, rng);
    return {noisy, clean};
}

std::vector<SynthPair> validation_set(const TrainConfig& tcfg, std::int64_t channels) {
    std::mt19937_64 rng(tcfg.val_seed);
    std::vector<SynthPair> pairs;
    const Shape shape{1, channels, tcfg.patch_size, tcfg.patch_size};
    for (int i = 0; i < tcfg.val_count; ++i) pairs.push_back(synth_pair(rng, shape, tcfg.noise_sigma));
    return pairs;
}

Tensor psnr_loss(const Tensor& pred, const Tensor& target, double max_val, double epsilon) {
    if (!(max_val > 0.0)) throw ContractError("psnr_loss: max_val must be positive");
    const Tensor d = sub(pred, target);
    const Tensor mse = add(mean(mul(d, d)), scalar(static_cast<float>(epsilon)));
    const Tensor db = scale(log(mse), static_cast<float>(10.0 / std::numbers::ln10));
    return add(db, scalar(static_cast<float>(-20.0 * std::log10(max_val))));
}

double cosine_lr(std::int64_t step, std::int64_t total, double lr_init, double lr_min) {
    if (total < 1) throw ContractError("cosine_lr: total must be >= 1");
    const double t = static_cast<double>(std::clamp<std::int64_t>(step, 0, total)) / static_cast<double>(total);
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(const ParamStore& params, double beta1, double beta2, double epsilon, double weight_decay)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon), weight_decay_(weight_decay) {
    for (const auto& [name, t] : params.entries()) {
        names_.push_back(name);
        params_.push_back(t);
        m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
        v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
    }
}

void Adam::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].has_grad()) {
            throw ContractError(fmt::format("Adam: parameter '{}' has no gradient", names_[i]));
        }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto w = params_[i].data();
        auto g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double grad = static_cast<double>(g[j]) + weight_decay_ * w[j];
            const double mj = beta1_ * m[j] + (1.0 - beta1_) * grad;
            const double vj = beta2_ * v[j] + (1.0 - beta2_) * grad * grad;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            w[j] = static_cast<float>(w[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + epsilon_));
        }
    }
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
    std::string out = "step,lr,train_loss,val_psnr\n";
    for (const auto& r : rows) out += fmt::format("{},{},{},{}\n", r.step, r.lr, r.train_loss, r.val_psnr);
    return out;
}

std::vector<HistoryRow> parse_history_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "step,lr,train_loss,val_psnr") {
        throw FormatError("metrics CSV: missing header");
    }
    std::vector<HistoryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string f[4];
        for (auto& v : f) {
            if (!std::getline(fields, v, ',')) throw FormatError(fmt::format("metrics CSV: short row '{}'", line));
        }
        try {
            rows.push_back({std::stoll(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3])});
        } catch (const std::logic_error&) {
            throw FormatError(fmt::format("metrics CSV: bad number in '{}'", line));
        }
    }
    return rows;
}

EvalReport evaluate(const UNet& model, const std::vector<SynthPair>& pairs) {
    if (pairs.empty()) throw ArityError("evaluate: no pairs");
    NoGradGuard no_grad;
    EvalReport r;
    for (const auto& p : pairs) {
        const Tensor out = model.forward(p.noisy);
        r.psnr += psnr(out, p.clean);
        r.ssim += ssim(out, p.clean);
        r.baseline_psnr += psnr(p.noisy, p.clean);
        r.baseline_ssim += ssim(p.noisy, p.clean);
    }
    const double n = static_cast<double>(pairs.size());
    r.psnr /= n;
    r.ssim /= n;
    r.baseline_psnr /= n;
    r.baseline_ssim /= n;
    return r;
}

TrainResult train(const ModelConfig& cfg, const TrainConfig& tcfg, const StepCallback& on_step) {
    cfg.validate();
    tcfg.validate();
    const Shape batch{tcfg.batch_size, cfg.in_channels, tcfg.patch_size, tcfg.patch_size};
    cfg.validate_input(batch);

    TrainResult result;
    TrainState& st = result.state;
    st.model = std::make_unique<UNet>(cfg, tcfg.seed);
    st.optimizer = std::make_unique<Adam>(st.model->params(), tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_epsilon,
                                          tcfg.weight_decay);
    st.rng.seed(tcfg.seed);
    const auto val = validation_set(tcfg, cfg.in_channels);

    for (std::int64_t step = 1; step <= tcfg.iterations; ++step) {
        const double lr = cosine_lr(step - 1, tcfg.iterations, tcfg.lr_init, tcfg.lr_min);
        const SynthPair pair = synth_pair(st.rng, batch, tcfg.noise_sigma);
        Tensor loss;
        try {
            loss = psnr_loss(st.model->forward(pair.noisy), pair.clean);
        } catch (const NumericError& e) {
            Tape::current().clear();
            throw NumericError(fmt::format("step {}: {}", step, e.what()));
        } catch (...) {
            Tape::current().clear();
            throw;
        }
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            Tape::current().clear();
            throw NumericError(fmt::format("non-finite training loss at step {}", step));
        }
        st.model->params().zero_grad();
        backward(loss);
        st.optimizer->step(lr);
        st.step = step;

        const HistoryRow* row = nullptr;
        if (step % tcfg.val_every == 0 || step == tcfg.iterations) {
            result.history.push_back({step, lr, loss_value, evaluate(*st.model, val).psnr});
            row = &result.history.back();
        }
        if (on_step) on_step(st, row);
    }
    return result;
}

void save_checkpoint(const std::filesystem::path& dir, const ParamStore& params) {
    std::filesystem::create_directories(dir);
    std::string manifest = "name,n,c,h,w\n";
    for (const auto& [name, t] : params.entries()) {
        write_tnsr(dir / (name + ".tnsr"), t);
        const Shape& s = t.shape();
        manifest += fmt::format("{},{},{},{},{}\n", name, s.n, s.c, s.h, s.w);
    }
    std::ofstream out(dir / "manifest.csv", std::ios::binary);
    out << manifest;
    if (!out) throw Error(fmt::format("cannot write {}", (dir / "manifest.csv").string()));
}

namespace {

struct ManifestEntry {
    std::string name;
    Shape shape;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(fmt::format("{}: cannot open checkpoint manifest", path.string()));
    std::string line;
    if (!std::getline(in, line) || line != "name,n,c,h,w") {
        throw FormatError(fmt::format("{}: missing manifest header", path.string()));
    }
    std::vector<ManifestEntry> entries;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string f[5];
        for (auto& v : f) {
            if (!std::getline(fields, v, ',')) {
                throw FormatError(fmt::format("{}: short manifest row '{}'", path.string(), line));
            }
        }
        try {
            entries.push_back({f[0], Shape{std::stoll(f[1]), std::stoll(f[2]), std::stoll(f[3]), std::stoll(f[4])}});
        } catch (const std::logic_error&) {
            throw FormatError(fmt::format("{}: bad extent in '{}'", path.string(), line));
        }
    }
    return entries;
}

}  // namespace

void load_checkpoint(const std::filesystem::path& dir, ParamStore& params) {
    const auto manifest = read_manifest(dir / "manifest.csv");
    std::string diff;
    const auto& expected = params.entries();
    const std::size_t rows = std::max(expected.size(), manifest.size());
    for (std::size_t i = 0; i < rows; ++i) {
        const std::string want = i < expected.size()
                                     ? fmt::format("{} {}", expected[i].first, expected[i].second.shape().str())
                                     : "<none>";
        const std::string got =
            i < manifest.size() ? fmt::format("{} {}", manifest[i].name, manifest[i].shape.str()) : "<none>";
        if (want != got) diff += fmt::format("\n  #{}: expected {}, found {}", i, want, got);
    }
    if (!diff.empty()) throw CheckpointMismatch("checkpoint does not match the model:" + diff);

    for (const auto& [name, t] : expected) {
        const Tensor loaded = read_tnsr(dir / (name + ".tnsr"));
        if (loaded.shape() != t.shape()) {
            throw CheckpointMismatch(fmt::format("{}.tnsr: expected {}, found {}", name, t.shape().str(),
                                                 loaded.shape().str()));
        }
        Tensor target = t;
        std::copy(loaded.data().begin(), loaded.data().end(), target.data().begin());
    }
}

}  // namespace unetmm
