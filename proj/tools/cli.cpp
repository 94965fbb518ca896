#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <fmt/ostream.h>

#include "unetmm/config_io.hpp"
#include "unetmm/gradcheck.hpp"
#include "unetmm/metrics.hpp"
#include "unetmm/tnsr_io.hpp"

namespace unetmm::cli {

namespace fs = std::filesystem;

namespace {

// Seed of the fixed probe image used by inspect-features.
constexpr std::uint64_t kProbeSeed = 7;

class UsageError : public Error {
public:
    using Error::Error;
};

struct Options {
    std::string config;
    std::string out;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> skip_mode;
    bool force = false;
    bool verbose = false;
    std::vector<std::string> only;
    bool skip_end_to_end = false;
};

RunConfig load_config(const Options& o, bool required) {
    RunConfig cfg;
    if (o.config.empty()) {
        if (required) throw UsageError("--config is required");
    } else {
        if (!fs::exists(o.config)) throw UsageError(fmt::format("config file '{}' does not exist", o.config));
        cfg = load_run_config(o.config);
    }
    if (o.seed) cfg.train.seed = *o.seed;
    if (o.skip_mode) {
        cfg.model.skip_mode = SkipMode::parse(*o.skip_mode);
        cfg.model.validate();
    }
    return cfg;
}

// Creates the output directory; an existing non-empty one needs --force.
fs::path prepare_out(const Options& o, bool required) {
    if (o.out.empty()) {
        if (required) throw UsageError("--out is required");
        return {};
    }
    const fs::path dir(o.out);
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError(fmt::format("'{}' is not a directory", o.out));
        if (!fs::is_empty(dir) && !o.force) {
            throw UsageError(fmt::format("output directory '{}' is not empty; pass --force to overwrite", o.out));
        }
    }
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    f << text;
    if (!f) throw Error(fmt::format("cannot write {}", path.string()));
}

std::string mode_file_name(const SkipMode& m) {
    std::string s = m.str();
    std::replace(s.begin(), s.end(), ':', '_');
    return s;
}

int analyze_memory(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_config(o, true);
    const fs::path dir = prepare_out(o, true);
    const ModelConfig& m = cfg.model;

    std::vector<SkipMode> modes{SkipMode::full(), SkipMode::none()};
    for (int k = 1; k < m.num_stages; ++k) modes.push_back(SkipMode::single(k));
    modes.push_back(SkipMode::msiam_iem());

    fmt::print(out, "input {}, {}-bit accounting\n", cfg.input.str(), m.accounting_bits);
    for (const SkipMode& mode : modes) {
        ModelConfig variant = m;
        variant.skip_mode = mode;
        try {
            const MemoryTimeline t = skip_timeline(variant, cfg.input);
            write_text(dir / fmt::format("timeline_{}.csv", mode_file_name(mode)), t.to_csv());
            fmt::print(out, "{:<10} peak {} bytes ({} MB)\n", mode.str(), t.peak(), format_megabytes(t.peak()));
        } catch (const ConfigError& e) {
            fmt::print(out, "{:<10} not applicable: {}\n", mode.str(), e.what());
        }
    }

    ModelConfig baseline = m;
    baseline.skip_mode = SkipMode::full();
    ModelConfig candidate = m;
    if (candidate.skip_mode == SkipMode::full()) candidate.skip_mode = SkipMode::msiam_iem();
    const ComparisonReport report = compare(baseline, candidate, cfg.input);
    write_text(dir / "report.txt", report.to_text());
    write_text(dir / "comparison.csv", report.to_csv());
    out << report.to_text();
    return kOk;
}

int train_cmd(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_config(o, true);
    const fs::path dir = prepare_out(o, true);
    write_text(dir / "config.yaml", dump_run_config(cfg));

    const auto start = std::chrono::steady_clock::now();
    StepCallback progress;
    if (o.verbose) {
        progress = [&out](const TrainState&, const HistoryRow* row) {
            if (row) fmt::print(out, "step {:>6}  lr {:.3e}  loss {:.4f}  val {:.3f} dB\n", row->step, row->lr,
                                row->train_loss, row->val_psnr);
        };
    }
    TrainResult result = train(cfg.model, cfg.train, progress);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    write_text(dir / "metrics.csv", history_csv(result.history));
    save_checkpoint(dir / "checkpoint", result.state.model->params());
    const EvalReport ev = evaluate(*result.state.model, validation_set(cfg.train, cfg.model.in_channels));
    fmt::print(out, "trained {} steps in {:.1f} s\n", result.state.step, seconds);
    fmt::print(out, "val PSNR {:.3f} dB (noisy input {:.3f} dB)\n", ev.psnr, ev.baseline_psnr);
    return kOk;
}

std::unique_ptr<UNet> load_model(const RunConfig& cfg, const Options& o) {
    auto model = std::make_unique<UNet>(cfg.model, cfg.train.seed);
    if (!o.checkpoint.empty()) load_checkpoint(o.checkpoint, model->params());
    return model;
}

int eval_cmd(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_config(o, true);
    const fs::path dir = prepare_out(o, false);
    const auto model = load_model(cfg, o);
    const EvalReport ev = evaluate(*model, validation_set(cfg.train, cfg.model.in_channels));
    const std::string csv = fmt::format("psnr,ssim,baseline_psnr,baseline_ssim\n{},{},{},{}\n", ev.psnr, ev.ssim,
                                        ev.baseline_psnr, ev.baseline_ssim);
    if (!dir.empty()) write_text(dir / "eval.csv", csv);
    fmt::print(out, "PSNR {:.3f} dB  SSIM {:.4f}\n", ev.psnr, ev.ssim);
    fmt::print(out, "noisy input: PSNR {:.3f} dB  SSIM {:.4f}\n", ev.baseline_psnr, ev.baseline_ssim);
    return kOk;
}

int inspect_features(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_config(o, true);
    if (cfg.model.skip_mode.kind != SkipKind::MsiamIem) {
        throw UsageError(fmt::format("inspect-features needs skip_mode msiam-iem, config has {}",
                                     cfg.model.skip_mode.str()));
    }
    const fs::path dir = prepare_out(o, true);
    const auto model = load_model(cfg, o);

    std::mt19937_64 rng(kProbeSeed);
    const Tensor probe = add_noise(synth_clean(rng, cfg.input), cfg.train.noise_sigma, rng);
    ForwardResult fr;
    {
        NoGradGuard no_grad;
        fr = model->run(probe, ForwardOptions{nullptr, true});
    }
    const auto rows = diagnose_stages(fr.encoder, fr.iem);
    write_text(dir / "features.csv", diagnostics_csv(rows));

    std::string enc_csv = "stage,ra_mean,ra_variance\n";
    for (std::size_t i = 0; i < fr.encoder.size(); ++i) {
        const auto ra = representative_ability(fr.encoder[i]);
        enc_csv += fmt::format("{},{},{}\n", i + 1, ra.mean, ra.variance);
        write_tnsr(dir / fmt::format("enc{}.tnsr", i + 1), fr.encoder[i]);
        write_tnsr(dir / fmt::format("iem{}.tnsr", i + 1), fr.iem[i]);
    }
    write_text(dir / "encoder_ra.csv", enc_csv);

    fmt::print(out, "stage  ssim(enc, iem)  ra_variance(iem)\n");
    for (const auto& r : rows) fmt::print(out, "{:>5}  {:>14.4f}  {:>16.6f}\n", r.stage, r.ssim_to_encoder, r.ra_variance);
    return kOk;
}

int gradcheck_cmd(const Options& o, std::ostream& out) {
    RunConfig cfg;
    cfg.model = ModelConfig::micro();
    if (!o.config.empty()) cfg = load_config(o, true);
    const fs::path dir = prepare_out(o, false);
    const std::uint64_t seed = o.seed.value_or(cfg.train.seed);

    std::vector<GradCase> cases = default_op_cases(seed);
    if (!o.skip_end_to_end) cases.push_back(end_to_end_case(cfg.model, seed));
    if (!o.only.empty()) {
        std::erase_if(cases, [&](const GradCase& c) {
            return std::find(o.only.begin(), o.only.end(), c.name) == o.only.end();
        });
    }
    const GradReport report = run_gradcheck(cases, seed);
    const std::string text = report.to_text();
    if (!dir.empty()) write_text(dir / "gradcheck.txt", text);
    out << text;
    return report.passed() ? kOk : kNumeric;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"U-Net skip-connection memory analysis, training and diagnostics", "unetmm"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub, bool needs_out) {
        sub->add_option("--config", o.config, "YAML config path");
        auto* out_opt = sub->add_option("--out", o.out, "output directory");
        if (needs_out) out_opt->required();
        sub->add_option("--seed", o.seed, "overrides train.seed");
        sub->add_flag("--force", o.force, "allow writing into a non-empty output directory");
        sub->add_option("--skip-mode", o.skip_mode, "full, none, single:K or msiam-iem");
        sub->add_flag("-v,--verbose", o.verbose, "progress output");
    };
    auto* analyze = app.add_subcommand("analyze-memory", "skip-storage timelines and peak comparison");
    common(analyze, true);
    auto* train = app.add_subcommand("train", "train on synthetic denoising pairs");
    common(train, true);
    auto* eval = app.add_subcommand("eval", "PSNR/SSIM on the validation set");
    common(eval, false);
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint directory (fresh weights if omitted)");
    auto* inspect = app.add_subcommand("inspect-features", "encoder vs IEM feature diagnostics");
    common(inspect, true);
    inspect->add_option("--checkpoint", o.checkpoint, "checkpoint directory (fresh weights if omitted)");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    common(grad, false);
    grad->add_option("--only", o.only, "restrict to these case names");
    grad->add_flag("--no-end-to-end", o.skip_end_to_end, "skip the whole-model case");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (analyze->parsed()) return analyze_memory(o, out);
        if (train->parsed()) return train_cmd(o, out);
        if (eval->parsed()) return eval_cmd(o, out);
        if (inspect->parsed()) return inspect_features(o, out);
        return gradcheck_cmd(o, out);
    } catch (const UsageError& e) {
        fmt::print(err, "error: {}\n", e.what());
        return kUsage;
    } catch (const ConfigError& e) {
        fmt::print(err, "config error: {}\n", e.what());
        return kUsage;
    } catch (const FormatError& e) {
        fmt::print(err, "format error: {}\n", e.what());
        return kDataFormat;
    } catch (const ShapeError& e) {
        fmt::print(err, "shape error: {}\n", e.what());
        return kUsage;
    } catch (const NumericError& e) {
        fmt::print(err, "numeric error: {}\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        fmt::print(err, "error: {}\n", e.what());
        return kFailure;
    }
}

}  // namespace unetmm::cli
