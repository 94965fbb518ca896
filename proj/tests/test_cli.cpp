#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "unetmm/tnsr_io.hpp"
#include "unetmm/training.hpp"

using namespace unetmm;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(UNETMM_SOURCE_DIR) / "configs";

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("unetmm_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

// micro.yaml with a very short schedule.
fs::path short_config(const fs::path& dir) {
    fs::create_directories(dir);
    std::string text = slurp(kConfigs / "micro.yaml");
    text.replace(text.find("iterations: 200"), 15, "iterations: 4");
    text += "  val_every: 2\n  val_count: 2\n";
    const fs::path p = dir / "short.yaml";
    std::ofstream(p) << text;
    return p;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == cli::kUsage);
    CHECK(run({"frobnicate"}).code == cli::kUsage);
    CHECK(run({"analyze-memory", "--config", (kConfigs / "nafnet.yaml").string()}).code == cli::kUsage);
    const Run missing = run({"analyze-memory", "--config", "/nonexistent/x.yaml", "--out", scratch("m").string()});
    CHECK(missing.code == cli::kUsage);
    CHECK(missing.err.find("does not exist") != std::string::npos);
    CHECK(run({"train", "--out", scratch("t").string()}).code == cli::kUsage);
    CHECK(run({"--help"}).code == cli::kOk);
}

TEST_CASE("bad config content exits with 2 and names the line") {
    const fs::path dir = scratch("badcfg");
    fs::create_directories(dir);
    std::ofstream(dir / "bad.yaml") << "model:\n  num_stages: 5\n  widht: 3\n";
    const Run r = run({"eval", "--config", (dir / "bad.yaml").string()});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("line 3") != std::string::npos);
    CHECK(run({"analyze-memory", "--config", (kConfigs / "nafnet.yaml").string(), "--out", (dir / "o").string(),
               "--skip-mode", "single:9"})
              .code == cli::kUsage);
}

TEST_CASE("analyze-memory writes timelines and the comparison") {
    const fs::path out = scratch("am");
    const Run r = run({"analyze-memory", "--config", (kConfigs / "nafnet.yaml").string(), "--out", out.string()});
    REQUIRE(r.code == cli::kOk);
    CHECK(r.out.find("3932160") != std::string::npos);
    CHECK(r.out.find("262144") != std::string::npos);
    CHECK(r.out.find("93.3%") != std::string::npos);
    for (const char* f : {"timeline_full.csv", "timeline_none.csv", "timeline_single_1.csv", "timeline_single_4.csv",
                          "timeline_msiam-iem.csv", "report.txt", "comparison.csv"}) {
        CHECK(fs::exists(out / f));
    }
    CHECK(slurp(out / "comparison.csv").find("3932160") != std::string::npos);

    // A second run into the same directory needs --force.
    CHECK(run({"analyze-memory", "--config", (kConfigs / "nafnet.yaml").string(), "--out", out.string()}).code ==
          cli::kUsage);
    CHECK(run({"analyze-memory", "--config", (kConfigs / "nafnet.yaml").string(), "--out", out.string(), "--force"})
              .code == cli::kOk);
}

TEST_CASE("train, eval and inspect-features share a checkpoint") {
    const fs::path base = scratch("flow");
    const fs::path cfg = short_config(base);
    const fs::path train_dir = base / "train";
    const Run t = run({"train", "--config", cfg.string(), "--out", train_dir.string(), "-v"});
    REQUIRE(t.code == cli::kOk);
    CHECK(t.out.find("trained 4 steps") != std::string::npos);
    CHECK(t.out.find("step      2") != std::string::npos);
    CHECK(parse_history_csv(slurp(train_dir / "metrics.csv")).size() == 2);
    CHECK(fs::exists(train_dir / "checkpoint" / "manifest.csv"));
    CHECK(fs::exists(train_dir / "config.yaml"));

    const fs::path eval_dir = base / "eval";
    const Run e = run({"eval", "--config", cfg.string(), "--checkpoint", (train_dir / "checkpoint").string(), "--out",
                       eval_dir.string()});
    REQUIRE(e.code == cli::kOk);
    CHECK(slurp(eval_dir / "eval.csv").rfind("psnr,ssim,baseline_psnr,baseline_ssim\n", 0) == 0);

    const fs::path feat_dir = base / "features";
    const Run f = run({"inspect-features", "--config", cfg.string(), "--checkpoint",
                       (train_dir / "checkpoint").string(), "--out", feat_dir.string()});
    REQUIRE(f.code == cli::kOk);
    CHECK(fs::exists(feat_dir / "features.csv"));
    CHECK(fs::exists(feat_dir / "encoder_ra.csv"));
    CHECK(read_tnsr(feat_dir / "iem2.tnsr").shape() == read_tnsr(feat_dir / "enc2.tnsr").shape());

    CHECK(run({"inspect-features", "--config", cfg.string(), "--skip-mode", "full", "--out", (base / "x").string()})
              .code == cli::kUsage);
}

TEST_CASE("corrupt checkpoint data exits with 3") {
    const fs::path base = scratch("corrupt");
    const fs::path cfg = short_config(base);
    const fs::path ckpt = base / "ckpt";
    UNet net(ModelConfig::micro(), 0);
    save_checkpoint(ckpt, net.params());
    std::ofstream(ckpt / "intro.weight.tnsr", std::ios::binary) << "NOPE";
    const Run r = run({"eval", "--config", cfg.string(), "--checkpoint", ckpt.string()});
    CHECK(r.code == cli::kDataFormat);
    CHECK(r.err.find("format error") != std::string::npos);
}

TEST_CASE("mismatched checkpoint exits with 3") {
    const fs::path base = scratch("mismatch");
    const fs::path cfg = short_config(base);
    ModelConfig other = ModelConfig::micro();
    other.skip_mode = SkipMode::full();
    save_checkpoint(base / "ckpt", UNet(other, 0).params());
    const Run r = run({"eval", "--config", cfg.string(), "--checkpoint", (base / "ckpt").string()});
    CHECK(r.code == cli::kDataFormat);
    CHECK(r.err.find("msiam.rc1.weight") != std::string::npos);
}

TEST_CASE("gradcheck subcommand") {
    const fs::path out = scratch("gc");
    const Run r = run({"gradcheck", "--only", "add", "gelu", "--no-end-to-end", "--out", out.string()});
    CHECK(r.code == cli::kOk);
    CHECK(r.out.find("gelu") != std::string::npos);
    CHECK(fs::exists(out / "gradcheck.txt"));
    const Run none = run({"gradcheck", "--only", "no_such_op", "--no-end-to-end"});
    CHECK(none.code == cli::kOk);
    CHECK(none.out.find("nothing was checked") != std::string::npos);
}
