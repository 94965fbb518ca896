#include "unetmm/config_io.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <fmt/core.h>
#include <yaml-cpp/yaml.h>

namespace unetmm {

namespace {

int line_of(const YAML::Node& node) { return node ? node.Mark().line + 1 : 0; }

template <typename T>
T scalar_as(const YAML::Node& node, const std::string& key) {
    if (!node.IsScalar()) throw ConfigError(fmt::format("'{}' must be a scalar", key), line_of(node));
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(fmt::format("'{}': cannot read '{}'", key, node.Scalar()), line_of(node));
    }
}

template <typename T>
std::vector<T> sequence_as(const YAML::Node& node, const std::string& key,
                           const std::function<T(const YAML::Node&)>& item) {
    if (!node.IsSequence()) throw ConfigError(fmt::format("'{}' must be a list", key), line_of(node));
    std::vector<T> out;
    for (const auto& v : node) out.push_back(item(v));
    return out;
}

// Re-throws errors raised without a position at `line`.
template <typename F>
auto anchored(int line, F f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        if (e.line() > 0) throw;
        throw ConfigError(e.what(), line);
    }
}

using Handler = std::function<void(const YAML::Node&)>;

void apply_section(const YAML::Node& section, const std::string& name, const std::map<std::string, Handler>& keys) {
    if (!section) return;
    if (!section.IsMap()) throw ConfigError(fmt::format("'{}' must be a map", name), line_of(section));
    for (const auto& kv : section) {
        const std::string key = kv.first.as<std::string>();
        const auto it = keys.find(key);
        if (it == keys.end()) throw ConfigError(fmt::format("unknown key '{}.{}'", name, key), line_of(kv.first));
        it->second(kv.second);
    }
}

// Whole-section checks report `header_line`, the line of the section key.
void read_model(const YAML::Node& node, int header_line, ModelConfig& m) {
    bool blocks_given = false;
    const std::map<std::string, Handler> keys{
        {"num_stages", [&](const YAML::Node& v) { m.num_stages = scalar_as<int>(v, "num_stages"); }},
        {"base_width", [&](const YAML::Node& v) { m.base_width = scalar_as<std::int64_t>(v, "base_width"); }},
        {"in_channels", [&](const YAML::Node& v) { m.in_channels = scalar_as<std::int64_t>(v, "in_channels"); }},
        {"blocks_per_stage",
         [&](const YAML::Node& v) {
             m.blocks_per_stage = sequence_as<int>(
                 v, "blocks_per_stage", [](const YAML::Node& x) { return scalar_as<int>(x, "blocks_per_stage"); });
             blocks_given = true;
         }},
        {"skip_mode",
         [&](const YAML::Node& v) {
             m.skip_mode = anchored(line_of(v), [&] { return SkipMode::parse(scalar_as<std::string>(v, "skip_mode")); });
         }},
        {"msiam_reduction",
         [&](const YAML::Node& v) {
             m.msiam_reduction = sequence_as<Ratio>(v, "msiam_reduction", [](const YAML::Node& x) {
                 return anchored(line_of(x), [&] { return Ratio::parse(scalar_as<std::string>(x, "msiam_reduction")); });
             });
         }},
        {"target_level", [&](const YAML::Node& v) { m.target_level = scalar_as<int>(v, "target_level"); }},
        {"iem_expand", [&](const YAML::Node& v) { m.iem_expand = scalar_as<int>(v, "iem_expand"); }},
        {"iem_kernel", [&](const YAML::Node& v) { m.iem_kernel = scalar_as<int>(v, "iem_kernel"); }},
        {"accounting_bits", [&](const YAML::Node& v) { m.accounting_bits = scalar_as<int>(v, "accounting_bits"); }},
        {"conv_bias", [&](const YAML::Node& v) { m.conv_bias = scalar_as<bool>(v, "conv_bias"); }},
        {"global_residual", [&](const YAML::Node& v) { m.global_residual = scalar_as<bool>(v, "global_residual"); }},
        {"fusion",
         [&](const YAML::Node& v) {
             m.fusion = anchored(line_of(v), [&] { return parse_fusion(scalar_as<std::string>(v, "fusion")); });
         }},
    };
    apply_section(node, "model", keys);
    // A stage count without an explicit layout gets one block everywhere.
    if (!blocks_given) m.blocks_per_stage.assign(static_cast<std::size_t>(std::max(0, 2 * m.num_stages - 1)), 1);
    anchored(header_line, [&] {
        m.validate();
        return 0;
    });
}

void read_input(const YAML::Node& node, Shape& s) {
    const std::map<std::string, Handler> keys{
        {"batch", [&](const YAML::Node& v) { s.n = scalar_as<std::int64_t>(v, "batch"); }},
        {"channels", [&](const YAML::Node& v) { s.c = scalar_as<std::int64_t>(v, "channels"); }},
        {"height", [&](const YAML::Node& v) { s.h = scalar_as<std::int64_t>(v, "height"); }},
        {"width", [&](const YAML::Node& v) { s.w = scalar_as<std::int64_t>(v, "width"); }},
    };
    apply_section(node, "input", keys);
}

void read_train(const YAML::Node& node, int header_line, TrainConfig& t) {
    const std::map<std::string, Handler> keys{
        {"iterations", [&](const YAML::Node& v) { t.iterations = scalar_as<int>(v, "iterations"); }},
        {"batch_size", [&](const YAML::Node& v) { t.batch_size = scalar_as<int>(v, "batch_size"); }},
        {"lr_init", [&](const YAML::Node& v) { t.lr_init = scalar_as<double>(v, "lr_init"); }},
        {"lr_min", [&](const YAML::Node& v) { t.lr_min = scalar_as<double>(v, "lr_min"); }},
        {"adam_beta1", [&](const YAML::Node& v) { t.adam_beta1 = scalar_as<double>(v, "adam_beta1"); }},
        {"adam_beta2", [&](const YAML::Node& v) { t.adam_beta2 = scalar_as<double>(v, "adam_beta2"); }},
        {"adam_epsilon", [&](const YAML::Node& v) { t.adam_epsilon = scalar_as<double>(v, "adam_epsilon"); }},
        {"weight_decay", [&](const YAML::Node& v) { t.weight_decay = scalar_as<double>(v, "weight_decay"); }},
        {"seed", [&](const YAML::Node& v) { t.seed = scalar_as<std::uint64_t>(v, "seed"); }},
        {"noise_sigma", [&](const YAML::Node& v) { t.noise_sigma = scalar_as<double>(v, "noise_sigma"); }},
        {"patch_size", [&](const YAML::Node& v) { t.patch_size = scalar_as<std::int64_t>(v, "patch_size"); }},
        {"val_every", [&](const YAML::Node& v) { t.val_every = scalar_as<int>(v, "val_every"); }},
        {"val_count", [&](const YAML::Node& v) { t.val_count = scalar_as<int>(v, "val_count"); }},
        {"val_seed", [&](const YAML::Node& v) { t.val_seed = scalar_as<std::uint64_t>(v, "val_seed"); }},
    };
    apply_section(node, "train", keys);
    anchored(header_line, [&] {
        t.validate();
        return 0;
    });
}

}  // namespace

RunConfig parse_run_config(const std::string& yaml) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(e.msg, e.mark.line + 1);
    }
    RunConfig cfg;
    if (!root || root.IsNull()) return cfg;
    const YAML::Node& croot = root;
    if (!root.IsMap()) throw ConfigError("top level must be a map", line_of(root));
    std::map<std::string, int> header_line;
    for (const auto& kv : root) {
        const std::string key = kv.first.as<std::string>();
        if (key != "model" && key != "input" && key != "train") {
            throw ConfigError(fmt::format("unknown section '{}'", key), line_of(kv.first));
        }
        header_line[key] = line_of(kv.first);
    }
    read_model(croot["model"], header_line["model"], cfg.model);
    cfg.input.c = cfg.model.in_channels;
    read_input(croot["input"], cfg.input);
    read_train(croot["train"], header_line["train"], cfg.train);
    try {
        cfg.model.validate_input(cfg.input);
    } catch (const ShapeError& e) {
        throw ConfigError(e.what(), header_line["input"]);
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path.string()));
    std::ostringstream text;
    text << in.rdbuf();
    return parse_run_config(text.str());
}

std::string dump_run_config(const RunConfig& cfg) {
    const ModelConfig& m = cfg.model;
    const TrainConfig& t = cfg.train;
    auto list = [](const auto& items, auto fmt_item) {
        std::string out = "[";
        for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + fmt_item(items[i]);
        return out + "]";
    };
    std::string out = "model:\n";
    out += fmt::format("  num_stages: {}\n  base_width: {}\n  in_channels: {}\n", m.num_stages, m.base_width,
                       m.in_channels);
    out += fmt::format("  blocks_per_stage: {}\n", list(m.blocks_per_stage, [](int b) { return std::to_string(b); }));
    out += fmt::format("  skip_mode: {}\n", m.skip_mode.str());
    out += fmt::format("  msiam_reduction: {}\n",
                       list(m.msiam_reduction, [](const Ratio& r) { return fmt::format("\"{}\"", r.str()); }));
    out += fmt::format("  target_level: {}\n  iem_expand: {}\n  iem_kernel: {}\n", m.target_level, m.iem_expand,
                       m.iem_kernel);
    out += fmt::format("  accounting_bits: {}\n  conv_bias: {}\n  global_residual: {}\n  fusion: {}\n",
                       m.accounting_bits, m.conv_bias, m.global_residual, fusion_name(m.fusion));
    out += "input:\n";
    out += fmt::format("  batch: {}\n  channels: {}\n  height: {}\n  width: {}\n", cfg.input.n, cfg.input.c,
                       cfg.input.h, cfg.input.w);
    out += "train:\n";
    out += fmt::format("  iterations: {}\n  batch_size: {}\n", t.iterations, t.batch_size);
    out += fmt::format("  lr_init: {}\n  lr_min: {}\n", t.lr_init, t.lr_min);
    out += fmt::format("  adam_beta1: {}\n  adam_beta2: {}\n  adam_epsilon: {}\n  weight_decay: {}\n", t.adam_beta1,
                       t.adam_beta2, t.adam_epsilon, t.weight_decay);
    out += fmt::format("  seed: {}\n  noise_sigma: {}\n  patch_size: {}\n", t.seed, t.noise_sigma, t.patch_size);
    out += fmt::format("  val_every: {}\n  val_count: {}\n  val_seed: {}\n", t.val_every, t.val_count, t.val_seed);
    return out;
}

}  // namespace unetmm
