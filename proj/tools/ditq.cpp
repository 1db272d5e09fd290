// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: init, calibrate, sample, compare, report.
//
// Precedence: built-in defaults < --config file < command-line flags.
// Log verbosity comes from DITQ_LOG (trace, debug, info, warn, error, off).

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "ditq/experiment.hpp"

namespace {

struct Overrides {
    std::string config;
    std::optional<std::string> output_dir;
    std::optional<int> steps;
    std::optional<double> guidance;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("-c,--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("-o,--output-dir", o.output_dir, "output directory");
    cmd->add_option("--steps", o.steps, "inference steps");
    cmd->add_option("--guidance", o.guidance, "classifier-free guidance scale");
}

ditq::ExperimentConfig resolve(const Overrides& o) {
    ditq::ExperimentConfig cfg = o.config.empty() ? ditq::ExperimentConfig{} : ditq::load_experiment_config(o.config);
    if (o.output_dir) cfg.output_dir = *o.output_dir;
    if (o.steps) cfg.sampler.num_inference_steps = *o.steps;
    if (o.guidance) cfg.sampler.guidance_scale = *o.guidance;
    ditq::validate(cfg);
    return cfg;
}

void configure_logging() {
    auto logger = spdlog::stderr_logger_st("ditq");
    logger->set_pattern("ditq: %l: %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* env = std::getenv("DITQ_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

int report_error(const std::string& code, const std::string& msg) {
    std::cerr << "ditq: error[" << code << "]: " << msg << "\n";
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    configure_logging();
    const ditq::Progress progress = [](const std::string& msg) { spdlog::info("{}", msg); };

    CLI::App app{"Post-training quantization experiments on a desk-scale diffusion transformer"};
    app.require_subcommand(1);

    Overrides init_o;
    std::optional<std::uint64_t> model_seed;
    std::optional<int> train_steps;
    auto* init = app.add_subcommand("init", "write a seeded model checkpoint");
    add_common(init, init_o);
    init->add_option("--seed", model_seed, "model initialization seed");
    init->add_option("--train-steps", train_steps, "optional epsilon-prediction training steps");

    Overrides cal_o;
    std::string cal_ckpt;
    std::optional<std::string> act_strategy, weight_gran;
    std::optional<int> bits_act, bits_weight, group_size;
    auto* cal = app.add_subcommand("calibrate", "collect activation ranges and derive quantization parameters");
    add_common(cal, cal_o);
    cal->add_option("--checkpoint", cal_ckpt, "checkpoint directory")->required();
    cal->add_option("--act-strategy", act_strategy)->check(CLI::IsMember({"one_step", "multi_step"}));
    cal->add_option("--weight-granularity", weight_gran)->check(CLI::IsMember({"per_channel", "per_group"}));
    cal->add_option("--bits-act", bits_act);
    cal->add_option("--bits-weight", bits_weight);
    cal->add_option("--group-size", group_size);

    Overrides smp_o;
    std::string smp_ckpt;
    std::optional<std::string> params;
    std::uint64_t sample_seed = 0;
    int label = 0;
    auto* smp = app.add_subcommand("sample", "generate one image, optionally quantized");
    add_common(smp, smp_o);
    smp->add_option("--checkpoint", smp_ckpt, "checkpoint directory")->required();
    smp->add_option("--params", params, "params.json from calibrate")->check(CLI::ExistingFile);
    smp->add_option("--seed", sample_seed, "initial-noise seed");
    smp->add_option("--label", label, "class label (num_classes = unconditional)");

    Overrides cmp_o;
    std::string cmp_ckpt;
    std::vector<std::string> settings;
    auto* cmp = app.add_subcommand("compare", "SQNR table over quantization settings");
    add_common(cmp, cmp_o);
    cmp->add_option("--checkpoint", cmp_ckpt, "checkpoint directory")->required();
    cmp->add_option("--setting", settings,
                    "fp or <A>a<W>w[:one_step|:multi_step][:per_channel|:per_group[:<g>]] (repeatable)");

    std::string csv;
    auto* rep = app.add_subcommand("report", "summarize ranges.csv, sqnr.csv or weights.csv");
    rep->add_option("csv", csv, "CSV file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("usage", e.what());
    }

    try {
        if (*init) {
            auto cfg = resolve(init_o);
            if (model_seed) cfg.model.seed = *model_seed;
            if (train_steps) cfg.train.steps = *train_steps;
            ditq::validate(cfg);
            std::cout << ditq::cmd_init(cfg, progress).string() << "\n";
        } else if (*cal) {
            auto cfg = resolve(cal_o);
            if (act_strategy) {
                cfg.quant.act_strategy =
                    *act_strategy == "one_step" ? ditq::ActStrategyKind::OneStep : ditq::ActStrategyKind::MultiStep;
            }
            if (weight_gran) {
                cfg.quant.weight_granularity = *weight_gran == "per_channel" ? ditq::WeightGranularityKind::PerChannel
                                                                             : ditq::WeightGranularityKind::PerGroup;
            }
            if (bits_act) cfg.quant.bits_act = *bits_act;
            if (bits_weight) cfg.quant.bits_weight = *bits_weight;
            if (group_size) cfg.quant.group_size = *group_size;
            ditq::validate(cfg);
            const auto out = ditq::cmd_calibrate(cfg, cal_ckpt, progress);
            std::cout << out.params.string() << "\n" << out.ranges.string() << "\n";
        } else if (*smp) {
            const auto cfg = resolve(smp_o);
            const auto out = ditq::cmd_sample(cfg, smp_ckpt, params ? std::optional<std::filesystem::path>(*params)
                                                                    : std::nullopt,
                                              sample_seed, label, progress);
            std::cout << out.tensor.string() << "\n" << out.png.string() << "\n";
        } else if (*cmp) {
            const auto cfg = resolve(cmp_o);
            std::vector<ditq::CompareSetting> list;
            for (const auto& s : settings) list.push_back(ditq::parse_compare_setting(s, cfg.quant.group_size));
            if (list.empty()) list = ditq::default_compare_settings(cfg.quant.group_size);
            const auto out = ditq::cmd_compare(cfg, cmp_ckpt, list, progress);
            for (const auto& row : out.rows) {
                std::cout << row.setting.name() << "\t" << row.setting.bits() << "\t"
                          << ditq::format_number(row.sqnr_db) << "\n";
            }
        } else if (*rep) {
            std::cout << ditq::cmd_report(csv);
        }
    } catch (const ditq::Error& e) {
        return report_error(std::string(ditq::to_string(e.code())), e.what());
    } catch (const std::exception& e) {
        return report_error("internal", e.what());
    }
    return 0;
}
