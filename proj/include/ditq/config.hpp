// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "ditq/diffusion.hpp"
#include "ditq/error.hpp"
#include "ditq/model.hpp"
#include <nlohmann/json.hpp>

namespace ditq {

enum class ActStrategyKind { OneStep, MultiStep };
enum class WeightGranularityKind { PerChannel, PerGroup };

inline std::string to_string(ActStrategyKind k) { return k == ActStrategyKind::OneStep ? "one_step" : "multi_step"; }
inline std::string to_string(WeightGranularityKind k) {
    return k == WeightGranularityKind::PerChannel ? "per_channel" : "per_group";
}

struct ScheduleConfig {
    int num_timesteps = kDefaultTrainTimesteps;
    double beta_start = kDefaultBetaStart;
    double beta_end = kDefaultBetaEnd;

    friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct QuantConfig {
    int bits_act = 8;
    int bits_weight = 8;
    ActStrategyKind act_strategy = ActStrategyKind::OneStep;
    WeightGranularityKind weight_granularity = WeightGranularityKind::PerChannel;
    int group_size = 128;

    friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

struct SampleSetConfig {
    int num_samples = 16;
    std::uint64_t seed = 0;

    friend bool operator==(const SampleSetConfig&, const SampleSetConfig&) = default;
};

/// Optional epsilon-prediction pre-training run by `init`; 0 steps keeps the
/// random initialization.
struct TrainConfig {
    int steps = 0;
    int batch_size = 4;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct ExperimentConfig {
    ModelConfig model;
    ScheduleConfig schedule;
    SamplerConfig sampler;
    QuantConfig quant;
    SampleSetConfig calib{16, 0};
    SampleSetConfig probes{8, 1000};
    TrainConfig train;
    std::string output_dir = "out";

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

namespace detail {

/// Reads fields of one JSON object, rejecting unknown keys and reporting
/// errors with the dotted field path.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) fail(ErrorCode::Parse, "field '" + display(path_) + "' must be an object");
    }

    void finish() const {
        for (const auto& [key, value] : obj_.items()) {
            if (!seen_.count(key)) fail(ErrorCode::Parse, "unknown field '" + qualified(key) + "'");
        }
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        const auto& v = obj_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) type_error(key, "a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) type_error(key, "an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_integer() && !v.is_number_unsigned() && v.template get<std::int64_t>() < 0) {
                    type_error(key, "a non-negative integer");
                }
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) type_error(key, "a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) type_error(key, "a string");
        }
        out = v.template get<T>();
    }

    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        return obj_.contains(key) ? &obj_.at(key) : nullptr;
    }

    std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    [[noreturn]] void type_error(const char* key, const char* what) const {
        fail(ErrorCode::Parse, "field '" + qualified(key) + "' must be " + what);
    }

private:
    static std::string display(const std::string& p) { return p.empty() ? "<root>" : p; }

    const nlohmann::json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"image_size", c.image_size},
            {"patch_size", c.patch_size},
            {"channels", c.channels},
            {"hidden_dim", c.hidden_dim},
            {"depth", c.depth},
            {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},
            {"num_classes", c.num_classes},
            {"seed", c.seed},
            {"outlier_fraction", c.outlier_fraction},
            {"outlier_scale", c.outlier_scale}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model") {
    ModelConfig c;
    detail::ObjectReader r(j, path);
    r.read("image_size", c.image_size);
    r.read("patch_size", c.patch_size);
    r.read("channels", c.channels);
    r.read("hidden_dim", c.hidden_dim);
    r.read("depth", c.depth);
    r.read("heads", c.heads);
    r.read("mlp_ratio", c.mlp_ratio);
    r.read("num_classes", c.num_classes);
    r.read("seed", c.seed);
    r.read("outlier_fraction", c.outlier_fraction);
    r.read("outlier_scale", c.outlier_scale);
    r.finish();
    return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {
        {"model", to_json(c.model)},
        {"schedule",
         {{"T", c.schedule.num_timesteps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
        {"sampler",
         {{"num_inference_steps", c.sampler.num_inference_steps},
          {"guidance_scale", c.sampler.guidance_scale},
          {"eta", c.sampler.eta}}},
        {"quant",
         {{"bits_act", c.quant.bits_act},
          {"bits_weight", c.quant.bits_weight},
          {"act_strategy", to_string(c.quant.act_strategy)},
          {"weight_granularity", to_string(c.quant.weight_granularity)},
          {"group_size", c.quant.group_size}}},
        {"calib", {{"num_samples", c.calib.num_samples}, {"seed", c.calib.seed}}},
        {"probes", {{"num_samples", c.probes.num_samples}, {"seed", c.probes.seed}}},
        {"train",
         {{"steps", c.train.steps},
          {"batch_size", c.train.batch_size},
          {"learning_rate", c.train.learning_rate},
          {"seed", c.train.seed}}},
        {"output_dir", c.output_dir},
    };
}

inline void validate(const ExperimentConfig& c) {
    validate(c.model);
    const NoiseSchedule sched = linear_beta_schedule(c.schedule.num_timesteps, c.schedule.beta_start,
                                                     c.schedule.beta_end);
    validate(c.sampler, sched);
    make_grid(c.quant.bits_act, true);
    make_grid(c.quant.bits_weight, true);
    if (c.quant.group_size < 1) fail(ErrorCode::Config, "quant.group_size must be >= 1");
    if (c.calib.num_samples < 1) fail(ErrorCode::Config, "calib.num_samples must be >= 1");
    if (c.probes.num_samples < 1) fail(ErrorCode::Config, "probes.num_samples must be >= 1");
    if (c.train.steps < 0) fail(ErrorCode::Config, "train.steps must be >= 0");
    if (c.train.batch_size < 1) fail(ErrorCode::Config, "train.batch_size must be >= 1");
    if (!(c.train.learning_rate > 0.0)) fail(ErrorCode::Config, "train.learning_rate must be positive");
    if (c.output_dir.empty()) fail(ErrorCode::Config, "output_dir must not be empty");
}

/// Missing fields keep their defaults; unknown fields are rejected.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    {
        detail::ObjectReader root(j, "");
        if (const auto* m = root.child("model")) c.model = model_config_from_json(*m, "model");
        if (const auto* s = root.child("schedule")) {
            detail::ObjectReader r(*s, "schedule");
            r.read("T", c.schedule.num_timesteps);
            r.read("beta_start", c.schedule.beta_start);
            r.read("beta_end", c.schedule.beta_end);
            r.finish();
        }
        if (const auto* s = root.child("sampler")) {
            detail::ObjectReader r(*s, "sampler");
            r.read("num_inference_steps", c.sampler.num_inference_steps);
            r.read("guidance_scale", c.sampler.guidance_scale);
            r.read("eta", c.sampler.eta);
            r.finish();
        }
        if (const auto* q = root.child("quant")) {
            detail::ObjectReader r(*q, "quant");
            r.read("bits_act", c.quant.bits_act);
            r.read("bits_weight", c.quant.bits_weight);
            std::string strategy = to_string(c.quant.act_strategy);
            r.read("act_strategy", strategy);
            if (strategy == "one_step") {
                c.quant.act_strategy = ActStrategyKind::OneStep;
            } else if (strategy == "multi_step") {
                c.quant.act_strategy = ActStrategyKind::MultiStep;
            } else {
                fail(ErrorCode::Parse, "field 'quant.act_strategy' must be one_step or multi_step, got '" +
                                           strategy + "'");
            }
            std::string gran = to_string(c.quant.weight_granularity);
            r.read("weight_granularity", gran);
            if (gran == "per_channel") {
                c.quant.weight_granularity = WeightGranularityKind::PerChannel;
            } else if (gran == "per_group") {
                c.quant.weight_granularity = WeightGranularityKind::PerGroup;
            } else {
                fail(ErrorCode::Parse, "field 'quant.weight_granularity' must be per_channel or per_group, got '" +
                                           gran + "'");
            }
            r.read("group_size", c.quant.group_size);
            r.finish();
        }
        for (auto [key, target] : {std::pair{"calib", &c.calib}, std::pair{"probes", &c.probes}}) {
            if (const auto* s = root.child(key)) {
                detail::ObjectReader r(*s, key);
                r.read("num_samples", target->num_samples);
                r.read("seed", target->seed);
                r.finish();
            }
        }
        if (const auto* t = root.child("train")) {
            detail::ObjectReader r(*t, "train");
            r.read("steps", c.train.steps);
            r.read("batch_size", c.train.batch_size);
            r.read("learning_rate", c.train.learning_rate);
            r.read("seed", c.train.seed);
            r.finish();
        }
        root.read("output_dir", c.output_dir);
        root.finish();
    }
    validate(c);
    return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::Parse, "'" + path + "' is not valid JSON: " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
    out << text;
    if (!out) fail(ErrorCode::Io, "failed writing '" + path + "'");
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    return experiment_config_from_json(read_json_file(path));
}

inline NoiseSchedule make_schedule(const ScheduleConfig& s) {
    return linear_beta_schedule(s.num_timesteps, s.beta_start, s.beta_end);
}

}  // namespace ditq
