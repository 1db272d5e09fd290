// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ditq/config.hpp"
#include "ditq/diffusion.hpp"
#include "ditq/error.hpp"
#include "ditq/model.hpp"
#include "ditq/parallel.hpp"
#include "ditq/quant.hpp"
#include "ditq/rng.hpp"
#include <nlohmann/json.hpp>

namespace ditq {

// ---------------------------------------------------------------------------
// Strategy, records and calibration sets
// ---------------------------------------------------------------------------

/// OneStep observes only the first reverse step (t = T, maximal noise);
/// MultiStep observes the listed inference-step indices.
struct CalibrationStrategy {
    ActStrategyKind kind = ActStrategyKind::OneStep;
    std::vector<std::size_t> steps{0};

    static CalibrationStrategy one_step() { return {ActStrategyKind::OneStep, {0}}; }

    static CalibrationStrategy multi_step(int num_inference_steps) {
        CalibrationStrategy s{ActStrategyKind::MultiStep, {}};
        for (int k = 0; k < num_inference_steps; ++k) s.steps.push_back(static_cast<std::size_t>(k));
        return s;
    }

    static CalibrationStrategy multi_step(std::vector<std::size_t> steps) {
        std::sort(steps.begin(), steps.end());
        steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
        return {ActStrategyKind::MultiStep, std::move(steps)};
    }

    static CalibrationStrategy from_kind(ActStrategyKind kind, int num_inference_steps) {
        return kind == ActStrategyKind::OneStep ? one_step() : multi_step(num_inference_steps);
    }

    bool observes(std::size_t step) const { return std::binary_search(steps.begin(), steps.end(), step); }
};

inline void validate(const CalibrationStrategy& s, const SamplerConfig& cfg) {
    if (s.steps.empty()) fail(ErrorCode::Config, "calibration strategy observes no steps");
    if (!std::is_sorted(s.steps.begin(), s.steps.end())) fail(ErrorCode::Config, "strategy steps must be sorted");
    if (s.kind == ActStrategyKind::OneStep && (s.steps.size() != 1 || s.steps.front() != 0)) {
        fail(ErrorCode::Config, "one-step calibration observes exactly the first reverse step");
    }
    if (s.steps.back() >= static_cast<std::size_t>(cfg.num_inference_steps)) {
        fail(ErrorCode::Config, "strategy step " + std::to_string(s.steps.back()) + " exceeds the " +
                                    std::to_string(cfg.num_inference_steps) + " inference steps");
    }
}

struct StepRange {
    std::size_t step = 0;
    double min = 0.0;
    double max = 0.0;

    friend bool operator==(const StepRange&, const StepRange&) = default;
};

/// Observed input-activation range of one layer, per inference step.
struct CalibrationRecord {
    std::string layer_id;
    std::vector<StepRange> steps;  // sorted by step
    std::size_t sample_count = 0;

    void observe(std::size_t step, double lo, double hi) {
        auto it = std::lower_bound(steps.begin(), steps.end(), step,
                                   [](const StepRange& r, std::size_t s) { return r.step < s; });
        if (it != steps.end() && it->step == step) {
            it->min = std::min(it->min, lo);
            it->max = std::max(it->max, hi);
        } else {
            steps.insert(it, StepRange{step, lo, hi});
        }
    }

    friend bool operator==(const CalibrationRecord&, const CalibrationRecord&) = default;
};

/// Elementwise min/max per step, sample counts add. Associative and commutative.
inline CalibrationRecord merge(const CalibrationRecord& a, const CalibrationRecord& b) {
    if (a.layer_id != b.layer_id) {
        fail(ErrorCode::Contract, "cannot merge records of '" + a.layer_id + "' and '" + b.layer_id + "'");
    }
    CalibrationRecord out = a;
    for (const StepRange& r : b.steps) out.observe(r.step, r.min, r.max);
    out.sample_count += b.sample_count;
    return out;
}

inline std::vector<CalibrationRecord> merge(const std::vector<CalibrationRecord>& a,
                                            const std::vector<CalibrationRecord>& b) {
    if (a.size() != b.size()) fail(ErrorCode::Contract, "record lists differ in length");
    std::vector<CalibrationRecord> out;
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(merge(a[i], b[i]));
    return out;
}

struct CalibSample {
    std::uint64_t seed = 0;
    int label = 0;

    friend bool operator==(const CalibSample&, const CalibSample&) = default;
};

using CalibSet = std::vector<CalibSample>;

/// Seeds base_seed, base_seed + 1, ...; labels cycle through the classes.
inline CalibSet make_calib_set(int num_samples, std::uint64_t base_seed, int num_classes) {
    if (num_samples < 1) fail(ErrorCode::Config, "calibration set must not be empty");
    CalibSet set;
    for (int i = 0; i < num_samples; ++i) {
        set.push_back({base_seed + static_cast<std::uint64_t>(i), i % num_classes});
    }
    return set;
}

inline void validate(const CalibSet& set, const DenoiserModel& model) {
    if (set.empty()) fail(ErrorCode::Config, "calibration set must not be empty");
    for (const auto& s : set) model.check_label(s.label);
}

// ---------------------------------------------------------------------------
// Range collection
// ---------------------------------------------------------------------------

/// Trajectory of one calibration sample, observing layer inputs on the
/// strategy's steps. Stops after the last observed step.
inline std::vector<CalibrationRecord> collect_sample_ranges(const DenoiserModel& model, const NoiseSchedule& sched,
                                                            const SamplerConfig& cfg, const CalibSample& sample,
                                                            const CalibrationStrategy& strategy) {
    const auto layers = model.layers();
    std::unordered_map<std::string, std::size_t> index;
    std::vector<CalibrationRecord> records(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        index.emplace(layers[i]->id, i);
        records[i].layer_id = layers[i]->id;
        records[i].sample_count = 1;
    }

    std::size_t current_step = 0;
    const LayerObserver observer = [&](const std::string& id, const Tensor& input, const Tensor&) {
        const auto [lo, hi] = min_max(input.data());
        records[index.at(id)].observe(current_step, lo, hi);
    };
    const std::size_t last = strategy.steps.back();
    run_sampler(
        [&](const Tensor& x, int t, int label, std::size_t step) {
            current_step = step;
            return model.forward(x, t, label, strategy.observes(step) ? &observer : nullptr);
        },
        sched, cfg, sample.label, model.null_label(), initial_noise(model.sample_shape(), sample.seed),
        [&](const StepState& s) { return s.step < last; });
    return records;
}

/// Runs the full-precision sampler over the calibration set and returns one
/// merged record per quantizable layer, in layer order.
inline std::vector<CalibrationRecord> collect_ranges(const DenoiserModel& model, const NoiseSchedule& sched,
                                                     const SamplerConfig& cfg, const CalibSet& calib,
                                                     const CalibrationStrategy& strategy) {
    if (has_hooks(model)) {
        fail(ErrorCode::Contract, "collect_ranges needs a full-precision model; detach fake-quant hooks first");
    }
    validate(cfg, sched);
    validate(strategy, cfg);
    validate(calib, model);

    std::vector<std::vector<CalibrationRecord>> partial(calib.size());
    parallel_for(calib.size(),
                 [&](std::size_t i) { partial[i] = collect_sample_ranges(model, sched, cfg, calib[i], strategy); });
    std::vector<CalibrationRecord> out = std::move(partial.front());
    for (std::size_t i = 1; i < partial.size(); ++i) out = merge(out, partial[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Parameter derivation
// ---------------------------------------------------------------------------

/// Union of the strategy's observed ranges.
inline std::pair<double, double> strategy_range(const CalibrationRecord& record, const CalibrationStrategy& strategy) {
    double lo = std::numeric_limits<double>::infinity(), hi = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (const StepRange& r : record.steps) {
        if (!strategy.observes(r.step)) continue;
        lo = std::min(lo, r.min);
        hi = std::max(hi, r.max);
        any = true;
    }
    if (!any) fail(ErrorCode::Contract, "record for '" + record.layer_id + "' holds no step the strategy observes");
    return {lo, hi};
}

/// Per-tensor symmetric activation parameters on the signed grid.
inline QuantParams derive_act_params(const CalibrationRecord& record, int bits, const CalibrationStrategy& strategy) {
    const IntGrid grid = make_grid(bits, true);
    const auto [lo, hi] = strategy_range(record, strategy);
    return {grid, {scale_from_range(lo, hi, grid)}, Granularity::per_tensor()};
}

/// Largest divisor of c_in that does not exceed g.
inline std::size_t fallback_group_size(std::size_t c_in, std::size_t g) {
    for (std::size_t d = std::min(g, c_in); d >= 1; --d)
        if (c_in % d == 0) return d;
    return 1;
}

struct LayerWeightParams {
    std::string layer_id;
    QuantParams params;
    std::size_t requested_group_size = 0;  // 0 for per-channel
    std::size_t effective_group_size = 0;
};

struct WeightCalibration {
    std::vector<LayerWeightParams> layers;
    std::vector<std::string> warnings;
};

/// Weight parameters for every enumerated layer. Per-group requests whose
/// size does not divide C_in fall back to the largest divisor below it.
inline WeightCalibration derive_weight_params(const DenoiserModel& model, int bits, const Granularity& gran) {
    WeightCalibration out;
    for (const LinearLayer* l : model.layers()) {
        const std::size_t c_in = l->weight.shape()[1];
        LayerWeightParams entry{l->id, {}, 0, 0};
        if (gran.kind == Granularity::Kind::PerGroup) {
            const std::size_t g = fallback_group_size(c_in, gran.group_size);
            entry.requested_group_size = gran.group_size;
            entry.effective_group_size = g;
            if (g != gran.group_size) {
                out.warnings.push_back(l->id + ": group size " + std::to_string(gran.group_size) +
                                       " does not divide C_in = " + std::to_string(c_in) + ", using " +
                                       std::to_string(g));
            }
            entry.params = group_quantize(l->weight, bits, g).params;
        } else {
            entry.params = quantize_weights(l->weight, bits, gran).params;
        }
        out.layers.push_back(std::move(entry));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct LayerQuantization {
    std::string layer_id;
    std::optional<QuantParams> act;
    std::optional<QuantParams> weight;
    std::size_t requested_group_size = 0;
    std::size_t effective_group_size = 0;
};

struct QuantSetting {
    int bits_act = 8;
    int bits_weight = 8;
    ActStrategyKind act_strategy = ActStrategyKind::OneStep;
    WeightGranularityKind weight_granularity = WeightGranularityKind::PerChannel;
    int group_size = 128;

    Granularity weight_gran() const {
        return weight_granularity == WeightGranularityKind::PerGroup
                   ? Granularity::per_group(1, static_cast<std::size_t>(group_size))
                   : Granularity::per_channel(0);
    }

    friend bool operator==(const QuantSetting&, const QuantSetting&) = default;
};

inline QuantSetting setting_from(const QuantConfig& q) {
    return {q.bits_act, q.bits_weight, q.act_strategy, q.weight_granularity, q.group_size};
}

/// A hooked copy of the model plus every parameter that went into it.
struct QuantizedModelHandle {
    DenoiserModel model;
    QuantSetting setting;
    std::vector<LayerQuantization> layers;
    std::vector<std::string> warnings;
    std::vector<CalibrationRecord> records;
};

inline void attach_all(QuantizedModelHandle& handle) {
    for (const auto& l : handle.layers) attach_fake_quant(handle.model, l.layer_id, l.weight, l.act);
}

/// Builds the quantized handle from already-collected records.
inline QuantizedModelHandle build_quantized_model(const DenoiserModel& fp_model,
                                                  std::vector<CalibrationRecord> records,
                                                  const CalibrationStrategy& strategy, const QuantSetting& setting) {
    QuantizedModelHandle h{fp_model, setting, {}, {}, std::move(records)};
    detach_all(h.model);
    const WeightCalibration weights = derive_weight_params(fp_model, setting.bits_weight, setting.weight_gran());
    h.warnings = weights.warnings;
    for (std::size_t i = 0; i < weights.layers.size(); ++i) {
        const auto& w = weights.layers[i];
        const auto rec = std::find_if(h.records.begin(), h.records.end(),
                                      [&](const CalibrationRecord& r) { return r.layer_id == w.layer_id; });
        if (rec == h.records.end()) fail(ErrorCode::Contract, "no calibration record for '" + w.layer_id + "'");
        h.layers.push_back({w.layer_id, derive_act_params(*rec, setting.bits_act, strategy), w.params,
                            w.requested_group_size, w.effective_group_size});
    }
    attach_all(h);
    return h;
}

inline QuantizedModelHandle calibrate_pipeline(const DenoiserModel& model, const NoiseSchedule& sched,
                                               const SamplerConfig& cfg, const CalibSet& calib,
                                               const CalibrationStrategy& strategy, const QuantSetting& setting) {
    auto records = collect_ranges(model, sched, cfg, calib, strategy);
    return build_quantized_model(model, std::move(records), strategy, setting);
}

// ---------------------------------------------------------------------------
// Synthetic growing-noise scenario
// ---------------------------------------------------------------------------

inline constexpr const char* kSyntheticLayer = "synthetic";

/// Range record of a stand-in layer whose input at inference step k is
/// forward_diffuse(x0, t_k, eps).
inline CalibrationRecord synthetic_noise_record(const NoiseSchedule& sched, const SamplerConfig& cfg,
                                                const Tensor& x0, const Tensor& eps) {
    CalibrationRecord rec{kSyntheticLayer, {}, 1};
    const auto steps = inference_timesteps(sched.num_timesteps(), cfg.num_inference_steps);
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const Tensor x_t = forward_diffuse(x0, steps[k].t, eps, sched);
        const auto [lo, hi] = min_max(x_t.data());
        rec.observe(k, lo, hi);
    }
    return rec;
}

/// Largest max|x0| for which the first reverse step (t = T) is guaranteed
/// the widest min-max range over the inference steps, given max|eps|.
/// With a = sqrt(abar), b = sqrt(1 - abar) every step satisfies
/// max|x_t| <= a_t m0 + b_t M and max|x_T| >= b_T M - a_T m0, so
/// m0 <= (b_T - b_t) M / (a_t + a_T) for every t suffices.
inline double noise_dominated_amplitude(const NoiseSchedule& sched, const SamplerConfig& cfg, double max_abs_eps) {
    const auto steps = inference_timesteps(sched.num_timesteps(), cfg.num_inference_steps);
    const double ab_first = sched.alpha_bar(steps.front().t);
    const double a0 = std::sqrt(ab_first), b0 = std::sqrt(1.0 - ab_first);
    double bound = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < steps.size(); ++k) {
        const double ab = sched.alpha_bar(steps[k].t);
        bound = std::min(bound, (b0 - std::sqrt(1.0 - ab)) * max_abs_eps / (std::sqrt(ab) + a0));
    }
    return bound;
}

struct NoiseScenario {
    Tensor x0;
    Tensor eps;
};

/// Seeded image-like x0 scaled to half the noise-dominated amplitude, and
/// standard normal eps.
inline NoiseScenario make_growing_noise_scenario(const NoiseSchedule& sched, const SamplerConfig& cfg,
                                                 const Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    NoiseScenario sc{rng.uniform_tensor(shape, -1.0, 1.0), rng.normal_tensor(shape)};
    const auto [elo, ehi] = min_max(sc.eps.data());
    const auto [xlo, xhi] = min_max(sc.x0.data());
    const double max_eps = std::max(std::abs(elo), std::abs(ehi));
    const double max_x0 = std::max(std::abs(xlo), std::abs(xhi));
    const double bound = noise_dominated_amplitude(sched, cfg, max_eps);
    if (std::isfinite(bound) && max_x0 > 0.0) sc.x0 = scaled(sc.x0, 0.5 * bound / max_x0);
    return sc;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr int kParamsFileVersion = 1;

inline nlohmann::json to_json(const CalibrationRecord& r) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : r.steps) steps.push_back({{"step", s.step}, {"min", s.min}, {"max", s.max}});
    return {{"layer_id", r.layer_id}, {"sample_count", r.sample_count}, {"steps", steps}};
}

/// One JSON object per line, one line per layer.
inline std::string records_to_jsonl(const std::vector<CalibrationRecord>& records) {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
}

inline nlohmann::json params_to_json(const QuantizedModelHandle& h) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : h.layers) {
        nlohmann::json entry = {{"layer_id", l.layer_id}};
        entry["act"] = l.act ? to_json(*l.act) : nlohmann::json(nullptr);
        entry["weight"] = l.weight ? to_json(*l.weight) : nlohmann::json(nullptr);
        if (l.requested_group_size) {
            entry["requested_group_size"] = l.requested_group_size;
            entry["effective_group_size"] = l.effective_group_size;
        }
        layers.push_back(std::move(entry));
    }
    return {{"format", "ditq-params"},
            {"version", kParamsFileVersion},
            {"bits_act", h.setting.bits_act},
            {"bits_weight", h.setting.bits_weight},
            {"act_strategy", to_string(h.setting.act_strategy)},
            {"weight_granularity", to_string(h.setting.weight_granularity)},
            {"group_size", h.setting.group_size},
            {"layers", layers},
            {"warnings", h.warnings}};
}

/// Attaches the hooks described by a params file to `model`.
inline void apply_params_json(DenoiserModel& model, const nlohmann::json& j) {
    try {
        if (!j.is_object() || j.value("format", "") != "ditq-params") {
            fail(ErrorCode::Parse, "params file: field 'format' must be \"ditq-params\"");
        }
        if (j.value("version", 0) != kParamsFileVersion) fail(ErrorCode::Parse, "params file: unsupported version");
        if (!j.contains("layers") || !j.at("layers").is_array()) {
            fail(ErrorCode::Parse, "params file: missing field 'layers'");
        }
        detach_all(model);
        for (const auto& entry : j.at("layers")) {
            const auto id = entry.at("layer_id").get<std::string>();
            std::optional<QuantParams> act, weight;
            if (entry.contains("act") && !entry.at("act").is_null()) act = quant_params_from_json(entry.at("act"));
            if (entry.contains("weight") && !entry.at("weight").is_null()) {
                weight = quant_params_from_json(entry.at("weight"));
            }
            attach_fake_quant(model, id, weight, act);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Parse, std::string("params file: ") + e.what());
    }
}

}  // namespace ditq
