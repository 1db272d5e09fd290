// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ditq/calibration.hpp"
#include "ditq/diffusion.hpp"
#include "ditq/error.hpp"
#include "ditq/model.hpp"
#include "ditq/parallel.hpp"
#include "ditq/rng.hpp"
#include "ditq/tensor.hpp"
#include <nlohmann/json.hpp>

namespace ditq {

inline constexpr double kSqnrCapDb = 100.0;

/// Shortest decimal form that round-trips; used for every CSV number.
inline std::string format_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// Squared L2 distance ||v_hat - v||^2.
inline double quant_error(const Tensor& v, const Tensor& v_hat) {
    require_same_shape(v, v_hat, "quant_error");
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = v_hat[i] - v[i];
        acc += d * d;
    }
    return acc;
}

/// 10 log10 of a signal-to-noise power ratio, capped at kSqnrCapDb.
inline double ratio_to_db(double ratio) {
    if (std::isinf(ratio)) return kSqnrCapDb;
    return std::min(kSqnrCapDb, 10.0 * std::log10(ratio));
}

/// ||fp||^2 / ||q - fp||^2 for one pair; +inf when the error is zero.
inline double signal_to_noise_ratio(const Tensor& fp_out, const Tensor& q_out) {
    require_same_shape(fp_out, q_out, "sqnr");
    const double signal = sum_squares(fp_out);
    if (signal == 0.0) fail(ErrorCode::Contract, "sqnr: full-precision output is all zero, signal undefined");
    const double noise = quant_error(fp_out, q_out);
    if (noise == 0.0) return std::numeric_limits<double>::infinity();
    return signal / noise;
}

inline double sqnr_db(const Tensor& fp_out, const Tensor& q_out) {
    return ratio_to_db(signal_to_noise_ratio(fp_out, q_out));
}

/// Expectation over a batch: 10 log10 of the mean per-pair ratio.
inline double sqnr_db(std::span<const std::pair<Tensor, Tensor>> pairs) {
    if (pairs.empty()) fail(ErrorCode::Contract, "sqnr: empty batch");
    double total = 0.0;
    for (const auto& [fp, q] : pairs) total += signal_to_noise_ratio(fp, q);
    return ratio_to_db(total / static_cast<double>(pairs.size()));
}

// ---------------------------------------------------------------------------
// Per-step SQNR
// ---------------------------------------------------------------------------

inline constexpr const char* kOutputUnit = "output";

struct SqnrRow {
    std::string unit;  // "output" or a layer id
    std::size_t step = 0;
    double sqnr_db = 0.0;

    friend bool operator==(const SqnrRow&, const SqnrRow&) = default;
};

struct SqnrReport {
    std::vector<SqnrRow> rows;
    double aggregate_db = 0.0;  // mean of the output rows over steps

    friend bool operator==(const SqnrReport&, const SqnrReport&) = default;
};

namespace detail {

struct PowerPair {
    double signal = 0.0;
    double noise = 0.0;
};

inline double ratio_of(const PowerPair& p) {
    if (p.signal == 0.0) fail(ErrorCode::Contract, "sqnr: full-precision output is all zero, signal undefined");
    return p.noise == 0.0 ? std::numeric_limits<double>::infinity() : p.signal / p.noise;
}

}  // namespace detail

/// Guided noise predictions of the full-precision model along its own
/// trajectories, indexed [probe][step]. Shared across quantized settings.
struct FpReference {
    ModelConfig config;
    SamplerConfig sampler;
    CalibSet probes;
    std::vector<std::vector<Tensor>> eps;
};

inline FpReference fp_reference(const DenoiserModel& fp_model, const NoiseSchedule& sched, const SamplerConfig& cfg,
                                const CalibSet& probes) {
    validate(cfg, sched);
    validate(probes, fp_model);
    FpReference ref{fp_model.config(), cfg, probes,
                    std::vector<std::vector<Tensor>>(probes.size())};
    parallel_for(probes.size(), [&](std::size_t p) {
        Tensor x = initial_noise(fp_model.sample_shape(), probes[p].seed);
        run_sampler([&](const Tensor& xt, int t, int label, std::size_t) { return fp_model.predict(xt, t, label); },
                    sched, cfg, probes[p].label, fp_model.null_label(), x, [&](const StepState& st) {
                        ref.eps[p].push_back(*st.eps);
                        return true;
                    });
    });
    return ref;
}

namespace detail {

inline SqnrReport summarize(const std::vector<std::vector<std::vector<PowerPair>>>& power,
                            const std::vector<std::string>& unit_names) {
    const std::size_t probes = power.size(), steps = power.front().size();
    SqnrReport report;
    double total = 0.0;
    for (std::size_t u = 0; u < unit_names.size(); ++u) {
        for (std::size_t k = 0; k < steps; ++k) {
            double mean_ratio = 0.0;
            for (std::size_t p = 0; p < probes; ++p) mean_ratio += ratio_of(power[p][k][u]);
            mean_ratio /= static_cast<double>(probes);
            const double db = ratio_to_db(mean_ratio);
            report.rows.push_back({unit_names[u], k, db});
            if (u == 0) total += db;
        }
    }
    report.aggregate_db = total / static_cast<double>(steps);
    return report;
}

}  // namespace detail

/// Output SQNR of a quantized model against a cached full-precision
/// reference. The quantized model follows its own trajectory x_hat_t from
/// the same initial noise.
inline SqnrReport per_step_sqnr(const FpReference& ref, const DenoiserModel& q_model, const NoiseSchedule& sched) {
    if (!(ref.config == q_model.config())) {
        fail(ErrorCode::Contract, "per_step_sqnr: reference and quantized models differ in architecture");
    }
    const SamplerConfig& cfg = ref.sampler;
    validate(cfg, sched);
    const auto steps = static_cast<std::size_t>(cfg.num_inference_steps);
    std::vector<std::vector<std::vector<detail::PowerPair>>> power(
        ref.probes.size(), std::vector<std::vector<detail::PowerPair>>(steps, std::vector<detail::PowerPair>(1)));
    parallel_for(ref.probes.size(), [&](std::size_t p) {
        Tensor x = initial_noise(q_model.sample_shape(), ref.probes[p].seed);
        run_sampler([&](const Tensor& xt, int t, int label, std::size_t) { return q_model.predict(xt, t, label); },
                    sched, cfg, ref.probes[p].label, q_model.null_label(), x, [&](const StepState& st) {
                        const Tensor& fp = ref.eps[p][st.step];
                        power[p][st.step][0] = {sum_squares(fp), quant_error(fp, *st.eps)};
                        return true;
                    });
    });
    return detail::summarize(power, {kOutputUnit});
}

/// Paired trajectories from each probe seed: the full-precision model follows
/// x_t and the quantized model its own x_hat_t. At every step the guided
/// noise predictions are compared; with per_layer the outputs of every
/// quantizable layer (both guidance branches) are compared as well.
inline SqnrReport per_step_sqnr(const DenoiserModel& fp_model, const DenoiserModel& q_model,
                                const NoiseSchedule& sched, const SamplerConfig& cfg, const CalibSet& probes,
                                bool per_layer = false) {
    if (!(fp_model.config() == q_model.config())) {
        fail(ErrorCode::Contract, "per_step_sqnr: full-precision and quantized models differ in architecture");
    }
    if (!per_layer) return per_step_sqnr(fp_reference(fp_model, sched, cfg, probes), q_model, sched);
    validate(cfg, sched);
    validate(probes, fp_model);

    const auto steps = inference_timesteps(sched.num_timesteps(), cfg.num_inference_steps);
    std::vector<std::string> units{kOutputUnit};
    for (const LinearLayer* l : fp_model.layers()) units.push_back(l->id);
    const std::size_t num_layers = units.size() - 1;

    // power[probe][step][unit]
    std::vector<std::vector<std::vector<detail::PowerPair>>> power(
        probes.size(),
        std::vector<std::vector<detail::PowerPair>>(steps.size(), std::vector<detail::PowerPair>(units.size())));

    parallel_for(probes.size(), [&](std::size_t p) {
        const CalibSample& probe = probes[p];
        Tensor x_fp = initial_noise(fp_model.sample_shape(), probe.seed);
        Tensor x_q = x_fp;
        for (std::size_t k = 0; k < steps.size(); ++k) {
            const Timestep ts = steps[k];
            std::vector<Tensor> fp_outputs;
            std::vector<Tensor> q_outputs;
            const LayerObserver capture_fp = [&](const std::string&, const Tensor&, const Tensor& y) {
                fp_outputs.push_back(y);
            };
            const LayerObserver capture_q = [&](const std::string&, const Tensor&, const Tensor& y) {
                q_outputs.push_back(y);
            };
            const Tensor eps_fp = cfg_combine(fp_model.forward(x_fp, ts.t, fp_model.null_label(), &capture_fp),
                                              fp_model.forward(x_fp, ts.t, probe.label, &capture_fp),
                                              cfg.guidance_scale);
            const Tensor eps_q = cfg_combine(q_model.forward(x_q, ts.t, q_model.null_label(), &capture_q),
                                             q_model.forward(x_q, ts.t, probe.label, &capture_q), cfg.guidance_scale);

            auto& slot = power[p][k];
            slot[0] = {sum_squares(eps_fp), quant_error(eps_fp, eps_q)};
            // Observers fire in layer order, once per guidance branch.
            for (std::size_t i = 0; i < fp_outputs.size(); ++i) {
                auto& u = slot[1 + i % num_layers];
                u.signal += sum_squares(fp_outputs[i]);
                u.noise += quant_error(fp_outputs[i], q_outputs[i]);
            }
            x_fp = ddim_step(x_fp, eps_fp, ts.t, ts.t_prev, sched);
            x_q = ddim_step(x_q, eps_q, ts.t, ts.t_prev, sched);
        }
    });
    return detail::summarize(power, units);
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

inline constexpr const char* kRangesHeader = "layer_id,step,min,max";
inline constexpr const char* kSqnrHeader = "unit,step,sqnr_db";
inline constexpr const char* kWeightsHeader = "layer_id,channel,min,max,dispersion";

/// Per-layer, per-step input-activation range table.
inline std::string range_report(const std::vector<CalibrationRecord>& records) {
    std::string out = std::string(kRangesHeader) + "\n";
    for (const auto& r : records)
        for (const auto& s : r.steps)
            out += r.layer_id + "," + std::to_string(s.step) + "," + format_number(s.min) + "," +
                   format_number(s.max) + "\n";
    return out;
}

inline std::string sqnr_csv(const SqnrReport& report) {
    std::string out = std::string(kSqnrHeader) + "\n";
    for (const auto& r : report.rows)
        out += r.unit + "," + std::to_string(r.step) + "," + format_number(r.sqnr_db) + "\n";
    return out;
}

struct ChannelDispersion {
    std::string layer_id;
    std::size_t channel = 0;
    double min = 0.0;
    double max = 0.0;
    double dispersion = 1.0;  // max|w| / median|w|
};

inline double median(std::vector<double> v) {
    if (v.empty()) fail(ErrorCode::Contract, "median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// max|w| / median|w| of one channel. An all-zero channel reports 1; a
/// zero median under a nonzero maximum reports +inf.
inline double dispersion_ratio(std::span<const double> channel) {
    std::vector<double> mags;
    for (double v : channel) mags.push_back(std::abs(v));
    const double mx = *std::max_element(mags.begin(), mags.end());
    if (mx == 0.0) return 1.0;
    const double med = median(std::move(mags));
    if (med == 0.0) return std::numeric_limits<double>::infinity();
    return mx / med;
}

inline std::vector<ChannelDispersion> weight_dispersion(const DenoiserModel& model) {
    std::vector<ChannelDispersion> out;
    for (const LinearLayer* l : model.layers()) {
        const std::size_t c_out = l->weight.shape()[0], c_in = l->weight.shape()[1];
        for (std::size_t c = 0; c < c_out; ++c) {
            const std::span<const double> row = l->weight.data().subspan(c * c_in, c_in);
            const auto [lo, hi] = min_max(row);
            out.push_back({l->id, c, lo, hi, dispersion_ratio(row)});
        }
    }
    return out;
}

/// Per-layer, per-output-channel weight range and dispersion table.
inline std::string weight_dispersion_report(const DenoiserModel& model) {
    std::string out = std::string(kWeightsHeader) + "\n";
    for (const auto& d : weight_dispersion(model))
        out += d.layer_id + "," + std::to_string(d.channel) + "," + format_number(d.min) + "," +
               format_number(d.max) + "," + format_number(d.dispersion) + "\n";
    return out;
}

inline nlohmann::json report_metadata() {
    return {{"sqnr_cap_db", kSqnrCapDb},
            {"sqnr_log_base", 10},
            {"sqnr_expectation", "mean of per-probe power ratios"},
            {"rng", kRngAlgorithm}};
}

}  // namespace ditq
