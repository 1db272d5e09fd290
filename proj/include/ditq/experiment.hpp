// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ditq/calibration.hpp"
#include "ditq/checkpoint.hpp"
#include "ditq/config.hpp"
#include "ditq/error.hpp"
#include "ditq/metrics.hpp"
#include "ditq/model.hpp"
#include "ditq/png.hpp"
#include "ditq/train.hpp"

namespace ditq {

/// Receives one human-readable progress line at a time.
using Progress = std::function<void(const std::string&)>;

namespace detail {

inline void note(const Progress& progress, const std::string& msg) {
    if (progress) progress(msg);
}

inline std::filesystem::path prepare_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::Io, "cannot create output directory '" + dir.string() + "': " + ec.message());
    return dir;
}

inline std::string path_str(const std::filesystem::path& p) { return p.string(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

/// Builds the seeded model (optionally trained) and writes
/// <output_dir>/checkpoint. Returns the checkpoint directory.
inline std::filesystem::path cmd_init(const ExperimentConfig& cfg, const Progress& progress = {}) {
    validate(cfg);
    DenoiserModel model = init_model(cfg.model);
    if (cfg.train.steps > 0) {
        detail::note(progress, "training " + std::to_string(cfg.train.steps) + " steps");
        const TrainReport rep = train(model, make_schedule(cfg.schedule), cfg.train);
        detail::note(progress, "final batch loss " + format_number(rep.losses.back()));
    }
    const auto dir = detail::prepare_dir(cfg.output_dir) / "checkpoint";
    save_checkpoint(dir, model);
    detail::note(progress, "wrote " + dir.string() + " (" + std::to_string(parameter_count(cfg.model)) +
                               " parameters)");
    return dir;
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

struct CalibrateOutputs {
    std::filesystem::path params;
    std::filesystem::path ranges;
    std::filesystem::path records;
    std::filesystem::path weights;
};

/// Runs the calibration pipeline for cfg.quant and writes params.json,
/// ranges.csv, records.jsonl and weights.csv into output_dir.
inline CalibrateOutputs cmd_calibrate(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                      const Progress& progress = {}) {
    validate(cfg);
    const DenoiserModel model = load_checkpoint(checkpoint);
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    const CalibSet calib = make_calib_set(cfg.calib.num_samples, cfg.calib.seed, model.config().num_classes);
    const auto strategy = CalibrationStrategy::from_kind(cfg.quant.act_strategy, cfg.sampler.num_inference_steps);
    detail::note(progress, "calibrating (" + to_string(cfg.quant.act_strategy) + ", " +
                               std::to_string(calib.size()) + " samples)");
    const QuantizedModelHandle handle =
        calibrate_pipeline(model, sched, cfg.sampler, calib, strategy, setting_from(cfg.quant));
    for (const auto& w : handle.warnings) detail::note(progress, "warning: " + w);

    const auto dir = detail::prepare_dir(cfg.output_dir);
    CalibrateOutputs out{dir / "params.json", dir / "ranges.csv", dir / "records.jsonl", dir / "weights.csv"};
    write_text_file(detail::path_str(out.params), params_to_json(handle).dump(2) + "\n");
    write_text_file(detail::path_str(out.ranges), range_report(handle.records));
    write_text_file(detail::path_str(out.records), records_to_jsonl(handle.records));
    write_text_file(detail::path_str(out.weights), weight_dispersion_report(model));
    return out;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleOutputs {
    std::filesystem::path tensor;
    std::filesystem::path png;
    Tensor sample;
};

inline constexpr const char* kSampleTensorName = "sample";

/// Samples one image from the checkpoint, quantized when a params file is
/// given. Writes sample.bin (tensor archive) and sample.png.
inline SampleOutputs cmd_sample(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                const std::optional<std::filesystem::path>& params, std::uint64_t seed, int label,
                                const Progress& progress = {}) {
    validate(cfg);
    DenoiserModel model = load_checkpoint(checkpoint);
    model.check_label(label);
    if (params) {
        detail::note(progress, "applying " + params->string());
        apply_params_json(model, read_json_file(params->string()));
    }
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    Tensor x = sample(model, sched, cfg.sampler, label, seed);
    if (!x.all_finite()) fail(ErrorCode::Contract, "sample diverged to non-finite values");

    const auto dir = detail::prepare_dir(cfg.output_dir);
    SampleOutputs out{dir / "sample.bin", dir / "sample.png", x};
    write_archive(detail::path_str(out.tensor), {{kSampleTensorName, x}});
    write_png(detail::path_str(out.png), render_image(x));
    return out;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// One row of the comparison table; `quant` is empty for full precision.
struct CompareSetting {
    std::optional<QuantSetting> quant;

    std::string name() const {
        if (!quant) return "fp";
        std::string n = std::to_string(quant->bits_act) + "a" + std::to_string(quant->bits_weight) + "w_" +
                        to_string(quant->act_strategy) + "_" + to_string(quant->weight_granularity);
        if (quant->weight_granularity == WeightGranularityKind::PerGroup) n += "_g" + std::to_string(quant->group_size);
        return n;
    }

    std::string bits() const {
        return quant ? std::to_string(quant->bits_act) + "/" + std::to_string(quant->bits_weight) : "32fp/32fp";
    }

    friend bool operator==(const CompareSetting&, const CompareSetting&) = default;
};

/// Parses "fp" or "<A>a<W>w[:one_step|:multi_step][:per_channel|:per_group[:<g>]]".
/// Omitted parts default to one_step, per_channel and `default_group`.
inline CompareSetting parse_compare_setting(std::string_view text, int default_group = 128) {
    const std::string src(text);
    auto bad = [&](const std::string& why) -> CompareSetting {
        fail(ErrorCode::Config, "setting '" + src + "': " + why);
    };
    if (text == "fp") return {};
    std::vector<std::string> parts;
    std::stringstream ss(src);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.empty()) return bad("empty");

    QuantSetting q;
    q.group_size = default_group;
    const std::string& bits = parts[0];
    const auto a = bits.find('a');
    if (a == std::string::npos || bits.empty() || bits.back() != 'w') return bad("expected <A>a<W>w, e.g. 8a4w");
    auto parse_int = [&](std::string_view s, int& v) {
        const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        return r.ec == std::errc() && r.ptr == s.data() + s.size();
    };
    const std::string_view bits_view(bits);
    if (!parse_int(bits_view.substr(0, a), q.bits_act) ||
        !parse_int(bits_view.substr(a + 1, bits.size() - a - 2), q.bits_weight)) {
        return bad("expected <A>a<W>w, e.g. 8a4w");
    }
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const std::string& p = parts[i];
        if (p == "one_step") {
            q.act_strategy = ActStrategyKind::OneStep;
        } else if (p == "multi_step") {
            q.act_strategy = ActStrategyKind::MultiStep;
        } else if (p == "per_channel") {
            q.weight_granularity = WeightGranularityKind::PerChannel;
        } else if (p == "per_group") {
            q.weight_granularity = WeightGranularityKind::PerGroup;
            if (i + 1 < parts.size() && !parts[i + 1].empty() &&
                std::isdigit(static_cast<unsigned char>(parts[i + 1][0]))) {
                if (!parse_int(parts[i + 1], q.group_size) || q.group_size < 1) return bad("invalid group size");
                ++i;
            }
        } else {
            return bad("unknown part '" + p + "'");
        }
    }
    make_grid(q.bits_act, true);
    make_grid(q.bits_weight, true);
    return {q};
}

/// FP, 8A8W multi-step, 8A8W one-step, 8A4W per-channel, 8A4W per-group
/// (the last two with one-step activation calibration).
inline std::vector<CompareSetting> default_compare_settings(int group_size = 128) {
    auto q = [&](int a, int w, ActStrategyKind s, WeightGranularityKind g) {
        return CompareSetting{QuantSetting{a, w, s, g, group_size}};
    };
    using A = ActStrategyKind;
    using G = WeightGranularityKind;
    return {CompareSetting{}, q(8, 8, A::MultiStep, G::PerChannel), q(8, 8, A::OneStep, G::PerChannel),
            q(8, 4, A::OneStep, G::PerChannel), q(8, 4, A::OneStep, G::PerGroup)};
}

struct CompareRow {
    CompareSetting setting;
    double sqnr_db = 0.0;  // mean output SQNR over steps
    std::vector<std::string> warnings;
    SqnrReport report;
};

struct CompareOutputs {
    std::filesystem::path summary;
    std::filesystem::path sqnr;
    std::filesystem::path weights;
    std::vector<CompareRow> rows;
};

inline nlohmann::json compare_summary_json(const ExperimentConfig& cfg, const ModelConfig& model,
                                           const std::vector<CompareRow>& rows) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row = {{"setting", r.setting.name()}, {"bits", r.setting.bits()}, {"sqnr_db", r.sqnr_db}};
        if (r.setting.quant) {
            row["act_strategy"] = to_string(r.setting.quant->act_strategy);
            row["weight_granularity"] = to_string(r.setting.quant->weight_granularity);
            if (r.setting.quant->weight_granularity == WeightGranularityKind::PerGroup) {
                row["group_size"] = r.setting.quant->group_size;
            }
        }
        row["warnings"] = r.warnings;
        table.push_back(std::move(row));
    }
    return {{"format", "ditq-summary"},
            {"version", 1},
            {"metadata", report_metadata()},
            {"model", to_json(model)},
            {"sampler",
             {{"num_inference_steps", cfg.sampler.num_inference_steps},
              {"guidance_scale", cfg.sampler.guidance_scale}}},
            {"calib", {{"num_samples", cfg.calib.num_samples}, {"seed", cfg.calib.seed}}},
            {"probes", {{"num_samples", cfg.probes.num_samples}, {"seed", cfg.probes.seed}}},
            {"rows", table}};
}

/// Table-style comparison: every setting is calibrated on the same calib set
/// and measured on the same probes against one cached full-precision
/// reference. Writes summary.json, sqnr.csv (the unit column names the
/// setting) and weights.csv.
inline CompareOutputs cmd_compare(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                  const std::vector<CompareSetting>& settings, const Progress& progress = {}) {
    validate(cfg);
    if (settings.empty()) fail(ErrorCode::Config, "compare: no settings given");
    const DenoiserModel model = load_checkpoint(checkpoint);
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    const int classes = model.config().num_classes;
    const CalibSet calib = make_calib_set(cfg.calib.num_samples, cfg.calib.seed, classes);
    const CalibSet probes = make_calib_set(cfg.probes.num_samples, cfg.probes.seed, classes);

    std::map<ActStrategyKind, std::vector<CalibrationRecord>> records;
    auto records_for = [&](ActStrategyKind kind) -> const std::vector<CalibrationRecord>& {
        auto it = records.find(kind);
        if (it == records.end()) {
            detail::note(progress, "collecting " + to_string(kind) + " ranges");
            const auto strategy = CalibrationStrategy::from_kind(kind, cfg.sampler.num_inference_steps);
            it = records.emplace(kind, collect_ranges(model, sched, cfg.sampler, calib, strategy)).first;
        }
        return it->second;
    };

    detail::note(progress, "full-precision reference over " + std::to_string(probes.size()) + " probes");
    const FpReference ref = fp_reference(model, sched, cfg.sampler, probes);

    CompareOutputs out;
    for (const auto& s : settings) {
        detail::note(progress, "setting " + s.name());
        CompareRow row{s, 0.0, {}, {}};
        if (s.quant) {
            const auto strategy = CalibrationStrategy::from_kind(s.quant->act_strategy, cfg.sampler.num_inference_steps);
            const QuantizedModelHandle h =
                build_quantized_model(model, records_for(s.quant->act_strategy), strategy, *s.quant);
            row.warnings = h.warnings;
            row.report = per_step_sqnr(ref, h.model, sched);
        } else {
            row.report = per_step_sqnr(ref, model, sched);
        }
        row.sqnr_db = row.report.aggregate_db;
        detail::note(progress, "  mean output SQNR " + format_number(row.sqnr_db) + " dB");
        out.rows.push_back(std::move(row));
    }

    const auto dir = detail::prepare_dir(cfg.output_dir);
    out.summary = dir / "summary.json";
    out.sqnr = dir / "sqnr.csv";
    out.weights = dir / "weights.csv";
    std::string csv = std::string(kSqnrHeader) + "\n";
    for (const auto& r : out.rows)
        for (const auto& row : r.report.rows)
            csv += r.setting.name() + "," + std::to_string(row.step) + "," + format_number(row.sqnr_db) + "\n";
    write_text_file(detail::path_str(out.summary), compare_summary_json(cfg, model.config(), out.rows).dump(2) + "\n");
    write_text_file(detail::path_str(out.sqnr), csv);
    write_text_file(detail::path_str(out.weights), weight_dispersion_report(model));
    return out;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

enum class CsvKind { Ranges, Sqnr, Weights };

inline constexpr std::size_t kReportTopK = 10;

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return fields;
}

inline double parse_csv_number(const std::string& s, const std::string& where) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        fail(ErrorCode::Parse, where + ": invalid number '" + s + "'");
    }
    return v;
}

inline std::size_t parse_csv_index(const std::string& s, const std::string& where) {
    std::size_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        fail(ErrorCode::Parse, where + ": invalid index '" + s + "'");
    }
    return v;
}

// Insertion-ordered group of rows sharing a key.
template <typename T>
struct OrderedGroups {
    std::vector<std::string> order;
    std::map<std::string, T> groups;

    T& operator[](const std::string& key) {
        auto [it, inserted] = groups.try_emplace(key);
        if (inserted) order.push_back(key);
        return it->second;
    }
};

}  // namespace detail

/// Text summary of a ranges, sqnr or weights CSV, detected by its header.
/// `source` names the input in messages; schema errors name the line.
inline std::string report_csv(const std::string& text, const std::string& source = "input") {
    std::istringstream in(text);
    std::string header;
    if (!std::getline(in, header)) fail(ErrorCode::Parse, source + ":1: missing header");
    if (!header.empty() && header.back() == '\r') header.pop_back();
    CsvKind kind;
    std::size_t width = 0;
    if (header == kRangesHeader) {
        kind = CsvKind::Ranges;
        width = 4;
    } else if (header == kSqnrHeader) {
        kind = CsvKind::Sqnr;
        width = 3;
    } else if (header == kWeightsHeader) {
        kind = CsvKind::Weights;
        width = 5;
    } else {
        fail(ErrorCode::Parse, source + ":1: unrecognized header '" + header + "'");
    }

    struct RangeAgg {
        std::size_t steps = 0;
        double min = 0.0, max = 0.0;
    };
    struct SqnrAgg {
        std::size_t steps = 0;
        double sum = 0.0, worst = 0.0;
        std::size_t worst_step = 0;
    };
    struct Disp {
        std::string layer;
        std::size_t channel;
        double dispersion;
    };
    detail::OrderedGroups<RangeAgg> ranges;
    detail::OrderedGroups<SqnrAgg> sqnr;
    detail::OrderedGroups<std::size_t> weight_layers;
    std::vector<Disp> disps;

    std::size_t rows = 0, line_no = 1;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto f = detail::split_csv_line(line);
        if (f.size() != width) {
            fail(ErrorCode::Parse, where + ": expected " + std::to_string(width) + " fields, got " +
                                       std::to_string(f.size()));
        }
        if (f[0].empty()) fail(ErrorCode::Parse, where + ": empty " + (kind == CsvKind::Sqnr ? "unit" : "layer_id"));
        ++rows;
        if (kind == CsvKind::Ranges) {
            detail::parse_csv_index(f[1], where);
            const double lo = detail::parse_csv_number(f[2], where), hi = detail::parse_csv_number(f[3], where);
            if (lo > hi) fail(ErrorCode::Parse, where + ": min exceeds max");
            RangeAgg& a = ranges[f[0]];
            a.min = a.steps ? std::min(a.min, lo) : lo;
            a.max = a.steps ? std::max(a.max, hi) : hi;
            ++a.steps;
        } else if (kind == CsvKind::Sqnr) {
            const std::size_t step = detail::parse_csv_index(f[1], where);
            const double db = detail::parse_csv_number(f[2], where);
            SqnrAgg& a = sqnr[f[0]];
            if (!a.steps || db < a.worst) {
                a.worst = db;
                a.worst_step = step;
            }
            a.sum += db;
            ++a.steps;
        } else {
            const std::size_t channel = detail::parse_csv_index(f[1], where);
            detail::parse_csv_number(f[2], where);
            detail::parse_csv_number(f[3], where);
            disps.push_back({f[0], channel, detail::parse_csv_number(f[4], where)});
            ++weight_layers[f[0]];
        }
    }

    static constexpr const char* kNames[] = {"ranges", "sqnr", "weights"};
    std::string out = std::string(kNames[static_cast<int>(kind)]) + ": " + std::to_string(rows) + " rows\n";
    if (kind == CsvKind::Ranges) {
        for (const auto& id : ranges.order) {
            const auto& a = ranges.groups.at(id);
            out += id + ": steps=" + std::to_string(a.steps) + " min=" + format_number(a.min) +
                   " max=" + format_number(a.max) + "\n";
        }
    } else if (kind == CsvKind::Sqnr) {
        for (const auto& id : sqnr.order) {
            const auto& a = sqnr.groups.at(id);
            out += id + ": steps=" + std::to_string(a.steps) +
                   " mean_db=" + format_number(a.sum / static_cast<double>(a.steps)) +
                   " worst_step=" + std::to_string(a.worst_step) + " worst_db=" + format_number(a.worst) + "\n";
        }
    } else if (rows) {
        std::stable_sort(disps.begin(), disps.end(),
                         [](const Disp& a, const Disp& b) { return a.dispersion > b.dispersion; });
        const std::size_t k = std::min(kReportTopK, disps.size());
        out += "layers=" + std::to_string(weight_layers.order.size()) + " top " + std::to_string(k) +
               " dispersion:\n";
        for (std::size_t i = 0; i < k; ++i)
            out += "  " + disps[i].layer + "[" + std::to_string(disps[i].channel) +
                   "] " + format_number(disps[i].dispersion) + "\n";
    }
    return out;
}

inline std::string cmd_report(const std::filesystem::path& csv) {
    std::ifstream in(csv, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + csv.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return report_csv(buf.str(), csv.string());
}

}  // namespace ditq
