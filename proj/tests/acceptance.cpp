// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Optional argument: scratch directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

#include "ditq/experiment.hpp"
#include "oracles.hpp"

using namespace ditq;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void check(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail = what;
        }
    }
};

fs::path g_scratch;

int run(int id, const char* title, double limit_s, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.ok = false;
        o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.ok && limit_s > 0 && secs >= limit_s) {
        o.ok = false;
        o.detail = "runtime limit " + format_number(limit_s) + " s exceeded";
    }
    std::printf("%s %d %s (%.2f s)%s%s\n", o.ok ? "PASS" : "FAIL", id, title, secs, o.detail.empty() ? "" : ": ",
                o.detail.c_str());
    std::fflush(stdout);
    return o.ok ? 0 : 1;
}

std::string num(double v) { return format_number(v); }

void fake_quant_exactness(Outcome& o) {
    Rng rng(11);
    for (int bits : {4, 8}) {
        const IntGrid grid = make_grid(bits, true);
        // Power-of-two scales keep v / s and s * q exact, so ties and the
        // s/2 bound are tested without round-off.
        const double s = bits == 4 ? 0.25 : 1.0 / 64.0;
        const int span = grid.c_max - grid.c_min + 7;
        std::vector<double> vals(5000);
        for (std::size_t i = 0; i < vals.size(); ++i) {
            // Every fifth value sits exactly on a rounding tie, some beyond the grid.
            vals[i] = i % 5 == 0 ? (static_cast<double>(grid.c_min - 3 + static_cast<int>(rng.below(span))) + 0.5) * s
                                 : 0.6 * grid.c_max * s * rng.normal();
        }
        const Tensor v({vals.size()}, vals);
        const QuantParams p{grid, {s}, Granularity::per_tensor()};
        const Tensor q = fake_quant(v, p);
        const Tensor qq = fake_quant(q, p);
        std::size_t clipped = 0;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const std::string where = std::to_string(bits) + "-bit value " + num(vals[i]);
            o.check(q[i] == oracle::fake_quant_scalar(vals[i], s, bits), where + " differs from oracle");
            o.check(qq[i] == q[i], where + " not idempotent");
            const double code = oracle::round_half_away(vals[i] / s);
            if (code > grid.c_max || code < grid.c_min) ++clipped;
            if (code > grid.c_max) {
                o.check(q[i] == s * grid.c_max, where + " does not saturate at s*c_max");
            } else if (code < grid.c_min) {
                o.check(q[i] == s * grid.c_min, where + " does not saturate at s*c_min");
            } else {
                o.check(std::abs(q[i] - vals[i]) <= s / 2, where + " error exceeds s/2");
            }
        }
        o.check(clipped > 0, std::to_string(bits) + "-bit sample never clips");
    }
}

void group_degeneracy(Outcome& o) {
    Rng rng(12);
    for (int m = 0; m < 100; ++m) {
        const std::size_t rows = 1 + rng.below(32), cols = 1 + rng.below(96);
        const int bits = m % 2 ? 4 : 8;
        const Tensor w = oracle::outlier_matrix(rows, cols, 0.02, 30.0, 1000 + static_cast<std::uint64_t>(m));
        const QuantizedWeight g = group_quantize(w, bits, cols);
        const QuantizedWeight c = quantize_weights(w, bits, Granularity::per_channel(0));
        o.check(g.weight == c.weight, "matrix " + std::to_string(m) + ": weights differ");
        o.check(g.params.scales == c.params.scales, "matrix " + std::to_string(m) + ": scales differ");
    }
}

// Frozen from oracle::quantize_rows on oracle::outlier_matrix(64, 128, 0.01, 50, 0).
constexpr double kPerChannelDb = 17.141215590420448;
constexpr double kPerGroupDb = 21.967613433723486;

void group_gain(Outcome& o) {
    const Tensor w = oracle::outlier_matrix(64, 128, 0.01, 50.0, 0);
    const double pc = sqnr_db(w, quantize_weights(w, 4, Granularity::per_channel(0)).weight);
    const double pg = sqnr_db(w, group_quantize(w, 4, 32).weight);
    o.check(std::abs(pc - kPerChannelDb) <= 1e-6, "per-channel " + num(pc) + " dB, expected " + num(kPerChannelDb));
    o.check(std::abs(pg - kPerGroupDb) <= 1e-6, "per-group " + num(pg) + " dB, expected " + num(kPerGroupDb));
    o.check(pg - pc >= 3.0, "gap " + num(pg - pc) + " dB below 3 dB");
    if (o.ok) o.detail = "per-channel " + num(pc) + " dB, per-group " + num(pg) + " dB";
}

void diffusion_inversion(Outcome& o) {
    const NoiseSchedule sched = linear_beta_schedule();
    Rng rng(13);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Tensor x0 = rng.normal_tensor({3, 8, 8});
        const Tensor eps = rng.normal_tensor({3, 8, 8});
        const int t = 1 + static_cast<int>(rng.below(1000));
        const Tensor back = ddim_step(forward_diffuse(x0, t, eps, sched), eps, t, 0, sched);
        const double rel = std::sqrt(quant_error(x0, back) / sum_squares(x0));
        worst = std::max(worst, rel);
        o.check(rel <= 1e-9, "t=" + std::to_string(t) + " relative error " + num(rel));
    }
    for (int t = 1; t <= sched.num_timesteps(); ++t)
        o.check(sched.alpha_bar(t) < sched.alpha_bar(t - 1), "alpha_bar not decreasing at t=" + std::to_string(t));
    if (o.ok) o.detail = "worst relative error " + num(worst);
}

void sqnr_formula(Outcome& o) {
    o.check(sqnr_db(Tensor({2}, {1.0, 0.0}), Tensor({2}, {1.0, 1.0})) == 0.0, "0 dB case");
    o.check(sqnr_db(Tensor({1}, {10.0}), Tensor({1}, {11.0})) == 20.0, "20 dB case");
    o.check(sqnr_db(Tensor({2}, {3.0, -4.0}), Tensor({2}, {3.0, -4.0})) == kSqnrCapDb, "cap case");
    Rng rng(14);
    for (int i = 0; i < 20; ++i) {
        const Tensor fp = rng.normal_tensor({256});
        const Tensor err = rng.normal_tensor({256}, 0.01);
        const double base = sqnr_db(fp, add(fp, err));
        const double tenfold = sqnr_db(fp, add(fp, scaled(err, 10.0)));
        o.check(std::abs(base - tenfold - 20.0) <= 1e-9, "x10 error moved SQNR by " + num(base - tenfold) + " dB");
    }
}

void calibration_containment(Outcome& o) {
    const NoiseSchedule sched = linear_beta_schedule();
    const SamplerConfig cfg;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ModelConfig mc;
        mc.seed = seed;
        const DenoiserModel model = init_model(mc);
        const CalibSet calib = make_calib_set(2, 100 * seed, mc.num_classes);
        const auto one = collect_ranges(model, sched, cfg, calib, CalibrationStrategy::one_step());
        const auto multi = collect_ranges(model, sched, cfg, calib, CalibrationStrategy::multi_step(50));
        for (std::size_t i = 0; i < one.size(); ++i) {
            const auto [lo1, hi1] = strategy_range(one[i], CalibrationStrategy::one_step());
            const auto [lo, hi] = strategy_range(multi[i], CalibrationStrategy::multi_step(50));
            o.check(lo <= lo1 && hi1 <= hi, "seed " + std::to_string(seed) + " layer " + one[i].layer_id);
        }
    }
}

void max_noise_scale(Outcome& o) {
    const NoiseSchedule sched = linear_beta_schedule();
    const SamplerConfig cfg;
    const Shape shape = DenoiserModel(ModelConfig{}).sample_shape();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const NoiseScenario sc = make_growing_noise_scenario(sched, cfg, shape, seed);
        const CalibrationRecord rec = synthetic_noise_record(sched, cfg, sc.x0, sc.eps);
        const double first = derive_act_params(rec, 8, CalibrationStrategy::one_step()).scales[0];
        for (const StepRange& r : rec.steps) {
            const double s = derive_act_params(CalibrationRecord{rec.layer_id, {r}, 1}, 8,
                                               CalibrationStrategy::multi_step(std::vector<std::size_t>{r.step}))
                                 .scales[0];
            o.check(s <= first, "seed " + std::to_string(seed) + " step " + std::to_string(r.step) + " scale " +
                                    num(s) + " exceeds step-T scale " + num(first));
        }
        o.check(derive_act_params(rec, 8, CalibrationStrategy::multi_step(50)).scales[0] == first,
                "seed " + std::to_string(seed) + ": multi-step union differs from step-T scale");
    }
}

std::string summary_line(const CompareOutputs& out) {
    std::ostringstream s;
    for (const auto& r : out.rows) s << (s.tellp() ? ", " : "") << r.setting.name() << " " << num(r.sqnr_db);
    return s.str();
}

void end_to_end(Outcome& o) {
    ExperimentConfig cfg;
    cfg.output_dir = (g_scratch / "e2e_init").string();
    const fs::path ckpt = cmd_init(cfg);
    std::vector<CompareOutputs> runs;
    for (const char* tag : {"e2e_a", "e2e_b"}) {
        cfg.output_dir = (g_scratch / tag).string();
        runs.push_back(cmd_compare(cfg, ckpt, default_compare_settings(cfg.quant.group_size)));
    }
    for (const char* f : {"summary.json", "sqnr.csv", "weights.csv"}) {
        o.check(read_binary_file((g_scratch / "e2e_a" / f).string()) == read_binary_file((g_scratch / "e2e_b" / f).string()),
                std::string(f) + " differs between reruns");
    }
    const auto& rows = runs[0].rows;
    o.check(rows.size() == 5, "expected 5 rows, got " + std::to_string(rows.size()));
    if (!o.ok) return;
    double per_channel = 0.0, per_group = 0.0;
    for (const auto& r : rows) {
        if (r.setting.name() == "8a4w_one_step_per_channel") per_channel = r.sqnr_db;
        if (r.setting.name().rfind("8a4w_one_step_per_group", 0) == 0) per_group = r.sqnr_db;
    }
    o.check(per_group > per_channel, "8A4W per-group " + num(per_group) + " dB does not exceed per-channel " +
                                         num(per_channel) + " dB");
    o.detail = summary_line(runs[0]);
}

void determinism(Outcome& o) {
    ExperimentConfig cfg;
    cfg.output_dir = (g_scratch / "det_a").string();
    const fs::path ca = cmd_init(cfg);
    const DenoiserModel loaded = load_checkpoint(ca);
    save_checkpoint(g_scratch / "det_resaved", loaded);
    for (const char* f : {"manifest.json", "weights.bin"}) {
        o.check(read_binary_file((ca / f).string()) == read_binary_file((g_scratch / "det_resaved" / f).string()),
                std::string("checkpoint ") + f + " changes on round trip");
    }
    const std::string text = to_json(cfg).dump(2);
    write_text_file((g_scratch / "config.json").string(), text);
    const ExperimentConfig back = load_experiment_config((g_scratch / "config.json").string());
    o.check(back == cfg && to_json(back).dump(2) == text, "config changes on round trip");

    std::string first_bin, first_png;
    for (const char* tag : {"det_s1", "det_s2"}) {
        cfg.output_dir = (g_scratch / tag).string();
        const SampleOutputs s = cmd_sample(cfg, ca, std::nullopt, 5, 2);
        const std::string bin = read_binary_file(s.tensor.string()), png = read_binary_file(s.png.string());
        if (first_bin.empty()) {
            first_bin = bin;
            first_png = png;
        } else {
            o.check(bin == first_bin && png == first_png, "same-seed samples differ");
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    g_scratch = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ditq_acceptance";
    fs::remove_all(g_scratch);
    fs::create_directories(g_scratch);

    int failures = 0;
    failures += run(1, "fake-quant exactness on 10000 scalars", 1.0, fake_quant_exactness);
    failures += run(2, "group size C_in equals per-channel on 100 matrices", 1.0, group_degeneracy);
    failures += run(3, "4-bit per-group g=32 beats per-channel by >= 3 dB", 5.0, group_gain);
    failures += run(4, "DDIM inversion with true noise", 1.0, diffusion_inversion);
    failures += run(5, "SQNR worked cases and scale covariance", 1.0, sqnr_formula);
    failures += run(6, "one-step ranges within multi-step ranges over 5 seeds", 30.0, calibration_containment);
    failures += run(7, "step-T scale bounds every per-step scale", 5.0, max_noise_scale);
    failures += run(8, "compare table deterministic, per-group > per-channel", 300.0, end_to_end);
    failures += run(9, "checkpoint, config and sample round trips", 0.0, determinism);
    std::printf("%d of 9 criteria failed\n", failures);
    return failures ? 1 : 0;
}
