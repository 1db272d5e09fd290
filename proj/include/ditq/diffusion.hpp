// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ditq/error.hpp"
#include "ditq/rng.hpp"
#include "ditq/tensor.hpp"

namespace ditq {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

class NoiseSchedule {
public:
    NoiseSchedule() = default;

    /// betas[i] is beta_{i+1}; timesteps run 1..T.
    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        if (betas_.empty()) fail(ErrorCode::Config, "noise schedule needs at least one timestep");
        double prod = 1.0;
        for (std::size_t i = 0; i < betas_.size(); ++i) {
            const double b = betas_[i];
            if (!(b > 0.0 && b < 1.0)) {
                fail(ErrorCode::Config, "beta_" + std::to_string(i + 1) + " = " + std::to_string(b) +
                                            " must lie in (0, 1)");
            }
            if (i > 0 && b < betas_[i - 1]) fail(ErrorCode::Config, "betas must be non-decreasing");
            alphas_.push_back(1.0 - b);
            prod *= 1.0 - b;
            alpha_bars_.push_back(prod);
        }
    }

    int num_timesteps() const noexcept { return static_cast<int>(betas_.size()); }
    const std::vector<double>& betas() const noexcept { return betas_; }
    const std::vector<double>& alphas() const noexcept { return alphas_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

    double beta(int t) const { return betas_[index(t)]; }

    /// Cumulative product up to t; alpha_bar(0) == 1 by convention.
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        return alpha_bars_[index(t)];
    }

private:
    std::size_t index(int t) const {
        if (t < 1 || t > num_timesteps()) {
            fail(ErrorCode::Contract, "timestep " + std::to_string(t) + " outside [1, " +
                                          std::to_string(num_timesteps()) + "]");
        }
        return static_cast<std::size_t>(t - 1);
    }

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

inline constexpr int kDefaultTrainTimesteps = 1000;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

/// Betas linearly spaced from beta_start to beta_end, both inclusive.
inline NoiseSchedule linear_beta_schedule(int num_timesteps = kDefaultTrainTimesteps,
                                          double beta_start = kDefaultBetaStart, double beta_end = kDefaultBetaEnd) {
    if (num_timesteps < 1) fail(ErrorCode::Config, "T must be >= 1, got " + std::to_string(num_timesteps));
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        fail(ErrorCode::Config, "need 0 < beta_start <= beta_end < 1, got beta_start=" + std::to_string(beta_start) +
                                    " beta_end=" + std::to_string(beta_end));
    }
    std::vector<double> betas(static_cast<std::size_t>(num_timesteps));
    if (num_timesteps == 1) {
        betas[0] = beta_start;
    } else {
        const double step = (beta_end - beta_start) / static_cast<double>(num_timesteps - 1);
        for (int i = 0; i < num_timesteps; ++i) betas[static_cast<std::size_t>(i)] = beta_start + step * i;
        betas.back() = beta_end;
    }
    return NoiseSchedule(std::move(betas));
}

// ---------------------------------------------------------------------------
// Forward and reverse process
// ---------------------------------------------------------------------------

/// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps
inline Tensor forward_diffuse_at(const Tensor& x0, const Tensor& eps, double alpha_bar) {
    require_same_shape(x0, eps, "forward_diffuse");
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 1) fail(ErrorCode::Contract, "forward_diffuse: timestep must be >= 1, got " + std::to_string(t));
    return forward_diffuse_at(x0, eps, sched.alpha_bar(t));
}

/// Deterministic (eta = 0) DDIM update from alpha_bar_t to alpha_bar_prev.
inline Tensor ddim_step_at(const Tensor& x_t, const Tensor& eps_hat, double alpha_bar_t, double alpha_bar_prev) {
    require_same_shape(x_t, eps_hat, "ddim_step");
    const double sqrt_ab = std::sqrt(alpha_bar_t), sqrt_one_minus_ab = std::sqrt(1.0 - alpha_bar_t);
    const double sqrt_ab_prev = std::sqrt(alpha_bar_prev), sqrt_one_minus_ab_prev = std::sqrt(1.0 - alpha_bar_prev);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double x0_pred = (x_t[i] - sqrt_one_minus_ab * eps_hat[i]) / sqrt_ab;
        out[i] = sqrt_ab_prev * x0_pred + sqrt_one_minus_ab_prev * eps_hat[i];
    }
    return out;
}

inline Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& sched) {
    if (!(t > t_prev && t_prev >= 0)) {
        fail(ErrorCode::Contract, "ddim_step: need t > t_prev >= 0, got t=" + std::to_string(t) +
                                      " t_prev=" + std::to_string(t_prev));
    }
    return ddim_step_at(x_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

/// eps = eps_uncond + w (eps_cond - eps_uncond)
inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double guidance) {
    require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    Tensor out(eps_uncond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + guidance * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

inline constexpr int kDefaultInferenceSteps = 50;
inline constexpr double kDefaultGuidanceScale = 3.0;

struct SamplerConfig {
    int num_inference_steps = kDefaultInferenceSteps;
    double guidance_scale = kDefaultGuidanceScale;
    double eta = 0.0;

    friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

inline void validate(const SamplerConfig& cfg, const NoiseSchedule& sched) {
    if (cfg.num_inference_steps < 1 || cfg.num_inference_steps > sched.num_timesteps()) {
        fail(ErrorCode::Config, "num_inference_steps = " + std::to_string(cfg.num_inference_steps) +
                                    " must lie in [1, T = " + std::to_string(sched.num_timesteps()) + "]");
    }
    if (!(cfg.guidance_scale >= 0.0) || !std::isfinite(cfg.guidance_scale)) {
        fail(ErrorCode::Config, "guidance_scale must be finite and >= 0");
    }
    if (cfg.eta != 0.0) fail(ErrorCode::Config, "only deterministic sampling (eta = 0) is supported");
}

struct Timestep {
    int t = 0;
    int t_prev = 0;
};

/// Uniform stride over [T .. 1], descending, with the last step landing on 0.
inline std::vector<Timestep> inference_timesteps(int num_train_timesteps, int num_steps) {
    if (num_steps < 1 || num_steps > num_train_timesteps) {
        fail(ErrorCode::Config, "cannot take " + std::to_string(num_steps) + " inference steps over T = " +
                                    std::to_string(num_train_timesteps));
    }
    const auto big_t = static_cast<std::int64_t>(num_train_timesteps);
    std::vector<Timestep> steps(static_cast<std::size_t>(num_steps));
    for (int k = 0; k < num_steps; ++k) {
        steps[static_cast<std::size_t>(k)].t = static_cast<int>(big_t - (k * big_t) / num_steps);
    }
    for (std::size_t k = 0; k + 1 < steps.size(); ++k) steps[k].t_prev = steps[k + 1].t;
    steps.back().t_prev = 0;
    return steps;
}

inline Tensor initial_noise(const Shape& shape, std::uint64_t seed) { return Rng(seed).normal_tensor(shape); }

/// Anything that predicts noise for (x_t, t, label). The unconditional
/// branch of guidance uses null_label().
template <typename M>
concept Denoiser = requires(const M& m, const Tensor& x, int t, int label) {
    { m.predict(x, t, label) } -> std::same_as<Tensor>;
    { m.null_label() } -> std::convertible_to<int>;
    { m.sample_shape() } -> std::convertible_to<Shape>;
};

struct StepState {
    std::size_t step = 0;  // inference step index, 0 is the first reverse step (t = T)
    Timestep timestep;
    const Tensor* x_t = nullptr;
    const Tensor* eps = nullptr;  // guided noise prediction
    const Tensor* x_prev = nullptr;
};

/// Guided DDIM trajectory from x. `predict(x, t, label, step)` evaluates the
/// denoiser; `on_step(const StepState&)` runs after every update and returns
/// false to stop early. Returns the last computed x.
template <typename Predict, typename OnStep>
Tensor run_sampler(Predict&& predict, const NoiseSchedule& sched, const SamplerConfig& cfg, int cond,
                   int null_label, Tensor x, OnStep&& on_step) {
    validate(cfg, sched);
    if (cond < 0 || cond > null_label) {
        fail(ErrorCode::Contract, "invalid label " + std::to_string(cond) + ", expected [0, " +
                                      std::to_string(null_label) + "]");
    }
    const auto steps = inference_timesteps(sched.num_timesteps(), cfg.num_inference_steps);
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const Timestep ts = steps[k];
        const Tensor eps_uncond = predict(x, ts.t, null_label, k);
        const Tensor eps_cond = predict(x, ts.t, cond, k);
        const Tensor eps = cfg_combine(eps_uncond, eps_cond, cfg.guidance_scale);
        Tensor next = ddim_step(x, eps, ts.t, ts.t_prev, sched);
        const bool keep_going = on_step(StepState{k, ts, &x, &eps, &next});
        x = std::move(next);
        if (!keep_going) break;
    }
    return x;
}

template <Denoiser M>
Tensor sample(const M& model, const NoiseSchedule& sched, const SamplerConfig& cfg, int cond, std::uint64_t seed) {
    return run_sampler([&](const Tensor& x, int t, int label, std::size_t) { return model.predict(x, t, label); },
                       sched, cfg, cond, model.null_label(), initial_noise(model.sample_shape(), seed),
                       [](const StepState&) { return true; });
}

}  // namespace ditq
