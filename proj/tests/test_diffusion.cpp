// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "ditq/diffusion.hpp"
#include "ditq/rng.hpp"

using namespace ditq;

namespace {

/// Predicts a fixed affine function of x, so the sampler can be checked by hand.
struct AffineDenoiser {
    double gain = 0.5;
    double cond_shift = 0.0;
    mutable int calls = 0;

    Tensor predict(const Tensor& x, int, int label) const {
        ++calls;
        Tensor out = scaled(x, gain);
        if (label != null_label())
            for (double& v : out.data()) v += cond_shift;
        return out;
    }
    int null_label() const { return 3; }
    Shape sample_shape() const { return {1, 2, 2}; }
};

static_assert(Denoiser<AffineDenoiser>);

}  // namespace

TEST(Schedule, SingleStep) {
    const auto s = linear_beta_schedule(1, 0.5, 0.5);
    EXPECT_EQ(s.alpha_bar(1), 0.5);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, TwoStepsByHand) {
    const NoiseSchedule s({0.1, 0.2});
    EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9);
    EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.72);
    const auto lin = linear_beta_schedule(2, 0.1, 0.2);
    EXPECT_DOUBLE_EQ(lin.beta(1), 0.1);
    EXPECT_DOUBLE_EQ(lin.beta(2), 0.2);
}

TEST(Schedule, DefaultMatchesProductLoop) {
    const auto s = linear_beta_schedule();
    ASSERT_EQ(s.num_timesteps(), 1000);
    double prod = 1.0;
    for (int i = 0; i < 1000; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
    EXPECT_NEAR(s.alpha_bar(1000), prod, 1e-15);
    // Frozen from the loop above.
    EXPECT_NEAR(s.alpha_bar(1000), 4.0358297653756754e-05, 1e-18);
}

TEST(Schedule, AlphaBarStrictlyDecreasing) {
    const auto s = linear_beta_schedule();
    for (int t = 1; t <= s.num_timesteps(); ++t) {
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
        EXPECT_GT(s.alpha_bar(t), 0.0);
    }
}

TEST(Schedule, RejectsBadParameters) {
    EXPECT_THROW(linear_beta_schedule(0), Error);
    EXPECT_THROW(linear_beta_schedule(10, 0.0, 0.1), Error);
    EXPECT_THROW(linear_beta_schedule(10, 0.2, 0.1), Error);
    EXPECT_THROW(linear_beta_schedule(10, 0.1, 1.0), Error);
    EXPECT_THROW(linear_beta_schedule().alpha_bar(1001), Error);
}

TEST(ForwardDiffuse, Limits) {
    const Tensor x0({2}, {1.0, -2.0});
    const Tensor eps({2}, {0.3, 0.7});
    EXPECT_EQ(forward_diffuse_at(x0, eps, 1.0), x0);
    EXPECT_EQ(forward_diffuse_at(x0, eps, 0.0), eps);
    EXPECT_DOUBLE_EQ(forward_diffuse_at(Tensor({1}, {1.0}), Tensor({1}, {1.0}), 0.64)[0], 1.4);
}

TEST(ForwardDiffuse, Validation) {
    const auto s = linear_beta_schedule();
    EXPECT_THROW(forward_diffuse(Tensor({2}), 0, Tensor({2}), s), Error);
    EXPECT_THROW(forward_diffuse(Tensor({2}), 5, Tensor({3}), s), Error);
}

TEST(ForwardDiffuse, MarginalNormFromZeroSignal) {
    const auto s = linear_beta_schedule();
    Tensor eps = Rng(5).normal_tensor({64});
    eps = scaled(eps, 1.0 / std::sqrt(sum_squares(eps)));
    for (int t : {1, 250, 1000}) {
        const Tensor xt = forward_diffuse(Tensor({64}), t, eps, s);
        EXPECT_NEAR(std::sqrt(sum_squares(xt)), std::sqrt(1.0 - s.alpha_bar(t)), 1e-15);
    }
}

TEST(Ddim, InvertsForwardWithTrueNoise) {
    const auto s = linear_beta_schedule();
    Rng rng(6);
    for (int t : {1, 10, 500, 1000}) {
        const Tensor x0 = rng.normal_tensor({32});
        const Tensor eps = rng.normal_tensor({32});
        const Tensor back = ddim_step(forward_diffuse(x0, t, eps, s), eps, t, 0, s);
        for (std::size_t i = 0; i < 32; ++i) EXPECT_LE(std::abs(back[i] - x0[i]), 1e-9 * std::max(1.0, std::abs(x0[i])));
    }
}

TEST(Ddim, ZeroNoiseRescales) {
    const auto s = linear_beta_schedule();
    const Tensor x({3}, {1.0, -2.0, 0.5});
    const Tensor out = ddim_step(x, Tensor({3}), 800, 780, s);
    const double k = std::sqrt(s.alpha_bar(780) / s.alpha_bar(800));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], x[i] * k, 1e-14);
}

TEST(Ddim, SeededStepMatchesFormula) {
    const auto s = linear_beta_schedule();
    Rng rng(7);
    const Tensor x = rng.normal_tensor({16});
    const Tensor e = rng.normal_tensor({16});
    const Tensor out = ddim_step(x, e, 600, 580, s);
    const double a = s.alpha_bar(600), ap = s.alpha_bar(580);
    for (std::size_t i = 0; i < 16; ++i) {
        const double x0 = (x[i] - std::sqrt(1 - a) * e[i]) / std::sqrt(a);
        EXPECT_EQ(out[i], std::sqrt(ap) * x0 + std::sqrt(1 - ap) * e[i]);
    }
}

TEST(Ddim, OrderingViolation) {
    const auto s = linear_beta_schedule();
    EXPECT_THROW(ddim_step(Tensor({1}), Tensor({1}), 10, 10, s), Error);
    EXPECT_THROW(ddim_step(Tensor({1}), Tensor({1}), 10, -1, s), Error);
}

TEST(Guidance, Combine) {
    const Tensor u({1}, {0.0}), c({1}, {1.0});
    EXPECT_EQ(cfg_combine(u, c, 0.0), u);
    EXPECT_EQ(cfg_combine(u, c, 1.0), c);
    EXPECT_EQ(cfg_combine(u, c, 3.0)[0], 3.0);
    EXPECT_THROW(cfg_combine(u, Tensor({2}), 1.0), Error);
}

TEST(Timesteps, UniformDescendingToZero) {
    const auto steps = inference_timesteps(1000, 50);
    ASSERT_EQ(steps.size(), 50u);
    EXPECT_EQ(steps.front().t, 1000);
    EXPECT_EQ(steps.front().t_prev, 980);
    EXPECT_EQ(steps.back().t, 20);
    EXPECT_EQ(steps.back().t_prev, 0);
    const auto one = inference_timesteps(1000, 1);
    EXPECT_EQ(one.front().t, 1000);
    EXPECT_EQ(one.front().t_prev, 0);
    const auto all = inference_timesteps(7, 7);
    for (int k = 0; k < 7; ++k) EXPECT_EQ(all[static_cast<std::size_t>(k)].t, 7 - k);
    EXPECT_THROW(inference_timesteps(10, 11), Error);
}

TEST(Sampler, ConfigValidation) {
    const auto s = linear_beta_schedule();
    EXPECT_THROW(validate(SamplerConfig{0, 3.0, 0.0}, s), Error);
    EXPECT_THROW(validate(SamplerConfig{50, -1.0, 0.0}, s), Error);
    EXPECT_THROW(validate(SamplerConfig{50, 3.0, 0.5}, s), Error);
    EXPECT_NO_THROW(validate(SamplerConfig{}, s));
}

TEST(Sampler, OneStepIsOnePairAndOneUpdate) {
    const auto s = linear_beta_schedule();
    AffineDenoiser m;
    const Tensor out = sample(m, s, SamplerConfig{1, 3.0, 0.0}, 0, 9);
    EXPECT_EQ(m.calls, 2);
    const Tensor x = initial_noise(m.sample_shape(), 9);
    const Tensor expect = ddim_step(x, scaled(x, 0.5), 1000, 0, s);
    EXPECT_EQ(out, expect);
}

TEST(Sampler, GuidanceOneFollowsConditionalBranch) {
    const auto s = linear_beta_schedule();
    AffineDenoiser m;
    const SamplerConfig cfg{10, 1.0, 0.0};
    // Identical branches: any guidance weight reproduces unconditional sampling.
    EXPECT_EQ(sample(m, s, cfg, 0, 4), sample(m, s, cfg, m.null_label(), 4));
    EXPECT_EQ(sample(m, s, SamplerConfig{10, 3.0, 0.0}, 0, 4), sample(m, s, cfg, m.null_label(), 4));
}

TEST(Sampler, DeterministicAndLabelChecked) {
    const auto s = linear_beta_schedule();
    AffineDenoiser m{0.5, 0.1};
    const SamplerConfig cfg{20, 3.0, 0.0};
    EXPECT_EQ(sample(m, s, cfg, 1, 11), sample(m, s, cfg, 1, 11));
    EXPECT_NE(sample(m, s, cfg, 1, 11), sample(m, s, cfg, 1, 12));
    EXPECT_THROW(sample(m, s, cfg, 4, 11), Error);
    EXPECT_THROW(sample(m, s, cfg, -1, 11), Error);
}

TEST(Sampler, EarlyStopReturnsLastUpdate) {
    const auto s = linear_beta_schedule();
    AffineDenoiser m;
    std::size_t seen = 0;
    run_sampler([&](const Tensor& x, int t, int label, std::size_t) { return m.predict(x, t, label); }, s,
                SamplerConfig{}, 0, m.null_label(), initial_noise(m.sample_shape(), 1), [&](const StepState& st) {
                    ++seen;
                    return st.step < 2;
                });
    EXPECT_EQ(seen, 3u);
}
