// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <vector>

#include "ditq/config.hpp"
#include "ditq/diffusion.hpp"
#include "ditq/error.hpp"
#include "ditq/model.hpp"
#include "ditq/rng.hpp"
#include "ditq/tensor.hpp"

namespace ditq {

// Optional epsilon-prediction training. Backward passes are written out by
// hand for the few ops the denoiser uses.

namespace grad {

/// dy -> dx for y = x W^T + b, accumulating into dW and db.
inline Tensor linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor& dw, Tensor& db) {
    const std::size_t rows = x.shape()[0], in = x.shape()[1], out = weight.shape()[0];
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[r * out + o];
            db[o] += g;
            for (std::size_t i = 0; i < in; ++i) dw[o * in + i] += g * x[r * in + i];
        }
    return matmul(dy, weight);
}

inline Tensor layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& dy, Tensor& dgain,
                                  Tensor& dbias, double eps = kLayerNormEps) {
    const std::size_t width = x.shape().back(), rows = x.size() / width;
    const auto n = static_cast<double>(width);
    Tensor dx(x.shape());
    std::vector<double> xhat(width), dxhat(width);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &x[r * width];
        double mean = 0.0;
        for (std::size_t i = 0; i < width; ++i) mean += xr[i];
        mean /= n;
        double var = 0.0;
        for (std::size_t i = 0; i < width; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
            xhat[i] = (xr[i] - mean) * inv;
            const double g = dy[r * width + i];
            dgain[i] += g * xhat[i];
            dbias[i] += g;
            dxhat[i] = g * gain[i];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xhat[i];
        }
        for (std::size_t i = 0; i < width; ++i)
            dx[r * width + i] = inv * (dxhat[i] - sum_d / n - xhat[i] * sum_dx / n);
    }
    return dx;
}

inline double gelu_derivative(double x) {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    const double th = std::tanh(k * (x + kGeluCubic * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * kGeluCubic * x * x);
}

/// Gradient of attention(qkv, heads) with respect to qkv.
inline Tensor attention_backward(const Tensor& qkv, std::size_t heads, const Tensor& dout) {
    const std::size_t n = qkv.shape()[0], d = qkv.shape()[1] / 3, dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor dqkv(qkv.shape());
    Tensor q({n, dh}), k({n, dh}), v({n, dh}), d_o({n, dh});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < dh; ++e) {
                q[i * dh + e] = qkv[i * 3 * d + h * dh + e];
                k[i * dh + e] = qkv[i * 3 * d + d + h * dh + e];
                v[i * dh + e] = qkv[i * 3 * d + 2 * d + h * dh + e];
                d_o[i * dh + e] = dout[i * d + h * dh + e];
            }
        const Tensor p = softmax(scaled(matmul(q, transpose(k)), scale), 1);
        const Tensor dv = matmul(transpose(p), d_o);
        const Tensor dp = matmul(d_o, transpose(v));
        Tensor ds({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
            for (std::size_t j = 0; j < n; ++j) ds[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * scale;
        }
        const Tensor dq = matmul(ds, k);
        const Tensor dk = matmul(transpose(ds), q);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < dh; ++e) {
                dqkv[i * 3 * d + h * dh + e] = dq[i * dh + e];
                dqkv[i * 3 * d + d + h * dh + e] = dk[i * dh + e];
                dqkv[i * 3 * d + 2 * d + h * dh + e] = dv[i * dh + e];
            }
    }
    return dqkv;
}

}  // namespace grad

/// Gradients share the model's layout: a zero-initialized model of the same
/// config whose tensors hold dL/dparam.
inline DenoiserModel zero_gradients(const ModelConfig& cfg) { return DenoiserModel(cfg); }

/// Forward plus backward for one (x_t, t, label) example. `dloss` maps the
/// prediction to dL/dprediction. Returns the prediction; parameter gradients
/// are accumulated into `grads`.
inline Tensor forward_backward(const DenoiserModel& model, const Tensor& x, int t, int label,
                               const std::function<Tensor(const Tensor&)>& dloss, DenoiserModel& grads) {
    if (has_hooks(model)) fail(ErrorCode::Contract, "training requires a full-precision model (hooks attached)");
    model.check_label(label);
    const ModelConfig& cfg = model.config();
    const std::size_t d = cfg.hidden_dim, heads = cfg.heads;

    struct BlockCache {
        Tensor h_in, ln1, qkv, attn, h_mid, ln2, pre_act, act;
    };
    const Tensor patches = patchify(x, cfg);
    Tensor h = linear(patches, model.embed().weight, model.embed().bias);
    const Tensor temb = sinusoidal_embedding(static_cast<double>(t), d);
    const Tensor& table = model.label_table();
    const Tensor& pos = model.position_table();
    for (std::size_t i = 0; i < h.shape()[0]; ++i)
        for (std::size_t j = 0; j < d; ++j)
            h[i * d + j] += pos[i * d + j] + temb[j] + table[static_cast<std::size_t>(label) * d + j];

    std::vector<BlockCache> cache;
    for (const auto& blk : model.blocks()) {
        BlockCache c;
        c.h_in = h;
        c.ln1 = layer_norm(h, blk.ln1_gain, blk.ln1_bias);
        c.qkv = linear(c.ln1, blk.qkv.weight, blk.qkv.bias);
        c.attn = attention(c.qkv, heads);
        h = add(h, linear(c.attn, blk.proj.weight, blk.proj.bias));
        c.h_mid = h;
        c.ln2 = layer_norm(h, blk.ln2_gain, blk.ln2_bias);
        c.pre_act = linear(c.ln2, blk.fc1.weight, blk.fc1.bias);
        c.act = gelu(c.pre_act);
        h = add(h, linear(c.act, blk.fc2.weight, blk.fc2.bias));
        cache.push_back(std::move(c));
    }
    const Tensor h_final = h;
    const Tensor ln_f = layer_norm(h, model.final_gain(), model.final_bias());
    const Tensor out_tokens = linear(ln_f, model.head().weight, model.head().bias);
    Tensor pred = unpatchify(out_tokens, cfg);

    const Tensor dpred = dloss(pred);
    require_same_shape(dpred, pred, "forward_backward");
    const Tensor dtokens = patchify(dpred, cfg);
    Tensor dh = grad::linear_backward(ln_f, model.head().weight, dtokens, grads.head().weight, grads.head().bias);
    dh = grad::layer_norm_backward(h_final, model.final_gain(), dh, grads.final_gain(), grads.final_bias());

    for (std::size_t b = model.blocks().size(); b-- > 0;) {
        const auto& blk = model.blocks()[b];
        auto& gb = grads.blocks()[b];
        const BlockCache& c = cache[b];
        Tensor d_act = grad::linear_backward(c.act, blk.fc2.weight, dh, gb.fc2.weight, gb.fc2.bias);
        for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= grad::gelu_derivative(c.pre_act[i]);
        const Tensor d_ln2 = grad::linear_backward(c.ln2, blk.fc1.weight, d_act, gb.fc1.weight, gb.fc1.bias);
        dh = add(dh, grad::layer_norm_backward(c.h_mid, blk.ln2_gain, d_ln2, gb.ln2_gain, gb.ln2_bias));

        const Tensor d_attn = grad::linear_backward(c.attn, blk.proj.weight, dh, gb.proj.weight, gb.proj.bias);
        const Tensor d_qkv = grad::attention_backward(c.qkv, heads, d_attn);
        const Tensor d_ln1 = grad::linear_backward(c.ln1, blk.qkv.weight, d_qkv, gb.qkv.weight, gb.qkv.bias);
        dh = add(dh, grad::layer_norm_backward(c.h_in, blk.ln1_gain, d_ln1, gb.ln1_gain, gb.ln1_bias));
    }

    Tensor& dlabel = grads.label_table();
    for (std::size_t i = 0; i < dh.shape()[0]; ++i)
        for (std::size_t j = 0; j < d; ++j) dlabel[static_cast<std::size_t>(label) * d + j] += dh[i * d + j];
    grad::linear_backward(patches, model.embed().weight, dh, grads.embed().weight, grads.embed().bias);
    return pred;
}

/// Class-patterned synthetic image in [-1, 1]: a plane wave whose direction
/// and frequency depend on the label, with a per-channel phase.
inline Tensor synthetic_image(const ModelConfig& cfg, int label, Rng& rng) {
    const std::size_t ch = cfg.channels, img = cfg.image_size;
    Tensor x({ch, img, img});
    const double fx = 1.0 + label % 3;
    const double fy = 1.0 + (label / 3) % 4;
    const double amp = 0.6 + 0.3 * rng.uniform();
    const double shift = 2.0 * std::numbers::pi * rng.uniform();
    for (std::size_t k = 0; k < ch; ++k)
        for (std::size_t y = 0; y < img; ++y)
            for (std::size_t c = 0; c < img; ++c) {
                const double phase = 2.0 * std::numbers::pi * (fx * c + fy * y) / static_cast<double>(img);
                x[(k * img + y) * img + c] = amp * std::sin(phase + shift + 2.0 * static_cast<double>(k));
            }
    return x;
}

inline constexpr double kLabelDropout = 0.1;

struct TrainReport {
    std::vector<double> losses;  // mean batch loss per step
};

/// Adam on the mean-squared epsilon-prediction loss. Labels are replaced by
/// the null label with probability kLabelDropout so the unconditional branch
/// is trained too. Weights are rounded to float32 afterwards.
inline TrainReport train(DenoiserModel& model, const NoiseSchedule& sched, const TrainConfig& tc) {
    if (tc.steps < 0 || tc.batch_size < 1 || !(tc.learning_rate > 0.0)) {
        fail(ErrorCode::Config, "train: steps >= 0, batch_size >= 1 and learning_rate > 0 required");
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, clip_norm = 1.0;
    const ModelConfig& cfg = model.config();
    Rng rng(tc.seed);
    DenoiserModel m1 = zero_gradients(cfg), m2 = zero_gradients(cfg);
    TrainReport report;

    for (int step = 0; step < tc.steps; ++step) {
        DenoiserModel grads = zero_gradients(cfg);
        double loss = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
            const Tensor x0 = synthetic_image(cfg, label, rng);
            if (rng.uniform() < kLabelDropout) label = model.null_label();
            const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.num_timesteps())));
            const Tensor eps = rng.normal_tensor(x0.shape());
            const Tensor xt = forward_diffuse(x0, t, eps, sched);
            const double norm = 1.0 / static_cast<double>(eps.size() * static_cast<std::size_t>(tc.batch_size));
            forward_backward(model, xt, t, label,
                             [&](const Tensor& pred) {
                                 Tensor d = sub(pred, eps);
                                 loss += sum_squares(d) * norm;
                                 return scaled(d, 2.0 * norm);
                             },
                             grads);
        }
        report.losses.push_back(loss);

        auto g = grads.named_tensors();
        double total = 0.0;
        for (auto& [name, t] : g) total += sum_squares(*t);
        const double clip = std::sqrt(total) > clip_norm ? clip_norm / std::sqrt(total) : 1.0;
        const double c1 = 1.0 - std::pow(beta1, step + 1), c2 = 1.0 - std::pow(beta2, step + 1);
        auto params = model.named_tensors();
        auto mom = m1.named_tensors();
        auto vel = m2.named_tensors();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i].second;
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = (*g[i].second)[j] * clip;
                double& mj = (*mom[i].second)[j];
                double& vj = (*vel[i].second)[j];
                mj = beta1 * mj + (1.0 - beta1) * gj;
                vj = beta2 * vj + (1.0 - beta2) * gj * gj;
                p[j] -= tc.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + adam_eps);
            }
        }
    }
    round_to_float32(model);
    return report;
}

}  // namespace ditq
