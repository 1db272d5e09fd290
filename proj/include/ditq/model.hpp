// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ditq/diffusion.hpp"
#include "ditq/error.hpp"
#include "ditq/quant.hpp"
#include "ditq/rng.hpp"
#include "ditq/tensor.hpp"

namespace ditq {

/// Desk-scale diffusion transformer. Defaults: 32x32 RGB, 4x4 patches,
/// width 64, four blocks of four heads, ten classes plus the null label.
struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int channels = 3;
    int hidden_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int num_classes = 10;
    std::uint64_t seed = 0;
    // Fraction of every linear weight scaled up at init, mimicking the
    // scattered per-channel outliers of trained transformer weights.
    double outlier_fraction = 0.01;
    double outlier_scale = 50.0;

    int grid() const { return image_size / patch_size; }
    int num_tokens() const { return grid() * grid(); }
    int patch_dim() const { return channels * patch_size * patch_size; }
    int mlp_dim() const { return mlp_ratio * hidden_dim; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
    auto positive = [](int v, const char* name) {
        if (v < 1) fail(ErrorCode::Config, std::string("model.") + name + " must be >= 1, got " + std::to_string(v));
    };
    positive(c.image_size, "image_size");
    positive(c.patch_size, "patch_size");
    positive(c.channels, "channels");
    positive(c.hidden_dim, "hidden_dim");
    positive(c.depth, "depth");
    positive(c.heads, "heads");
    positive(c.mlp_ratio, "mlp_ratio");
    positive(c.num_classes, "num_classes");
    if (c.image_size % c.patch_size != 0) {
        fail(ErrorCode::Config, "model.image_size " + std::to_string(c.image_size) +
                                    " is not divisible by model.patch_size " + std::to_string(c.patch_size));
    }
    if (c.hidden_dim % c.heads != 0) {
        fail(ErrorCode::Config, "model.hidden_dim " + std::to_string(c.hidden_dim) +
                                    " is not divisible by model.heads " + std::to_string(c.heads));
    }
    if (c.hidden_dim % 2 != 0) fail(ErrorCode::Config, "model.hidden_dim must be even for sinusoidal embeddings");
    if (!(c.outlier_fraction >= 0.0 && c.outlier_fraction <= 1.0)) {
        fail(ErrorCode::Config, "model.outlier_fraction must lie in [0, 1]");
    }
    if (!(c.outlier_scale > 0.0) || !std::isfinite(c.outlier_scale)) {
        fail(ErrorCode::Config, "model.outlier_scale must be positive");
    }
}

/// Closed-form count of trainable parameters (weights, biases, layernorm
/// affine terms and the label table; positional and timestep embeddings are
/// fixed sinusoids).
inline std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = static_cast<std::size_t>(c.hidden_dim);
    const std::size_t p = static_cast<std::size_t>(c.patch_dim());
    const std::size_t m = static_cast<std::size_t>(c.mlp_dim());
    const std::size_t embed = d * p + d;
    const std::size_t labels = static_cast<std::size_t>(c.num_classes + 1) * d;
    const std::size_t block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (m * d + m) + (d * m + d);
    const std::size_t final_norm = 2 * d;
    const std::size_t head = p * d + p;
    return embed + labels + static_cast<std::size_t>(c.depth) * block + final_norm + head;
}

// ---------------------------------------------------------------------------
// Quantizable linear layer
// ---------------------------------------------------------------------------

/// Called with (layer_id, input activation before fake-quant, output).
using LayerObserver = std::function<void(const std::string&, const Tensor&, const Tensor&)>;

struct LinearLayer {
    std::string id;
    Tensor weight;  // [C_out x C_in]
    Tensor bias;    // [C_out]

    std::optional<QuantParams> weight_params;
    Tensor quantized_weight;  // valid iff weight_params
    std::optional<QuantParams> act_params;

    const Tensor& effective_weight() const { return weight_params ? quantized_weight : weight; }
    bool hooked() const { return weight_params.has_value() || act_params.has_value(); }

    Tensor operator()(const Tensor& x, const LayerObserver* observer) const {
        Tensor y = act_params ? linear(fake_quant(x, *act_params), effective_weight(), bias)
                              : linear(x, effective_weight(), bias);
        if (observer && *observer) (*observer)(id, x, y);
        return y;
    }
};

struct TransformerBlock {
    Tensor ln1_gain, ln1_bias;
    LinearLayer qkv, proj;
    Tensor ln2_gain, ln2_bias;
    LinearLayer fc1, fc2;
};

struct LayerHandle {
    std::string layer_id;
    std::string kind = "linear";
    std::size_t c_out = 0;
    std::size_t c_in = 0;

    friend bool operator==(const LayerHandle&, const LayerHandle&) = default;
};

inline Tensor sinusoidal_embedding(double position, std::size_t dim) {
    Tensor e({dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e[i] = std::sin(position * freq);
        e[half + i] = std::cos(position * freq);
    }
    return e;
}

inline Tensor patchify(const Tensor& x, const ModelConfig& c) {
    const std::size_t ch = c.channels, p = c.patch_size, g = c.grid(), img = c.image_size;
    Tensor out({g * g, static_cast<std::size_t>(c.patch_dim())});
    const std::size_t pd = out.shape()[1];
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t k = 0; k < ch; ++k)
                for (std::size_t py = 0; py < p; ++py)
                    for (std::size_t px = 0; px < p; ++px)
                        out[(gy * g + gx) * pd + (k * p + py) * p + px] =
                            x[(k * img + gy * p + py) * img + gx * p + px];
    return out;
}

inline Tensor unpatchify(const Tensor& tokens, const ModelConfig& c) {
    const std::size_t ch = c.channels, p = c.patch_size, g = c.grid(), img = c.image_size;
    const std::size_t pd = static_cast<std::size_t>(c.patch_dim());
    Tensor out({ch, img, img});
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t k = 0; k < ch; ++k)
                for (std::size_t py = 0; py < p; ++py)
                    for (std::size_t px = 0; px < p; ++px)
                        out[(k * img + gy * p + py) * img + gx * p + px] =
                            tokens[(gy * g + gx) * pd + (k * p + py) * p + px];
    return out;
}

/// Multi-head self-attention core on a fused [N x 3D] qkv activation laid
/// out as [q | k | v], each split into contiguous head slices.
inline Tensor attention(const Tensor& qkv, std::size_t heads) {
    const std::size_t n = qkv.shape()[0], d = qkv.shape()[1] / 3, dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({n, d});
    Tensor q({n, dh}), k_t({dh, n}), v({n, dh});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < dh; ++e) {
                q[i * dh + e] = qkv[i * 3 * d + h * dh + e];
                k_t[e * n + i] = qkv[i * 3 * d + d + h * dh + e];
                v[i * dh + e] = qkv[i * 3 * d + 2 * d + h * dh + e];
            }
        const Tensor probs = softmax(scaled(matmul(q, k_t), inv_sqrt), 1);
        const Tensor head_out = matmul(probs, v);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < dh; ++e) out[i * d + h * dh + e] = head_out[i * dh + e];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Weights are immutable during inference and forwards may run concurrently.
/// attach/detach mutate hooks and must not overlap with forwards.
class DenoiserModel {
public:
    DenoiserModel() = default;

    explicit DenoiserModel(const ModelConfig& cfg) : cfg_(cfg) {
        validate(cfg_);
        const std::size_t d = cfg_.hidden_dim, pd = cfg_.patch_dim(), m = cfg_.mlp_dim();
        embed_ = make_linear("embed", d, pd);
        label_table_ = Tensor({static_cast<std::size_t>(cfg_.num_classes + 1), d});
        blocks_.resize(static_cast<std::size_t>(cfg_.depth));
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            auto& blk = blocks_[b];
            const std::string prefix = "block" + std::to_string(b);
            blk.ln1_gain = Tensor({d});
            blk.ln1_bias = Tensor({d});
            blk.qkv = make_linear(prefix + ".attn.qkv", 3 * d, d);
            blk.proj = make_linear(prefix + ".attn.proj", d, d);
            blk.ln2_gain = Tensor({d});
            blk.ln2_bias = Tensor({d});
            blk.fc1 = make_linear(prefix + ".mlp.fc1", m, d);
            blk.fc2 = make_linear(prefix + ".mlp.fc2", d, m);
        }
        final_gain_ = Tensor({d});
        final_bias_ = Tensor({d});
        head_ = make_linear("head", pd, d);
        build_position_table();
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    int null_label() const noexcept { return cfg_.num_classes; }
    Shape sample_shape() const {
        const auto img = static_cast<std::size_t>(cfg_.image_size);
        return {static_cast<std::size_t>(cfg_.channels), img, img};
    }

    Tensor predict(const Tensor& x, int t, int label) const { return forward(x, t, label, nullptr); }

    /// patchify -> embed -> + position, timestep and label embeddings ->
    /// depth x (LN, MHSA, LN, GELU MLP) with residuals -> LN -> head -> unpatchify.
    Tensor forward(const Tensor& x, int t, int label, const LayerObserver* observer) const {
        if (x.shape() != sample_shape()) {
            fail(ErrorCode::Dimension, "forward: input " + shape_string(x.shape()) + " does not match model shape " +
                                           shape_string(sample_shape()));
        }
        check_label(label);
        const std::size_t d = cfg_.hidden_dim;
        Tensor h = embed_(patchify(x, cfg_), observer);
        const Tensor temb = sinusoidal_embedding(static_cast<double>(t), d);
        const double* lab = &label_table_[static_cast<std::size_t>(label) * d];
        for (std::size_t i = 0; i < h.shape()[0]; ++i)
            for (std::size_t j = 0; j < d; ++j) h[i * d + j] += positions_[i * d + j] + temb[j] + lab[j];

        for (const auto& blk : blocks_) {
            const Tensor a = blk.proj(attention(blk.qkv(layer_norm(h, blk.ln1_gain, blk.ln1_bias), observer),
                                                static_cast<std::size_t>(cfg_.heads)),
                                      observer);
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
            const Tensor f = blk.fc2(gelu(blk.fc1(layer_norm(h, blk.ln2_gain, blk.ln2_bias), observer)), observer);
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += f[i];
        }
        return unpatchify(head_(layer_norm(h, final_gain_, final_bias_), observer), cfg_);
    }

    void check_label(int label) const {
        if (label < 0 || label > cfg_.num_classes) {
            fail(ErrorCode::Contract, "invalid label " + std::to_string(label) + ", expected [0, " +
                                          std::to_string(cfg_.num_classes) + "] (" +
                                          std::to_string(cfg_.num_classes) + " = null label)");
        }
    }

    /// Quantizable layers in forward order: embed, then per block qkv, proj,
    /// fc1, fc2, then head.
    std::vector<const LinearLayer*> layers() const {
        std::vector<const LinearLayer*> out{&embed_};
        for (const auto& blk : blocks_) {
            out.push_back(&blk.qkv);
            out.push_back(&blk.proj);
            out.push_back(&blk.fc1);
            out.push_back(&blk.fc2);
        }
        out.push_back(&head_);
        return out;
    }

    std::vector<LinearLayer*> layers() {
        std::vector<LinearLayer*> out;
        for (const LinearLayer* l : std::as_const(*this).layers()) out.push_back(const_cast<LinearLayer*>(l));
        return out;
    }

    const LinearLayer& layer(const std::string& id) const {
        for (const LinearLayer* l : layers())
            if (l->id == id) return *l;
        fail(ErrorCode::Contract, "unknown layer id '" + id + "'");
    }

    LinearLayer& layer(const std::string& id) { return const_cast<LinearLayer&>(std::as_const(*this).layer(id)); }

    /// Every stored tensor with its archive name, in a fixed order.
    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor*>> out;
        auto add_linear = [&](LinearLayer& l) {
            out.emplace_back(l.id + ".weight", &l.weight);
            out.emplace_back(l.id + ".bias", &l.bias);
        };
        add_linear(embed_);
        out.emplace_back("label_embed", &label_table_);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            auto& blk = blocks_[b];
            const std::string prefix = "block" + std::to_string(b);
            out.emplace_back(prefix + ".ln1.gain", &blk.ln1_gain);
            out.emplace_back(prefix + ".ln1.bias", &blk.ln1_bias);
            add_linear(blk.qkv);
            add_linear(blk.proj);
            out.emplace_back(prefix + ".ln2.gain", &blk.ln2_gain);
            out.emplace_back(prefix + ".ln2.bias", &blk.ln2_bias);
            add_linear(blk.fc1);
            add_linear(blk.fc2);
        }
        out.emplace_back("final_norm.gain", &final_gain_);
        out.emplace_back("final_norm.bias", &final_bias_);
        add_linear(head_);
        return out;
    }

    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (auto& [name, t] : const_cast<DenoiserModel*>(this)->named_tensors()) out.emplace_back(name, t);
        return out;
    }

    const Tensor& position_table() const noexcept { return positions_; }

    // Direct access for the trainer.
    LinearLayer& embed() { return embed_; }
    Tensor& label_table() { return label_table_; }
    std::vector<TransformerBlock>& blocks() { return blocks_; }
    Tensor& final_gain() { return final_gain_; }
    Tensor& final_bias() { return final_bias_; }
    LinearLayer& head() { return head_; }
    const LinearLayer& embed() const { return embed_; }
    const Tensor& label_table() const { return label_table_; }
    const std::vector<TransformerBlock>& blocks() const { return blocks_; }
    const Tensor& final_gain() const { return final_gain_; }
    const Tensor& final_bias() const { return final_bias_; }
    const LinearLayer& head() const { return head_; }

private:
    static LinearLayer make_linear(std::string id, std::size_t out, std::size_t in) {
        return LinearLayer{std::move(id), Tensor({out, in}), Tensor({out}), std::nullopt, Tensor(), std::nullopt};
    }

    void build_position_table() {
        const std::size_t n = cfg_.num_tokens(), d = cfg_.hidden_dim;
        positions_ = Tensor({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            const Tensor e = sinusoidal_embedding(static_cast<double>(i), d);
            for (std::size_t j = 0; j < d; ++j) positions_[i * d + j] = e[j];
        }
    }

    ModelConfig cfg_;
    LinearLayer embed_;
    Tensor label_table_;
    std::vector<TransformerBlock> blocks_;
    Tensor final_gain_, final_bias_;
    LinearLayer head_;
    Tensor positions_;
};

static_assert(Denoiser<DenoiserModel>);

/// Round every stored value to the nearest 32-bit float so checkpoints
/// (which store float32) round-trip bit-exactly.
inline void round_to_float32(DenoiserModel& model) {
    for (auto& [name, t] : model.named_tensors())
        for (double& v : t->data()) v = static_cast<double>(static_cast<float>(v));
}

/// Seeded initialization: linear weights ~ N(0, 1/fan_in), biases 0,
/// layernorm gains 1 and biases 0, label table ~ N(0, 1). Afterwards
/// round(outlier_fraction * numel) distinct entries of each linear weight are
/// multiplied by outlier_scale.
inline DenoiserModel init_model(const ModelConfig& cfg) {
    DenoiserModel model(cfg);
    Rng rng(cfg.seed);
    for (LinearLayer* l : model.layers()) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(l->weight.shape()[1]));
        for (double& v : l->weight.data()) v = rng.normal() * stddev;
    }
    for (double& v : model.label_table().data()) v = rng.normal();
    for (auto& blk : model.blocks()) {
        for (double& v : blk.ln1_gain.data()) v = 1.0;
        for (double& v : blk.ln2_gain.data()) v = 1.0;
    }
    for (double& v : model.final_gain().data()) v = 1.0;

    if (cfg.outlier_fraction > 0.0) {
        for (LinearLayer* l : model.layers()) {
            const std::size_t n = l->weight.size();
            const auto count = static_cast<std::size_t>(std::llround(cfg.outlier_fraction * static_cast<double>(n)));
            std::set<std::size_t> picked;
            while (picked.size() < count) picked.insert(static_cast<std::size_t>(rng.below(n)));
            for (std::size_t i : picked) l->weight[i] *= cfg.outlier_scale;
        }
    }
    round_to_float32(model);
    return model;
}

inline std::vector<LayerHandle> enumerate_layers(const DenoiserModel& model) {
    std::vector<LayerHandle> out;
    for (const LinearLayer* l : model.layers()) {
        out.push_back({l->id, "linear", l->weight.shape()[0], l->weight.shape()[1]});
    }
    return out;
}

inline const Tensor& resolve_weight(const DenoiserModel& model, const LayerHandle& handle) {
    return model.layer(handle.layer_id).weight;
}

/// Subsequent forwards fake-quantize the layer's weight and/or its input
/// activation. Passing nullopt for both is equivalent to detaching.
inline void attach_fake_quant(DenoiserModel& model, const std::string& layer_id,
                              const std::optional<QuantParams>& weight_params,
                              const std::optional<QuantParams>& act_params) {
    LinearLayer& l = model.layer(layer_id);
    if (weight_params) {
        Tensor wq = fake_quant(l.weight, *weight_params);
        l.quantized_weight = std::move(wq);
    } else {
        l.quantized_weight = Tensor();
    }
    if (act_params) {
        const Shape input_shape{static_cast<std::size_t>(model.config().num_tokens()), l.weight.shape()[1]};
        validate_params(*act_params, input_shape);
    }
    l.weight_params = weight_params;
    l.act_params = act_params;
}

inline void detach_fake_quant(DenoiserModel& model, const std::string& layer_id) {
    attach_fake_quant(model, layer_id, std::nullopt, std::nullopt);
}

inline void detach_all(DenoiserModel& model) {
    for (LinearLayer* l : model.layers()) detach_fake_quant(model, l->id);
}

inline bool has_hooks(const DenoiserModel& model) {
    for (const LinearLayer* l : model.layers())
        if (l->hooked()) return true;
    return false;
}

}  // namespace ditq
