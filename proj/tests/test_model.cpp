// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <utility>

#include "ditq/checkpoint.hpp"
#include "ditq/model.hpp"
#include "ditq/train.hpp"
#include "oracles.hpp"

using namespace ditq;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.hidden_dim = 8;
    c.depth = 1;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.num_classes = 3;
    return c;
}

fs::path fresh_dir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    fs::path dir = fs::temp_directory_path() / ("ditq_" + std::string(info->test_suite_name()) + "_" + info->name() + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

double sqnr_vs(const Tensor& ref, const Tensor& approx) { 
    return oracle::sqnr_db({ref.data().begin(), ref.data().end()}, {approx.data().begin(), approx.data().end()});
}

}  // namespace

TEST(ModelConfig, DefaultParameterCount) {
    // embed 48*64+64, labels 11*64, 4 blocks of (ln 128, qkv 12480, proj 4160,
    // ln 128, fc1 16640, fc2 16448), final norm 128, head 64*48+48.
    const std::size_t expect = (48 * 64 + 64) + 11 * 64 + 4 * (128 + 12480 + 4160 + 128 + 16640 + 16448) + 128 +
                               (64 * 48 + 48);
    EXPECT_EQ(expect, 207024u);
    EXPECT_EQ(parameter_count(ModelConfig{}), expect);
    std::size_t stored = 0;
    const DenoiserModel m(ModelConfig{});
    for (const auto& [name, t] : m.named_tensors()) stored += t->size();
    EXPECT_EQ(stored, expect);
}

TEST(ModelConfig, Validation) {
    ModelConfig c;
    c.patch_size = 5;
    EXPECT_THROW(validate(c), Error);
    c = ModelConfig{};
    c.heads = 3;
    EXPECT_THROW(validate(c), Error);
    c = ModelConfig{};
    c.outlier_fraction = 1.5;
    EXPECT_THROW(validate(c), Error);
}

TEST(Layers, EnumerationOrderForDepthOne) {
    const DenoiserModel m = init_model(tiny_config());
    const auto layers = enumerate_layers(m);
    const std::vector<LayerHandle> expect{{"embed", "linear", 8, 48},
                                          {"block0.attn.qkv", "linear", 24, 8},
                                          {"block0.attn.proj", "linear", 8, 8},
                                          {"block0.mlp.fc1", "linear", 16, 8},
                                          {"block0.mlp.fc2", "linear", 8, 16},
                                          {"head", "linear", 48, 8}};
    EXPECT_EQ(layers, expect);
    EXPECT_EQ(&resolve_weight(m, layers[2]), &m.layer("block0.attn.proj").weight);
    EXPECT_THROW(m.layer("block1.attn.qkv"), Error);
}

TEST(Layers, DefaultModelHasEighteen) { EXPECT_EQ(enumerate_layers(init_model(ModelConfig{})).size(), 18u); }

TEST(Init, DeterministicPerSeedAndFloat32Exact) {
    ModelConfig c = tiny_config();
    const DenoiserModel a = init_model(c), b = init_model(c);
    c.seed = 1;
    const DenoiserModel other = init_model(c);
    const auto ta = a.named_tensors(), tb = b.named_tensors(), to = other.named_tensors();
    bool differs = false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        EXPECT_EQ(*ta[i].second, *tb[i].second);
        differs = differs || !(*ta[i].second == *to[i].second);
        for (double v : ta[i].second->data()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
    }
    EXPECT_TRUE(differs);
}

TEST(Init, OutliersInjectedIntoEveryLinear) {
    ModelConfig c = tiny_config();
    c.outlier_fraction = 0.0;
    const DenoiserModel clean = init_model(c);
    c.outlier_fraction = 0.05;
    const DenoiserModel noisy = init_model(c);
    for (const LinearLayer* l : clean.layers()) {
        const Tensor& w0 = l->weight;
        const Tensor& w1 = noisy.layer(l->id).weight;
        std::size_t scaled_count = 0;
        for (std::size_t i = 0; i < w0.size(); ++i) {
            if (w0[i] == w1[i]) continue;
            ++scaled_count;
            EXPECT_NEAR(w1[i], static_cast<double>(static_cast<float>(w0[i] * 50.0)), 1e-6 * std::abs(w1[i]));
        }
        EXPECT_EQ(scaled_count, static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(w0.size()))))
            << l->id;
    }
}

TEST(Forward, ShapeAndLabelChecks) {
    const DenoiserModel m = init_model(tiny_config());
    const Tensor x = Rng(1).normal_tensor(m.sample_shape());
    EXPECT_EQ(m.predict(x, 500, 0).shape(), m.sample_shape());
    EXPECT_NO_THROW(m.predict(x, 500, m.null_label()));
    EXPECT_THROW(m.predict(x, 500, 4), Error);
    EXPECT_THROW(m.predict(Tensor({3, 4, 4}), 500, 0), Error);
    EXPECT_EQ(m.predict(x, 500, 1), m.predict(x, 500, 1));
    EXPECT_NE(m.predict(x, 500, 1), m.predict(x, 500, 2));
    EXPECT_NE(m.predict(x, 500, 1), m.predict(x, 10, 1));
}

TEST(Forward, PatchifyRoundTrip) {
    const ModelConfig c = tiny_config();
    const Tensor x = Rng(2).normal_tensor({3, 8, 8});
    const Tensor p = patchify(x, c);
    EXPECT_EQ(p.shape(), (Shape{4, 48}));
    EXPECT_EQ(unpatchify(p, c), x);
}

TEST(Forward, ObserverSeesEveryLayerOnce) {
    const DenoiserModel m = init_model(tiny_config());
    std::vector<std::string> seen;
    const LayerObserver obs = [&](const std::string& id, const Tensor&, const Tensor&) { seen.push_back(id); };
    m.forward(Rng(3).normal_tensor(m.sample_shape()), 10, 0, &obs);
    std::vector<std::string> expect;
    for (const auto& h : enumerate_layers(m)) expect.push_back(h.layer_id);
    EXPECT_EQ(seen, expect);
}

TEST(FakeQuantHooks, AttachDetachIsReversible) {
    DenoiserModel m = init_model(tiny_config());
    const Tensor x = Rng(4).normal_tensor(m.sample_shape());
    const Tensor base = m.predict(x, 700, 1);
    for (const auto& h : enumerate_layers(m)) {
        const QuantizedWeight qw = quantize_weights(m.layer(h.layer_id).weight, 4, Granularity::per_channel(0));
        attach_fake_quant(m, h.layer_id, qw.params, QuantParams{make_grid(8, true), {0.05}, Granularity::per_tensor()});
    }
    EXPECT_TRUE(has_hooks(m));
    EXPECT_NE(m.predict(x, 700, 1), base);
    detach_all(m);
    EXPECT_FALSE(has_hooks(m));
    EXPECT_EQ(m.predict(x, 700, 1), base);
}

TEST(FakeQuantHooks, WeightOnlyMatchesHandQuantizedModel) {
    DenoiserModel hooked = init_model(tiny_config());
    DenoiserModel by_hand = hooked;
    for (const auto& h : enumerate_layers(hooked)) {
        const Tensor& w = hooked.layer(h.layer_id).weight;
        attach_fake_quant(hooked, h.layer_id, calibrate(w, make_grid(8, true), Granularity::per_tensor()), std::nullopt);
        Tensor& target = by_hand.layer(h.layer_id).weight;
        const double s = oracle::minmax_scale(target.data().data(), target.size(), 8);
        for (double& v : target.data()) v = oracle::fake_quant_scalar(v, s, 8);
    }
    const Tensor x = Rng(5).normal_tensor(hooked.sample_shape());
    EXPECT_EQ(hooked.predict(x, 250, 2), by_hand.predict(x, 250, 2));
}

TEST(FakeQuantHooks, SixteenBitIsNearlyTransparent) {
    DenoiserModel m = init_model(tiny_config());
    const Tensor x = Rng(6).normal_tensor(m.sample_shape());
    const Tensor base = m.predict(x, 400, 0);
    // Observe activation ranges, then hook every layer with 16-bit parameters.
    std::map<std::string, double> absmax;
    const LayerObserver obs = [&](const std::string& id, const Tensor& in, const Tensor&) {
        for (double v : in.data()) absmax[id] = std::max(absmax[id], std::abs(v));
    };
    m.forward(x, 400, 0, &obs);
    const IntGrid g16 = make_grid(16, true);
    for (const auto& h : enumerate_layers(m)) {
        const QuantParams wp = calibrate(m.layer(h.layer_id).weight, g16, Granularity::per_channel(0));
        attach_fake_quant(m, h.layer_id, wp,
                          QuantParams{g16, {absmax[h.layer_id] / g16.c_max}, Granularity::per_tensor()});
    }
    EXPECT_GT(sqnr_vs(base, m.predict(x, 400, 0)), 60.0);
}

TEST(FakeQuantHooks, AttachOrderDoesNotMatter) {
    DenoiserModel a = init_model(tiny_config());
    DenoiserModel b = a;
    auto handles = enumerate_layers(a);
    auto hook = [](DenoiserModel& m, const LayerHandle& h) {
        attach_fake_quant(m, h.layer_id, calibrate(m.layer(h.layer_id).weight, make_grid(4, true), Granularity::per_channel(0)),
                          QuantParams{make_grid(8, true), {0.02}, Granularity::per_tensor()});
    };
    for (const auto& h : handles) hook(a, h);
    for (auto it = handles.rbegin(); it != handles.rend(); ++it) hook(b, *it);
    const Tensor x = Rng(7).normal_tensor(a.sample_shape());
    EXPECT_EQ(a.predict(x, 900, 3), b.predict(x, 900, 3));
}

TEST(FakeQuantHooks, RejectsMismatchedParams) {
    DenoiserModel m = init_model(tiny_config());
    const QuantParams wrong{make_grid(8, true), {1.0, 1.0}, Granularity::per_channel(0)};
    try {
        attach_fake_quant(m, "embed", wrong, std::nullopt);
        FAIL() << "expected a dimension error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Dimension);
    }
    EXPECT_THROW(attach_fake_quant(m, "nope", std::nullopt, std::nullopt), Error);
}

TEST(Checkpoint, RoundTripIsExact) {
    const fs::path dir = fresh_dir("");
    const DenoiserModel m = init_model(tiny_config());
    save_checkpoint(dir, m);
    const DenoiserModel back = load_checkpoint(dir);
    EXPECT_EQ(back.config(), m.config());
    const auto ta = m.named_tensors(), tb = back.named_tensors();
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].second, *tb[i].second) << ta[i].first;
    const Tensor x = Rng(8).normal_tensor(m.sample_shape());
    EXPECT_EQ(m.predict(x, 100, 0), back.predict(x, 100, 0));
}

TEST(Checkpoint, CorruptionIsReported) {
    const fs::path dir = fresh_dir("");
    save_checkpoint(dir, init_model(tiny_config()));
    auto expect_parse_error = [&](const std::string& needle) {
        try {
            load_checkpoint(dir);
            FAIL() << "expected failure mentioning " << needle;
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::Parse) << e.what();
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    const std::string manifest = read_binary_file((dir / "manifest.json").string());

    write_text_file((dir / "manifest.json").string(), "{ not json");
    try {
        load_checkpoint(dir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Parse);
    }

    nlohmann::json j = nlohmann::json::parse(manifest);
    j["format"] = "other";
    write_text_file((dir / "manifest.json").string(), j.dump());
    expect_parse_error("format");

    j = nlohmann::json::parse(manifest);
    j["config"]["hidden_dim"] = 16;
    write_text_file((dir / "manifest.json").string(), j.dump());
    expect_parse_error("expected");

    write_text_file((dir / "manifest.json").string(), manifest);
    std::string bytes = read_binary_file((dir / "weights.bin").string());
    bytes.resize(bytes.size() / 2);
    write_text_file((dir / "weights.bin").string(), bytes);
    EXPECT_THROW(load_checkpoint(dir), Error);

    fs::remove(dir / "manifest.json");
    try {
        load_checkpoint(dir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
}

TEST(Training, GradientsMatchCentralDifferences) {
    ModelConfig c = tiny_config();
    c.depth = 2;
    c.outlier_fraction = 0.0;
    DenoiserModel m = init_model(c);
    Rng rng(5);
    for (auto& [name, t] : m.named_tensors())
        for (double& v : t->data()) v += 0.1 * rng.normal();
    const Tensor x = rng.normal_tensor(m.sample_shape());
    const Tensor target = rng.normal_tensor(m.sample_shape());
    auto loss = [&](const DenoiserModel& mm) { return sum_squares(sub(mm.predict(x, 300, 1), target)); };
    DenoiserModel grads = zero_gradients(c);
    forward_backward(
        m, x, 300, 1, [&](const Tensor& p) { return scaled(sub(p, target), 2.0); }, grads);

    auto params = m.named_tensors();
    const auto g = grads.named_tensors();
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].second->size(); j += 3) {
            double& v = (*params[i].second)[j];
            const double orig = v, h = 1e-6;
            v = orig + h;
            const double lp = loss(m);
            v = orig - h;
            const double lm = loss(m);
            v = orig;
            const double numeric = (lp - lm) / (2 * h);
            const double analytic = (*g[i].second)[j];
            const double diff = std::abs(numeric - analytic);
            // The absolute floor covers round-off in the difference quotient where
            // the true gradient is zero (softmax ignores the key bias).
            EXPECT_TRUE(diff <= 1e-6 || diff <= 1e-4 * std::max(std::abs(numeric), std::abs(analytic)))
                << params[i].first << "[" << j << "] numeric " << numeric << " analytic " << analytic;
        }
    }
}

TEST(Training, RefusesHookedModels) {
    DenoiserModel m = init_model(tiny_config());
    attach_fake_quant(m, "head", std::nullopt, QuantParams{make_grid(8, true), {0.1}, Granularity::per_tensor()});
    DenoiserModel grads = zero_gradients(m.config());
    EXPECT_THROW(forward_backward(
                     m, Tensor(m.sample_shape()), 10, 0, [](const Tensor& p) { return p; }, grads),
                 Error);
}

TEST(Training, DeterministicAndLossDrops) {
    ModelConfig c = tiny_config();
    const auto sched = linear_beta_schedule();
    TrainConfig tc;
    tc.steps = 60;
    tc.batch_size = 8;
    tc.learning_rate = 3e-3;
    DenoiserModel a = init_model(c), b = init_model(c);
    const TrainReport ra = train(a, sched, tc);
    const TrainReport rb = train(b, sched, tc);
    EXPECT_EQ(ra.losses, rb.losses);
    ASSERT_EQ(ra.losses.size(), 60u);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += ra.losses[i];
        tail += ra.losses[50 + i];
    }
    EXPECT_LT(tail, head);
    for (const auto& [name, t] : a.named_tensors())
        for (double v : t->data()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v))) << name;
}

TEST(Training, ZeroStepsLeavesModelUntouched) {
    DenoiserModel a = init_model(tiny_config());
    const DenoiserModel before = a;
    EXPECT_TRUE(train(a, linear_beta_schedule(), TrainConfig{}).losses.empty());
    const auto ta = std::as_const(a).named_tensors(), tb = before.named_tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].second, *tb[i].second);
}
