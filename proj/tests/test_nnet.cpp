#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dbce/losses.hpp"
#include "dbce/nnet.hpp"
#include "dbce/rng.hpp"

using namespace dbce;

namespace {

FloatGrid random_image(Rng& rng, int h, int w) {
    FloatGrid img(h, w);
    for (auto& v : img.values()) v = rng.uniform01();
    return img;
}

bool params_equal(const Model& a, const Model& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if (a.layers[l].weights != b.layers[l].weights) return false;
        if (a.layers[l].bias != b.layers[l].bias) return false;
    }
    return true;
}

// flattened parameter access for finite differencing
std::vector<double*> param_pointers(Model& model) {
    std::vector<double*> ptrs;
    for (ConvLayer& layer : model.layers) {
        for (double& w : layer.weights) ptrs.push_back(&w);
        for (double& b : layer.bias) ptrs.push_back(&b);
    }
    return ptrs;
}

std::vector<double> flat_grads(const ParamGrads& grads) {
    std::vector<double> flat;
    for (const LayerGrads& lg : grads) {
        flat.insert(flat.end(), lg.weights.begin(), lg.weights.end());
        flat.insert(flat.end(), lg.bias.begin(), lg.bias.end());
    }
    return flat;
}

} // namespace

TEST(InitModel, DeterministicAndZeroBias) {
    ModelConfig cfg;
    cfg.seed = 42;
    const Model a = init_model(cfg);
    const Model b = init_model(cfg);
    EXPECT_TRUE(params_equal(a, b));
    for (const ConvLayer& layer : a.layers)
        for (double bias : layer.bias) EXPECT_EQ(bias, 0.0);
    cfg.seed = 43;
    EXPECT_FALSE(params_equal(a, init_model(cfg)));
}

TEST(InitModel, HeVarianceWithinTwentyPercent) {
    ModelConfig cfg;
    cfg.hidden = 64;
    cfg.seed = 7;
    const Model model = init_model(cfg);
    const ConvLayer& layer = model.layers[1]; // 64 -> 64, fan_in 576, 36864 draws
    ASSERT_GE(layer.weights.size(), 10000u);
    double mean = 0.0;
    for (double w : layer.weights) mean += w;
    mean /= static_cast<double>(layer.weights.size());
    double var = 0.0;
    for (double w : layer.weights) var += (w - mean) * (w - mean);
    var /= static_cast<double>(layer.weights.size());
    const double expected = 2.0 / (64.0 * 9.0);
    EXPECT_NEAR(var, expected, 0.2 * expected);
}

TEST(Forward, ZeroImageZeroBiasGivesZeroLogits) {
    ModelConfig cfg;
    cfg.seed = 1;
    const Model model = init_model(cfg); // biases are zero at init
    const LogitMap logits = forward(model, FloatGrid(8, 8, 0.0));
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_EQ(logits.data()[i], 0.0);
}

TEST(Forward, FinalLayerIsLinearInItsKernels) {
    Rng rng(2);
    ModelConfig cfg;
    cfg.seed = 3;
    Model model = init_model(cfg);
    const FloatGrid image = random_image(rng, 10, 10);
    const LogitMap base = forward(model, image);
    for (double& w : model.layers.back().weights) w *= 2.0;
    for (double& b : model.layers.back().bias) b *= 2.0;
    const LogitMap doubled = forward(model, image);
    for (std::size_t i = 0; i < base.size(); ++i)
        EXPECT_NEAR(doubled.data()[i], 2.0 * base.data()[i], 1e-12);
}

TEST(Forward, TranslationEquivariantInTheInterior) {
    Rng rng(4);
    ModelConfig cfg;
    cfg.seed = 5;
    const Model model = init_model(cfg);
    const int H = 14, W = 14;
    FloatGrid image(H, W, 0.0);
    for (int y = 4; y < 9; ++y)
        for (int x = 4; x < 9; ++x) image(y, x) = rng.uniform01();
    FloatGrid shifted(H, W, 0.0);
    for (int y = 0; y < H - 1; ++y)
        for (int x = 0; x < W - 1; ++x) shifted(y + 1, x + 1) = image(y, x);
    const LogitMap a = forward(model, image);
    const LogitMap b = forward(model, shifted);
    // compare away from the padding influence (receptive field 5 with depth 2)
    for (int c = 0; c < 2; ++c)
        for (int y = 3; y < H - 4; ++y)
            for (int x = 3; x < W - 4; ++x)
                ASSERT_NEAR(a.at(c, y, x), b.at(c, y + 1, x + 1), 1e-12);
}

TEST(Forward, TooSmallImageRejected) {
    const Model model = init_model(ModelConfig{});
    EXPECT_THROW(forward(model, FloatGrid(2, 2, 0.0)), std::invalid_argument);
}

TEST(Backward, ZeroUpstreamGradientGivesZeroParamGrads) {
    Rng rng(6);
    const Model model = init_model(ModelConfig{});
    ForwardCache cache;
    forward(model, random_image(rng, 8, 8), &cache);
    const GradMap zero(Dims{8, 8, 2}, 0.0);
    const ParamGrads grads = backward(model, cache, zero);
    for (double g : flat_grads(grads)) EXPECT_EQ(g, 0.0);
}

TEST(Backward, HeadBiasGradientIsChannelSum) {
    Rng rng(7);
    const Model model = init_model(ModelConfig{});
    ForwardCache cache;
    forward(model, random_image(rng, 6, 6), &cache);
    GradMap g(Dims{6, 6, 2});
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform(-1, 1);
    const ParamGrads grads = backward(model, cache, g);
    for (int c = 0; c < 2; ++c) {
        double sum = 0.0;
        const double* plane = g.plane(c);
        for (int i = 0; i < 36; ++i) sum += plane[i];
        // implementation may reassociate the sum; compare numerically
        EXPECT_NEAR(grads.back().bias[c], sum, 1e-13 * std::max(1.0, std::abs(sum)));
    }
}

TEST(Backward, FiniteDifferenceOracleOnLinearFunctional) {
    // d/dtheta of sum(logits . G) for fixed random G
    Rng rng(8);
    ModelConfig cfg;
    cfg.hidden = 2;
    cfg.seed = 9;
    Model model = init_model(cfg);
    const FloatGrid image = random_image(rng, 8, 8);
    GradMap g(Dims{8, 8, 2});
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform(-1, 1);

    ForwardCache cache;
    forward(model, image, &cache);
    const std::vector<double> analytic = flat_grads(backward(model, cache, g));

    const auto functional = [&]() {
        const LogitMap logits = forward(model, image);
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) sum += logits.data()[i] * g.data()[i];
        return sum;
    };
    const std::vector<double*> params = param_pointers(model);
    ASSERT_EQ(params.size(), analytic.size());
    const double step = 1e-6;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = *params[i];
        *params[i] = saved + step;
        const double up = functional();
        *params[i] = saved - step;
        const double down = functional();
        *params[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double diff = std::abs(numeric - analytic[i]);
        if (diff <= 5e-9) continue; // cancellation noise floor at this step size
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
        ASSERT_LE(diff / denom, 1e-5) << "param " << i;
    }
}

TEST(FullChain, GradientMatchesFiniteDifferencesForEveryLoss) {
    const LossKind kinds[] = {LossKind::ce, LossKind::bce, LossKind::dice, LossKind::dice_ce,
                              LossKind::dbce};
    Rng rng(10);
    ModelConfig mc;
    mc.hidden = 2;
    mc.classes = 3;
    mc.seed = 11;
    const FloatGrid image = random_image(rng, 6, 6);
    LabelMask mask(6, 6);
    for (auto& v : mask.values()) v = static_cast<std::uint8_t>(rng.uniform_int(3ull));
    const OneHotTensor onehot = one_hot(mask, 3);

    for (LossKind kind : kinds) {
        Model model = init_model(mc);
        LossOptions opts;
        opts.element = disk_element(1);
        if (kind == LossKind::bce) opts.weights = per_sample_class_weights(mask, 3);

        ForwardCache cache;
        const LogitMap logits = forward(model, image, &cache);
        const GradMap grad_logits = loss_gradient(kind, onehot, logits, opts);
        const std::vector<double> analytic = flat_grads(backward(model, cache, grad_logits));

        const auto loss_value = [&]() {
            return evaluate_loss(kind, onehot, softmax(forward(model, image)), opts).total;
        };
        const std::vector<double*> params = param_pointers(model);
        const double step = 1e-6;
        for (std::size_t i = 0; i < params.size(); i += 7) { // sampled subset per loss
            const double saved = *params[i];
            *params[i] = saved + step;
            const double up = loss_value();
            *params[i] = saved - step;
            const double down = loss_value();
            *params[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double diff = std::abs(numeric - analytic[i]);
            if (diff <= 5e-9) continue; // cancellation noise floor at this step size
            const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
            ASSERT_LE(diff / denom, 1e-4) << to_string(kind) << " param " << i;
        }
    }
}

TEST(Adam, ZeroGradZeroDecayLeavesParamsUnchanged) {
    Model model = init_model(ModelConfig{});
    const Model before = model;
    AdamState state = init_adam_state(model);
    ParamGrads zero(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        zero[l].weights.assign(model.layers[l].weights.size(), 0.0);
        zero[l].bias.assign(model.layers[l].bias.size(), 0.0);
    }
    adam_step(model, zero, state, 1e-3, 0.0);
    EXPECT_TRUE(params_equal(model, before));
    EXPECT_EQ(state.step, 1);
}

TEST(Adam, FirstStepDirection) {
    ModelConfig cfg;
    cfg.hidden = 1;
    cfg.depth = 1;
    Model model = init_model(cfg);
    const Model before = model;
    AdamState state = init_adam_state(model);
    Rng rng(12);
    ParamGrads grads(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        grads[l].weights.resize(model.layers[l].weights.size());
        grads[l].bias.resize(model.layers[l].bias.size());
        for (double& g : grads[l].weights) g = rng.uniform(-1, 1);
        for (double& g : grads[l].bias) g = rng.uniform(-1, 1);
    }
    const double lr = 1e-3;
    adam_step(model, grads, state, lr, 0.0);
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        for (std::size_t i = 0; i < grads[l].weights.size(); ++i) {
            const double g = grads[l].weights[i];
            const double expected = before.layers[l].weights[i] -
                                    lr * g / (std::abs(g) + state.epsilon);
            ASSERT_NEAR(model.layers[l].weights[i], expected, 1e-12);
        }
}

TEST(Adam, DeterministicGivenIdenticalInputs) {
    ModelConfig cfg;
    cfg.seed = 13;
    Model a = init_model(cfg);
    Model b = init_model(cfg);
    AdamState sa = init_adam_state(a), sb = init_adam_state(b);
    Rng rng(14);
    ParamGrads grads(a.layers.size());
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        grads[l].weights.resize(a.layers[l].weights.size());
        grads[l].bias.resize(a.layers[l].bias.size());
        for (double& g : grads[l].weights) g = rng.uniform(-1, 1);
        for (double& g : grads[l].bias) g = rng.uniform(-1, 1);
    }
    for (int step = 0; step < 3; ++step) {
        adam_step(a, grads, sa, 5e-4, 1e-4);
        adam_step(b, grads, sb, 5e-4, 1e-4);
    }
    EXPECT_TRUE(params_equal(a, b));
}

TEST(Adam, SingleStepDecreasesTheLossAtSmallLr) {
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(400 + trial);
        ModelConfig mc;
        mc.hidden = 3;
        mc.seed = static_cast<std::uint64_t>(trial);
        Model model = init_model(mc);
        const FloatGrid image = random_image(rng, 8, 8);
        LabelMask mask(8, 8);
        for (auto& v : mask.values()) v = static_cast<std::uint8_t>(rng.uniform_int(2ull));
        const OneHotTensor onehot = one_hot(mask, 2);

        ForwardCache cache;
        const LogitMap logits = forward(model, image, &cache);
        const double before = ce_loss(onehot, softmax(logits)).total;
        const GradMap grad_logits =
            loss_gradient(LossKind::ce, onehot, logits, LossOptions{});
        const ParamGrads grads = backward(model, cache, grad_logits);
        AdamState state = init_adam_state(model);
        adam_step(model, grads, state, 1e-4, 0.0);
        const double after = ce_loss(onehot, softmax(forward(model, image))).total;
        ASSERT_LT(after, before) << "trial " << trial;
    }
}

TEST(Adam, NonFiniteGradientRejected) {
    Model model = init_model(ModelConfig{});
    AdamState state = init_adam_state(model);
    ParamGrads grads(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        grads[l].weights.assign(model.layers[l].weights.size(), 0.0);
        grads[l].bias.assign(model.layers[l].bias.size(), 0.0);
    }
    grads[0].weights[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(adam_step(model, grads, state, 1e-3, 0.0), std::runtime_error);
}

TEST(Checkpoint, BitExactRoundTrip) {
    ModelConfig cfg;
    cfg.hidden = 5;
    cfg.depth = 3;
    cfg.classes = 4;
    cfg.seed = 99;
    const Model model = init_model(cfg);
    const std::string path =
        (std::filesystem::temp_directory_path() / "dbce_ckpt_roundtrip.bin").string();
    save_model(model, path);
    const Model loaded = load_model(path);
    EXPECT_EQ(loaded.config.hidden, 5);
    EXPECT_EQ(loaded.config.depth, 3);
    EXPECT_EQ(loaded.config.classes, 4);
    ASSERT_TRUE(params_equal(model, loaded));
}

TEST(Checkpoint, CorruptFilesRejected) {
    const std::string path =
        (std::filesystem::temp_directory_path() / "dbce_ckpt_bad.bin").string();
    {
        std::ofstream f(path, std::ios::binary);
        f << "not a checkpoint";
    }
    EXPECT_THROW(load_model(path), io_error);

    const Model model = init_model(ModelConfig{});
    save_model(model, path);
    // truncate
    std::string bytes;
    {
        std::ifstream f(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    {
        std::ofstream f(path, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EXPECT_THROW(load_model(path), io_error);
}
