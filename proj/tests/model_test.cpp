#include <cmath>

#include <gtest/gtest.h>

#include "picosam/model.hpp"
#include "test_util.hpp"

using namespace picosam;
using picosam::test::max_abs;
using picosam::test::max_abs_diff;
using picosam::test::random_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.input_size = 32;
    c.stage_channels = {8, 16};
    c.blocks_per_stage = 1;
    c.head_channels = 8;
    return c;
}

void randomize(Model<float>& m, Rng& rng) {
    for (auto* p : m.params()) {
        const double b = p->role == ParamRole::conv_weight ? std::sqrt(6.0 / static_cast<double>(p->fan_in)) : 0.2;
        const double centre = p->role == ParamRole::norm_scale ? 1.0 : 0.0;
        for (auto& v : p->value.data()) v = static_cast<float>(centre + rng.uniform(-b, b));
    }
}

} // namespace

TEST(Model, TwoStageShapeExample) {
    Model<float> m(tiny_config());
    EXPECT_EQ(m.forward(Tensor<float>({1, 3, 32, 32})).shape(), (Shape{1, 1, 32, 32}));
    EXPECT_EQ(m.forward(Tensor<float>({3, 3, 32, 32})).shape(), (Shape{3, 1, 32, 32}));
}

TEST(Model, InvalidConfigsListTheViolation) {
    auto c = tiny_config();
    c.stage_channels = {8};
    EXPECT_THROW(Model<float>{c}, ConfigError);
    c = tiny_config();
    c.input_size = 31;
    try {
        Model<float> m(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos) << e.what();
    }
    c = tiny_config();
    c.blocks_per_stage = 0;
    EXPECT_THROW(Model<float>{c}, ConfigError);
    c = tiny_config();
    c.kernel = 4;
    EXPECT_THROW(Model<float>{c}, ConfigError);
}

TEST(Model, OnlyRgbInput) {
    Model<float> m(tiny_config());
    EXPECT_THROW(m.forward(Tensor<float>({1, 4, 32, 32})), ShapeError);
    EXPECT_THROW(m.forward(Tensor<float>({1, 3, 16, 16})), ShapeError);
    const auto layout = m.describe();
    EXPECT_EQ(layout.front().first, "stem");
    EXPECT_EQ(layout.front().second.in_channels, 3u);
}

TEST(Model, EncoderStageSizesHalveAndSkipsMatch) {
    const auto c = desk_config();
    Model<float> m(c);
    const auto g = m.fold();
    // Run the folded graph and record each edge's spatial size.
    std::vector<std::size_t> side(g.edge_count());
    Rng rng(1);
    run(g, random_tensor<float>({1, 3, c.input_size, c.input_size}, rng, 0, 1),
        [&](std::size_t e, const Tensor<float>& t) { side[e] = t.dim(2); });
    for (std::size_t s = 0; s + 1 < c.stages(); ++s) {
        const std::string block = "enc" + std::to_string(s) + ".block0.pw";
        const auto it = std::find(g.edge_names.begin(), g.edge_names.end(), block);
        ASSERT_NE(it, g.edge_names.end());
        EXPECT_EQ(side[static_cast<std::size_t>(it - g.edge_names.begin())], c.input_size >> s);
    }
    for (const auto& op : g.ops)
        if (const auto* cc = std::get_if<FoldedConcat>(&op)) {
            EXPECT_EQ(side[cc->first], side[cc->second]);
        }
}

TEST(Model, ZeroWeightsGiveHeadBias) {
    Model<float> m(tiny_config());
    for (auto* p : m.params()) p->value.fill(0.0f);
    auto params = m.params();
    params.back()->value.fill(0.75f); // head.out.bias
    ASSERT_EQ(params.back()->name, "head.out.bias");
    Rng rng(5);
    const auto y = predict_mask(m, random_tensor<float>({1, 3, 32, 32}, rng, 0, 1));
    for (auto v : y.data()) EXPECT_EQ(v, 0.75f);
}

TEST(Model, PredictMaskChecksInput) {
    Model<float> m(tiny_config());
    EXPECT_THROW(predict_mask(m, Tensor<float>({1, 3, 16, 16})), ShapeError);
    EXPECT_THROW(predict_mask(m, Tensor<float>({2, 3, 32, 32})), ShapeError);
    EXPECT_THROW(predict_mask(m, Tensor<float>({1, 3, 32, 32}, 1.5f)), DomainError);
    EXPECT_EQ(predict_mask(m, Tensor<float>({1, 3, 32, 32}, 0.5f)).shape(), (Shape{1, 1, 32, 32}));
}

TEST(Model, ForwardIsDeterministic) {
    Model<float> m(desk_config());
    Rng rng(3);
    randomize(m, rng);
    const auto x = random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
    EXPECT_EQ(m.forward(x), m.forward(x));
}

TEST(Model, ParamNamesUnique) {
    Model<float> m(reference_config());
    EXPECT_NO_THROW(check_unique_names(m.params()));
}

TEST(Model, ReferenceBudget) {
    Model<float> m(reference_config());
    const auto params = count_params(m);
    EXPECT_GE(params, 1'200'000u); // reported: 1.3M parameters
    EXPECT_LE(params, 1'400'000u);
    EXPECT_EQ(params, 1'290'833u); // value frozen in reference_config's comment
    const auto s = reference_config().input_size;
    const double macs = static_cast<double>(m.count_macs({1, 3, s, s}));
    EXPECT_LE(std::abs(macs - 336e6), 0.15 * 336e6); // reported: 336M
    EXPECT_EQ(macs, 322'641'600.0);
    EXPECT_EQ(count_macs(m.fold(), {1, 3, s, s}), m.count_macs({1, 3, s, s}));
}

TEST(Model, ReferenceBuiltTwiceIsIdentical) {
    Model<float> a(reference_config()), b(reference_config());
    EXPECT_EQ(count_params(a), count_params(b));
}

TEST(Model, ScaledConfigIsSmaller) {
    Model<float> ref(reference_config()), small(scaled_config(0.25));
    EXPECT_LT(count_params(small), count_params(ref));
    EXPECT_THROW(scaled_config(0.0), ConfigError);
}

TEST(Model, MacsMatchPerLayerSum) {
    // Independent count from the layer listing.
    const auto c = desk_config();
    Model<float> m(c);
    std::uint64_t total = 0;
    std::size_t side = c.input_size;
    for (const auto& [name, spec] : m.describe()) {
        switch (spec.kind) {
        case LayerKind::conv2d: total += spec.kernel * spec.kernel * spec.in_channels * spec.out_channels * side * side; break;
        case LayerKind::depthwise_separable: total += (9 * spec.in_channels + spec.in_channels * spec.out_channels) * side * side; break;
        case LayerKind::downsample:
            side /= 2;
            total += (9 * spec.in_channels + spec.in_channels * spec.out_channels) * side * side;
            break;
        case LayerKind::upsample:
            side *= 2;
            total += spec.in_channels * spec.out_channels * side * side;
            break;
        default: break;
        }
    }
    EXPECT_EQ(m.count_macs({1, 3, c.input_size, c.input_size}), total);
}

TEST(Fold, MatchesUnfoldedForward) {
    Model<float> m(desk_config());
    Rng rng(9);
    randomize(m, rng);
    const auto x = random_tensor<float>({1, 3, 64, 64}, rng, 0, 1);
    const auto want = m.forward(x);
    const auto got = run(m.fold(), x);
    EXPECT_LE(max_abs_diff(got, want), 1e-4 * std::max(1.0, max_abs(want)));
}

TEST(Fold, NoNormMeansPlainCopy) {
    auto c = tiny_config();
    c.norm = false;
    Model<float> m(c);
    Rng rng(2);
    randomize(m, rng);
    const auto x = random_tensor<float>({1, 3, 32, 32}, rng, 0, 1);
    EXPECT_EQ(run(m.fold(), x), m.forward(x));
}

TEST(Model, BackwardWithoutCacheIsStateError) {
    Model<float> m(tiny_config());
    typename Model<float>::Cache cache;
    EXPECT_THROW(m.backward(Tensor<float>({1, 1, 32, 32}), cache), StateError);
}

TEST(Model, ZeroInputZeroWeightsGiveZeroMseGradients) {
    Model<double> m(tiny_config());
    for (auto* p : m.params()) p->value.fill(0.0);
    Tensor<double> x({1, 3, 32, 32});
    typename Model<double>::Cache cache;
    const auto y = m.forward(x, &cache);
    // MSE against a zero target: residual is zero, so every gradient is zero.
    Tensor<double> grad(y.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) grad[i] = 2.0 * y[i] / static_cast<double>(y.numel());
    const auto gin = m.backward(grad, cache);
    for (auto v : gin.data()) EXPECT_EQ(v, 0.0);
    for (auto* p : m.params())
        for (auto v : p->grad.data()) EXPECT_EQ(v, 0.0) << p->name;
}
