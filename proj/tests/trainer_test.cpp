#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "picosam/trainer.hpp"
#include "test_util.hpp"

using namespace picosam;
using picosam::test::TempDir;

namespace {

Param<double> scalar_param(double v) {
    Param<double> p("p", ParamRole::conv_weight, {1}, 1);
    p.value[0] = v;
    return p;
}

ModelConfig small_config() {
    ModelConfig c;
    c.input_size = 32;
    c.stage_channels = {8, 16, 32};
    c.blocks_per_stage = 1;
    c.head_channels = 8;
    return c;
}

std::vector<Sample> synth_samples(std::size_t n, std::uint64_t seed, std::size_t image, std::size_t crop) {
    Rng rng(seed);
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto s = synth_sample(rng, image, crop);
        out.push_back(Sample{sample_dir_name(i), s.image, s.mask, s.prompt, s.teacher});
    }
    return out;
}

} // namespace

TEST(AdamW, SingleStepExample) {
    auto p = scalar_param(1.0);
    p.grad[0] = 0.5;
    ParamList<double> ps{&p};
    AdamWState<double> st(ps);
    TrainConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    adamw_step(ps, st, cfg);
    // 1 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01 * 1
    EXPECT_NEAR(p.value[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.001, 1e-12);
    EXPECT_NEAR(p.value[0], 0.8990, 1e-4);
    EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, ZeroGradientNoDecayIsIdentity) {
    auto p = scalar_param(0.37);
    ParamList<double> ps{&p};
    AdamWState<double> st(ps);
    TrainConfig cfg;
    cfg.weight_decay = 0;
    for (int i = 0; i < 50; ++i) adamw_step(ps, st, cfg);
    EXPECT_EQ(p.value[0], 0.37);
}

TEST(AdamW, ZeroGradientIsPureDecay) {
    auto p = scalar_param(2.0);
    ParamList<double> ps{&p};
    AdamWState<double> st(ps);
    TrainConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.1;
    for (int t = 1; t <= 40; ++t) {
        adamw_step(ps, st, cfg);
        EXPECT_NEAR(p.value[0], 2.0 * std::pow(1 - 0.05 * 0.1, t), 1e-12);
    }
}

TEST(AdamW, ConvergesOnQuadratic) {
    // f(x) = (x - 3)^2 from x = 0.
    auto p = scalar_param(0.0);
    ParamList<double> ps{&p};
    AdamWState<double> st(ps);
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0;
    int steps = 0;
    while (steps < 2000 && std::abs(p.value[0] - 3.0) > 1e-6) {
        p.grad[0] = 2 * (p.value[0] - 3.0);
        adamw_step(ps, st, cfg);
        ++steps;
    }
    EXPECT_LE(std::abs(p.value[0] - 3.0), 1e-6) << "after " << steps << " steps";
    EXPECT_LE(steps, 2000);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndChangesNothing) {
    auto a = scalar_param(1.0), b = scalar_param(2.0);
    b.name = "dec0.block0.pw.weight";
    a.grad[0] = 0.1;
    b.grad[0] = std::nan("");
    ParamList<double> ps{&a, &b};
    AdamWState<double> st(ps);
    try {
        adamw_step(ps, st, TrainConfig{});
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("dec0.block0.pw.weight"), std::string::npos);
    }
    EXPECT_EQ(a.value[0], 1.0);
    EXPECT_EQ(st.t, 0u);
}

TEST(AdamW, StateMismatchIsStateError) {
    auto a = scalar_param(1.0);
    ParamList<double> ps{&a};
    AdamWState<double> st;
    EXPECT_THROW(adamw_step(ps, st, TrainConfig{}), StateError);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.beta1 = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lr = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.prompt_sampling = PromptSampling::interior;
    EXPECT_THROW(c.validate(), ConfigError);
    c.mode = TrainMode::supervised;
    EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfig, FromKeyValues) {
    const auto kv = KeyValues::parse("lr = 0.002\nbatch_size = 4\nmode = supervised\nlambda_min = 0.1\n", "cfg");
    const auto c = train_config_from(kv);
    EXPECT_EQ(c.lr, 0.002);
    EXPECT_EQ(c.batch_size, 4u);
    EXPECT_EQ(c.mode, TrainMode::supervised);
    EXPECT_EQ(c.lambda_policy.lambda_min, 0.1);
    EXPECT_EQ(c.epochs, 5u);
    EXPECT_THROW(train_config_from(KeyValues::parse("mode = both\n", "cfg")), ConfigError);
}

TEST(Init, HeUniformVarianceAndDeterminism) {
    Model<float> a(reference_config());
    init_params(a, 7);
    for (const auto* p : a.params()) {
        if (p->role == ParamRole::conv_weight && p->value.numel() >= 10000) {
            double sum = 0, sq = 0;
            for (auto v : p->value.data()) {
                sum += v;
                sq += static_cast<double>(v) * v;
            }
            const double n = static_cast<double>(p->value.numel());
            const double var = sq / n - (sum / n) * (sum / n);
            const double want = 2.0 / static_cast<double>(p->fan_in);
            EXPECT_NEAR(var / want, 1.0, 0.2) << p->name;
        }
        if (p->role == ParamRole::bias || p->role == ParamRole::norm_shift) {
            for (auto v : p->value.data()) EXPECT_EQ(v, 0.0f);
        }
        if (p->role == ParamRole::norm_scale) {
            for (auto v : p->value.data()) EXPECT_EQ(v, 1.0f);
        }
    }
    Model<float> b(reference_config()), c(reference_config());
    init_params(b, 7);
    init_params(c, 8);
    EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
    EXPECT_NE(checkpoint_bytes(a), checkpoint_bytes(c));
}

TEST(Train, OverfitsOneSample) {
    auto c = desk_config();
    Model<float> m(c);
    init_params(m, 1);
    const auto data = synth_samples(1, 3, 96, c.input_size);
    TrainConfig cfg;
    cfg.lr = 2e-3;
    AdamWState<float> st(m.params());
    const std::vector<const Sample*> batch{&data[0]};
    const double first = train_step(m, st, cfg, batch);
    double last = first;
    for (int i = 1; i < 200; ++i) last = train_step(m, st, cfg, batch);
    EXPECT_LE(last, first / 10) << "first " << first << " last " << last;
}

TEST(Train, SameSeedSameHistory) {
    const auto c = small_config();
    const auto data = synth_samples(12, 5, 48, c.input_size);
    const std::vector<Sample> tr(data.begin(), data.begin() + 8), va(data.begin() + 8, data.end());
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 11;
    Model<float> a(c), b(c);
    const auto ha = train(a, tr, va, cfg);
    const auto hb = train(b, tr, va, cfg);
    ASSERT_EQ(ha.size(), 2u);
    EXPECT_EQ(ha, hb);
    EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
    for (const auto& r : ha) {
        EXPECT_TRUE(std::isfinite(r.train_loss));
        EXPECT_GE(r.val_miou, 0.0);
        EXPECT_LE(r.val_miou, 1.0);
    }
}

TEST(Train, WritesHistoryAndBestCheckpoint) {
    TempDir dir;
    const auto c = small_config();
    const auto data = synth_samples(6, 6, 48, c.input_size);
    const std::vector<Sample> tr(data.begin(), data.begin() + 4), va(data.begin() + 4, data.end());
    TrainConfig cfg;
    cfg.epochs = 3;
    std::ostringstream out;
    Model<float> m(c);
    const auto h = train(m, tr, va, cfg, TrainOutputs{dir / "best.pckp", dir / "history.csv", &out});
    std::ostringstream want;
    want << history_csv_header << '\n';
    for (const auto& r : h) want << history_csv_line(r) << '\n';
    EXPECT_EQ(out.str(), want.str());
    const auto file = read_file(dir / "history.csv");
    EXPECT_EQ(std::string(file.begin(), file.end()), want.str());

    // The saved checkpoint reproduces the best validation score.
    const auto best = std::max_element(h.begin(), h.end(), [](auto& x, auto& y) { return x.val_miou < y.val_miou; });
    const auto loaded = load_checkpoint(dir / "best.pckp");
    EXPECT_EQ(evaluate_model(loaded, va).miou, best->val_miou);
}

TEST(Train, SupervisedNeverReadsTeacherFiles) {
    TempDir dir;
    const auto c = small_config();
    synth_shapes_dataset(dir / "d", SynthConfig{6, 9, 48, c.input_size});
    for (const auto& s : sample_dirs(dir / "d")) std::filesystem::remove(s / "teacher.ptsr");
    const auto data = load_dataset(dir / "d", TeacherFiles::ignore);
    const std::vector<Sample> tr(data.begin(), data.begin() + 4), va(data.begin() + 4, data.end());
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.mode = TrainMode::supervised;
    Model<float> m(c);
    EXPECT_NO_THROW(train(m, tr, va, cfg));

    cfg.mode = TrainMode::distilled;
    try {
        train(m, tr, va, cfg);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("sample_00000"), std::string::npos) << e.what();
    }
    // Teacher files are optional at load time; distilled training reports the gap.
    for (const auto& s : load_dataset(dir / "d", TeacherFiles::load)) EXPECT_FALSE(s.teacher.has_value());
}

TEST(Train, TeacherSideMustMatchModel) {
    const auto data = synth_samples(2, 1, 48, 16);
    EXPECT_THROW(check_teachers(data, 32), DataError);
    EXPECT_NO_THROW(check_teachers(data, 16));
}

TEST(Train, EmptySetsRejected) {
    Model<float> m(small_config());
    const auto data = synth_samples(1, 1, 48, 32);
    EXPECT_THROW(train(m, {}, data, TrainConfig{}), DataError);
    EXPECT_THROW(train(m, data, {}, TrainConfig{}), DataError);
}

TEST(InteriorPrompt, AlwaysInsideTheMask) {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        const auto m = picosam::test::random_mask({1, 1, 9, 13}, rng, 0.1);
        std::size_t ones = 0;
        for (auto v : m.data()) ones += v != 0.0f;
        if (ones == 0) {
            EXPECT_THROW(sample_interior_point(m, rng), DataError);
            continue;
        }
        const auto p = sample_interior_point(m, rng);
        EXPECT_EQ(m.at(0, 0, static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x)), 1.0f);
    }
}

TEST(InteriorPrompt, CoversEveryForegroundPixel) {
    Tensor<float> m({1, 1, 4, 4});
    m.at(0, 0, 0, 3) = m.at(0, 0, 2, 1) = m.at(0, 0, 3, 3) = 1.0f;
    Rng rng(5);
    std::set<std::pair<std::int64_t, std::int64_t>> seen;
    for (int i = 0; i < 200; ++i) {
        const auto p = sample_interior_point(m, rng);
        seen.insert({p.x, p.y});
    }
    EXPECT_EQ(seen.size(), 3u);
}

TEST(InteriorPrompt, SupervisedTrainingRuns) {
    const auto c = small_config();
    const auto data = synth_samples(6, 2, 48, c.input_size);
    const std::vector<Sample> tr(data.begin(), data.begin() + 4), va(data.begin() + 4, data.end());
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.mode = TrainMode::supervised;
    cfg.prompt_sampling = PromptSampling::interior;
    Model<float> a(c), b(c);
    EXPECT_EQ(train(a, tr, va, cfg), train(b, tr, va, cfg));
    AdamWState<float> st(a.params());
    EXPECT_THROW(train_step(a, st, cfg, {&tr[0]}), StateError);
}
