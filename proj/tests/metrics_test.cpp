#include <cmath>

#include <gtest/gtest.h>

#include "picosam/metrics.hpp"
#include "test_util.hpp"

using namespace picosam;
using picosam::test::random_mask;

namespace {

// Precision/recall at every cutoff k, then for each recall level r the best
// precision among cutoffs with recall >= r; AP sums that over the recall
// steps. Written without the running-max trick used by the library.
double brute_force_ap(const std::vector<ScoredPrediction>& preds, double tau) {
    const std::size_t n = preds.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return preds[a].score > preds[b].score; });
    std::vector<double> prec(n + 1, 0.0), rec(n + 1, 0.0);
    std::size_t tp = 0;
    for (std::size_t k = 1; k <= n; ++k) {
        tp += preds[order[k - 1]].iou >= tau;
        prec[k] = static_cast<double>(tp) / static_cast<double>(k);
        rec[k] = static_cast<double>(tp) / static_cast<double>(n);
    }
    double ap = 0;
    for (std::size_t k = 1; k <= n; ++k) {
        const double step = rec[k] - rec[k - 1];
        if (step == 0) continue;
        double best = 0;
        for (std::size_t j = 1; j <= n; ++j)
            if (rec[j] >= rec[k]) best = std::max(best, prec[j]);
        ap += step * best;
    }
    return ap;
}

double brute_force_map(const std::vector<ScoredPrediction>& preds) {
    double s = 0;
    for (int i = 0; i < 10; ++i) s += brute_force_ap(preds, 0.5 + 0.05 * i);
    return s / 10;
}

std::vector<ScoredPrediction> random_preds(Rng& rng, std::size_t n) {
    std::vector<ScoredPrediction> p(n);
    for (auto& x : p) {
        x.score = rng.uniform();
        x.iou = rng.uniform() < 0.2 ? 1.0 : rng.uniform();
    }
    return p;
}

} // namespace

TEST(Iou, Examples) {
    Tensor<float> a({1, 1, 1, 4}, std::vector<float>{1, 1, 0, 0});
    EXPECT_EQ(iou(a, a), 1.0);
    Tensor<float> b({1, 1, 1, 4}, std::vector<float>{0, 0, 1, 1});
    EXPECT_EQ(iou(a, b), 0.0);
    Tensor<float> c({1, 1, 1, 4}, std::vector<float>{0, 1, 1, 0});
    EXPECT_EQ(iou(a, c), 1.0 / 3.0);
    Tensor<float> empty({1, 1, 1, 4});
    EXPECT_EQ(iou(empty, empty), 1.0);
    EXPECT_EQ(iou(empty, a), 0.0);
    EXPECT_EQ(iou(a, empty), 0.0);
}

TEST(Iou, Errors) {
    EXPECT_THROW(iou(Tensor<float>({1, 2}), Tensor<float>({2, 1})), ShapeError);
    EXPECT_THROW(iou(Tensor<float>({2}, 0.5f), Tensor<float>({2})), DomainError);
}

TEST(Iou, SymmetricAndPermutationInvariant) {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        const auto a = random_mask({1, 1, 7, 9}, rng, 0.4), b = random_mask({1, 1, 7, 9}, rng, 0.4);
        EXPECT_EQ(iou(a, b), iou(b, a));
        std::vector<std::size_t> perm(a.numel());
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Tensor<float> pa(a.shape()), pb(a.shape());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            pa[i] = a[perm[i]];
            pb[i] = b[perm[i]];
        }
        EXPECT_EQ(iou(pa, pb), iou(a, b));
    }
}

TEST(Miou, Examples) {
    EXPECT_EQ(miou({1.0, 0.0}), 0.5);
    EXPECT_EQ(miou({0.25, 0.25, 0.25}), 0.25);
    EXPECT_THROW(miou({}), DomainError);
    Rng rng(2);
    std::vector<double> v(100);
    long double sum = 0;
    for (auto& x : v) {
        x = rng.uniform();
        sum += x;
    }
    EXPECT_NEAR(miou(v), static_cast<double>(sum / 100), 1e-12);
}

TEST(Map, PerfectAndHopeless) {
    std::vector<ScoredPrediction> perfect{{0.9, 1.0}, {0.2, 1.0}, {0.5, 1.0}};
    EXPECT_EQ(map_single_prompt(perfect), 1.0);
    std::vector<ScoredPrediction> poor{{0.9, 0.3}, {0.2, 0.3}};
    EXPECT_EQ(map_single_prompt(poor), 0.0);
    EXPECT_THROW(map_single_prompt({}), DomainError);
    EXPECT_THROW(map_single_prompt({{std::nan(""), 1.0}}), DomainError);
}

TEST(Map, HandComputedCase) {
    // Ranked hits at tau=0.5: T F T -> precisions 1, 1/2, 2/3; interpolated
    // at the second hit: 2/3. AP = (1 + 2/3) / 3.
    std::vector<ScoredPrediction> p{{0.9, 0.8}, {0.8, 0.1}, {0.7, 0.6}};
    EXPECT_NEAR(average_precision(p, 0.5), (1.0 + 2.0 / 3.0) / 3.0, 1e-15);
}

TEST(Map, MatchesBruteForceOracle) {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const auto p = random_preds(rng, static_cast<std::size_t>(rng.integer(5, 20)));
        EXPECT_NEAR(map_single_prompt(p), brute_force_map(p), 1e-9);
    }
}

TEST(Map, InvariantUnderMonotoneScoreMaps) {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        auto p = random_preds(rng, 12);
        const double m = map_single_prompt(p);
        const double a = rng.uniform(0.5, 3.0), b = rng.uniform(-2, 2);
        for (auto& x : p) x.score = std::exp(a * x.score) + b;
        EXPECT_EQ(map_single_prompt(p), m);
    }
}

TEST(Map, ApNonIncreasingInThreshold) {
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
        const auto p = random_preds(rng, 15);
        double prev = 2;
        for (double tau : map_thresholds()) {
            const double ap = average_precision(p, tau);
            EXPECT_LE(ap, prev + 1e-15);
            prev = ap;
        }
    }
}

TEST(Efficiency, ReportedFigure) {
    const auto r = efficiency_report(324e6, 0.0143, 262.5e6, 2304.0);
    EXPECT_NEAR(r.macs_per_cycle, 86.3, 0.1);
    ASSERT_TRUE(r.utilization);
    EXPECT_NEAR(*r.utilization, r.macs_per_cycle / 2304.0, 1e-15);
}

TEST(Efficiency, ScalingLaws) {
    EXPECT_EQ(efficiency_report(1000.0, 0.5, 2000.0).macs_per_cycle, 1.0);
    const double a = efficiency_report(5e8, 0.01, 1e8).macs_per_cycle;
    const double b = efficiency_report(5e8, 0.02, 1e8).macs_per_cycle;
    EXPECT_DOUBLE_EQ(b, a / 2);
    EXPECT_THROW(efficiency_report(0, 1, 1), DomainError);
    EXPECT_THROW(efficiency_report(1, -1, 1), DomainError);
    EXPECT_THROW(efficiency_report(1, 1, 0), DomainError);
    EXPECT_THROW(efficiency_report(1, 1, 1, 0.0), DomainError);
}

TEST(Binarize, ThresholdAtHalfProbability) {
    Tensor<float> l({4}, std::vector<float>{-1.0f, 0.0f, 1e-6f, 3.0f});
    EXPECT_EQ(binarize_logits(l), (Tensor<float>({4}, std::vector<float>{0, 0, 1, 1})));
    EXPECT_NEAR(mask_score(l), (sigmoid(1e-6) + sigmoid(3.0)) / 2, 1e-7);
    EXPECT_EQ(mask_score(Tensor<float>({2}, -1.0f)), 0.0);
}

TEST(Report, KeyValuesAndCsv) {
    MetricsReport r;
    r.miou = 0.5;
    r.params = 10;
    r.macs = 20;
    r.model_bytes = 30;
    EXPECT_EQ(r.key_values(), "miou=0.5\nparams=10\nmacs=20\nmodel_bytes=30\n");
    EXPECT_EQ(r.csv(), "0.5,,10,20,30,");
    EXPECT_EQ(std::string(MetricsReport::csv_header), "miou,map,params,macs,model_bytes,macs_per_cycle");
}
