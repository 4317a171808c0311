#ifndef PICOSAM_METRICS_HPP
#define PICOSAM_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ops.hpp"

namespace picosam {

// |P & G| / |P | G|. Two empty masks score 1; exactly one empty scores 0.
template <Element T>
double iou(const Tensor<T>& pred, const Tensor<T>& gt) {
    require_same_shape(pred, gt, "iou");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] != T(0), g = gt[i] != T(0);
        if ((pred[i] != T(0) && pred[i] != T(1)) || (gt[i] != T(0) && gt[i] != T(1))) {
            throw DomainError("iou: masks must be binary (element " + std::to_string(i) + ")");
        }
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double miou(const std::vector<double>& per_instance) {
    if (per_instance.empty()) throw DomainError("miou: no instances");
    return std::accumulate(per_instance.begin(), per_instance.end(), 0.0) / static_cast<double>(per_instance.size());
}

// Logits -> {0,1} at probability 0.5 (logit 0).
template <std::floating_point T>
Tensor<T> binarize_logits(const Tensor<T>& logits) {
    Tensor<T> m(logits.shape());
    for (std::size_t i = 0; i < logits.numel(); ++i) m[i] = logits[i] > T(0) ? T(1) : T(0);
    return m;
}

// Mean sigmoid probability inside the predicted mask; 0 for an empty mask.
template <std::floating_point T>
double mask_score(const Tensor<T>& logits) {
    double sum = 0;
    std::size_t n = 0;
    for (auto s : logits.data()) {
        if (s > T(0)) {
            sum += sigmoid(static_cast<double>(s));
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

struct ScoredPrediction {
    double score = 0;
    double iou = 0;
};

inline const std::vector<double>& map_thresholds() {
    static const std::vector<double> t = [] {
        std::vector<double> v;
        for (int i = 0; i < 10; ++i) v.push_back(0.50 + 0.05 * i);
        return v;
    }();
    return t;
}

// AP at one IoU threshold with all-point interpolation: every true positive
// adds 1/P recall at the best precision reachable at that recall or beyond.
// Ties in score keep input order.
inline double average_precision(const std::vector<ScoredPrediction>& preds, double threshold) {
    if (preds.empty()) throw DomainError("average_precision: no predictions");
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
    const std::size_t n = preds.size();
    std::vector<double> precision(n);
    std::vector<bool> hit(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        hit[k] = preds[order[k]].iou >= threshold;
        tp += hit[k];
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    }
    for (std::size_t k = n - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
    double ap = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (hit[k]) ap += precision[k];
    return ap / static_cast<double>(n);
}

// Mean AP over IoU thresholds 0.50:0.05:0.95, one prediction per prompt.
inline double map_single_prompt(const std::vector<ScoredPrediction>& preds) {
    if (preds.empty()) throw DomainError("map_single_prompt: no predictions");
    for (const auto& p : preds)
        if (!std::isfinite(p.score)) throw DomainError("map_single_prompt: non-finite score");
    double sum = 0;
    for (double t : map_thresholds()) sum += average_precision(preds, t);
    return sum / static_cast<double>(map_thresholds().size());
}

struct EfficiencyReport {
    double macs_per_cycle = 0;
    std::optional<double> utilization; // fraction of the MAC array kept busy
};

inline EfficiencyReport efficiency_report(double macs, double latency_s, double clock_hz,
                                          std::optional<double> mac_units = std::nullopt) {
    if (!(macs > 0 && latency_s > 0 && clock_hz > 0)) {
        throw DomainError("efficiency_report: macs, latency and clock must all be positive");
    }
    if (mac_units && !(*mac_units > 0)) throw DomainError("efficiency_report: MAC-array width must be positive");
    EfficiencyReport r;
    r.macs_per_cycle = macs / (latency_s * clock_hz);
    if (mac_units) r.utilization = r.macs_per_cycle / *mac_units;
    return r;
}

struct MetricsReport {
    std::optional<double> miou;
    std::optional<double> map;
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
    std::uint64_t model_bytes = 0;
    std::optional<double> macs_per_cycle;

    std::string key_values() const {
        std::ostringstream os;
        os.precision(6);
        if (miou) os << "miou=" << *miou << '\n';
        if (map) os << "map=" << *map << '\n';
        os << "params=" << params << '\n' << "macs=" << macs << '\n' << "model_bytes=" << model_bytes << '\n';
        if (macs_per_cycle) os << "macs_per_cycle=" << *macs_per_cycle << '\n';
        return os.str();
    }

    // Single CSV line; missing optional fields are left empty.
    std::string csv() const {
        std::ostringstream os;
        os.precision(6);
        auto opt = [&](const std::optional<double>& v) {
            if (v) os << *v;
        };
        opt(miou);
        os << ',';
        opt(map);
        os << ',' << params << ',' << macs << ',' << model_bytes << ',';
        opt(macs_per_cycle);
        return os.str();
    }

    static constexpr const char* csv_header = "miou,map,params,macs,model_bytes,macs_per_cycle";
};

} // namespace picosam

#endif
