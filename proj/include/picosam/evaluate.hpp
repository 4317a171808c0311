#ifndef PICOSAM_EVALUATE_HPP
#define PICOSAM_EVALUATE_HPP

#include <functional>
#include <vector>

#include "dataset.hpp"
#include "metrics.hpp"
#include "prompt.hpp"

namespace picosam {

struct EvalResult {
    std::vector<double> ious;
    std::vector<ScoredPrediction> predictions;
    double miou = 0;
    double map = 0;
};

// Crop-frame logits for one prompt-centred crop.
using Predictor = std::function<Tensor<float>(const Tensor<float>&)>;

// Binary original-frame mask and its score for one sample.
struct SamplePrediction {
    Tensor<float> mask;
    double score = 0;
};

inline SamplePrediction predict_sample(const Predictor& predict, const Tensor<float>& image, PromptPoint prompt,
                                       std::size_t crop_size) {
    const auto c = crop_centered(image, prompt, crop_size);
    const auto logits = predict(c.crop);
    return {uncrop_mask(binarize_logits(logits), c.spec), mask_score(logits)};
}

// Scores every sample in its original frame, prompting at the stored point.
inline EvalResult evaluate(const Predictor& predict, const std::vector<Sample>& samples, std::size_t crop_size) {
    if (samples.empty()) throw DataError("evaluate: no samples");
    EvalResult r;
    for (const auto& s : samples) {
        const auto p = predict_sample(predict, s.image, s.prompt, crop_size);
        const double v = iou(p.mask, s.mask);
        r.ious.push_back(v);
        r.predictions.push_back({p.score, v});
    }
    r.miou = miou(r.ious);
    r.map = map_single_prompt(r.predictions);
    return r;
}

} // namespace picosam

#endif
