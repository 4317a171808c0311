#ifndef PICOSAM_TRAINER_HPP
#define PICOSAM_TRAINER_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "evaluate.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace picosam {

enum class TrainMode { distilled, supervised };

inline const char* train_mode_name(TrainMode m) { return m == TrainMode::distilled ? "distilled" : "supervised"; }

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "distilled") return TrainMode::distilled;
    if (s == "supervised") return TrainMode::supervised;
    throw ConfigError("unknown training mode '" + s + "' (expected distilled or supervised)");
}

// Where training crops are centred. `centroid` uses the stored prompt;
// `interior` draws a fresh mask pixel per step (ablation only; the stored
// teacher crops are centred on the stored prompt, so it needs supervised mode).
enum class PromptSampling { centroid, interior };

inline const char* prompt_sampling_name(PromptSampling p) { return p == PromptSampling::centroid ? "centroid" : "interior"; }

inline PromptSampling parse_prompt_sampling(const std::string& s) {
    if (s == "centroid") return PromptSampling::centroid;
    if (s == "interior") return PromptSampling::interior;
    throw ConfigError("unknown prompt sampling '" + s + "' (expected centroid or interior)");
}

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
    std::size_t batch_size = 4;
    std::size_t epochs = 5;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::distilled;
    PromptSampling prompt_sampling = PromptSampling::centroid;
    LambdaPolicy lambda_policy;

    void validate() const {
        if (!(lr > 0 && std::isfinite(lr))) throw ConfigError("lr must be positive");
        if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("beta1 must lie in (0,1)");
        if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("beta2 must lie in (0,1)");
        if (!(eps > 0)) throw ConfigError("eps must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
        if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
        if (epochs == 0) throw ConfigError("epochs must be at least 1");
        if (prompt_sampling == PromptSampling::interior && mode == TrainMode::distilled)
            throw ConfigError("interior prompt sampling requires supervised mode");
        lambda_policy.validate();
    }
};

inline const std::vector<std::string>& train_config_keys() {
    static const std::vector<std::string> k{"lr",         "beta1", "beta2", "eps",  "weight_decay", "batch_size",
                                            "epochs",     "seed",  "mode",  "lambda_min", "lambda_max", "prompt_sampling"};
    return k;
}

// Applies any training keys present in `kv` on top of `base`.
inline TrainConfig train_config_from(const KeyValues& kv, TrainConfig base = {}) {
    if (kv.has("lr")) base.lr = kv.get_double("lr");
    if (kv.has("beta1")) base.beta1 = kv.get_double("beta1");
    if (kv.has("beta2")) base.beta2 = kv.get_double("beta2");
    if (kv.has("eps")) base.eps = kv.get_double("eps");
    if (kv.has("weight_decay")) base.weight_decay = kv.get_double("weight_decay");
    if (kv.has("batch_size")) base.batch_size = kv.get_size("batch_size");
    if (kv.has("epochs")) base.epochs = kv.get_size("epochs");
    if (kv.has("seed")) base.seed = kv.get_size("seed");
    if (kv.has("mode")) base.mode = parse_train_mode(kv.get("mode"));
    if (kv.has("lambda_min")) base.lambda_policy.lambda_min = kv.get_double("lambda_min");
    if (kv.has("lambda_max")) base.lambda_policy.lambda_max = kv.get_double("lambda_max");
    if (kv.has("prompt_sampling")) base.prompt_sampling = parse_prompt_sampling(kv.get("prompt_sampling"));
    base.validate();
    return base;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct AdamWState {
    std::vector<Tensor<T>> m, v;
    std::uint64_t t = 0;

    AdamWState() = default;
    explicit AdamWState(const ParamList<T>& params) {
        for (const auto* p : params) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
    }
};

// One decoupled-weight-decay Adam step. Decay uses the pre-update value.
// Fails before touching anything if any gradient is non-finite.
template <std::floating_point T>
void adamw_step(const ParamList<T>& params, AdamWState<T>& state, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) throw StateError("adamw_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].shape() != params[i]->value.shape())
            throw StateError("adamw_step: state shape mismatch for '" + params[i]->name + "'");
        for (auto g : params[i]->grad.data())
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[i]->name + "'");
    }
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
    const T lr = static_cast<T>(cfg.lr), decay = static_cast<T>(cfg.lr * cfg.weight_decay), eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->value;
        const auto& g = params[i]->grad;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.numel(); ++k) {
            m[k] = b1 * m[k] + (T(1) - b1) * g[k];
            v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
            const T mh = m[k] / c1;
            const T vh = v[k] / c2;
            p[k] = p[k] - lr * mh / (std::sqrt(vh) + eps) - decay * p[k];
        }
    }
}

// He-uniform conv weights, zero biases, identity norms.
template <std::floating_point T>
void init_params(Model<T>& model, std::uint64_t seed) {
    Rng rng(seed);
    for (auto* p : model.params()) {
        switch (p->role) {
        case ParamRole::conv_weight: {
            const double bound = std::sqrt(6.0 / static_cast<double>(p->fan_in));
            for (auto& w : p->value.data()) w = static_cast<T>(rng.uniform(-bound, bound));
            break;
        }
        case ParamRole::bias:
        case ParamRole::norm_shift: p->value.fill(T(0)); break;
        case ParamRole::norm_scale: p->value.fill(T(1)); break;
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct HistoryRow {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_miou = 0;

    friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

inline constexpr const char* history_csv_header = "epoch,train_loss,val_miou";

inline std::string history_csv_line(const HistoryRow& r) {
    std::ostringstream os;
    os.precision(9);
    os << r.epoch << ',' << r.train_loss << ',' << r.val_miou;
    return os.str();
}

struct TrainOutputs {
    std::optional<std::filesystem::path> best_checkpoint;
    std::optional<std::filesystem::path> history_file;
    std::ostream* history_stream = nullptr;
};

namespace detail {

inline Tensor<float> stack_batch(const std::vector<Tensor<float>>& items) {
    Shape shape = items.front().shape();
    shape[0] = items.size();
    Tensor<float> out(shape);
    const auto per = items.front().numel();
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(items[i].data().begin(), items[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    return out;
}

inline Tensor<float> batch_item(const Tensor<float>& t, std::size_t i) {
    Shape shape = t.shape();
    shape[0] = 1;
    const auto per = t.numel() / t.dim(0);
    const auto begin = t.data().begin() + static_cast<std::ptrdiff_t>(i * per);
    return Tensor<float>(shape, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(per)));
}

} // namespace detail

// Checks that distilled training has a correctly sized teacher for every sample.
inline void check_teachers(const std::vector<Sample>& samples, std::size_t side) {
    for (const auto& s : samples) {
        if (!s.teacher) throw DataError("sample '" + s.name + "' has no teacher logits (required in distilled mode)");
        if (s.teacher->dim(2) != side)
            throw DataError("sample '" + s.name + "' teacher side " + std::to_string(s.teacher->dim(2)) +
                            " does not match model input " + std::to_string(side));
    }
}

// Uniformly chosen foreground pixel of a binary mask.
inline PromptPoint sample_interior_point(const Tensor<float>& mask, Rng& rng) {
    std::size_t count = 0;
    for (auto v : mask.data()) count += v != 0.0f;
    if (count == 0) throw DataError("cannot sample a prompt inside an empty mask");
    auto k = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(count) - 1));
    const auto w = mask.dim(3);
    for (std::size_t i = 0; i < mask.numel(); ++i) {
        if (mask[i] == 0.0f) continue;
        if (k-- == 0) return {static_cast<std::int64_t>(i % w), static_cast<std::int64_t>(i / w)};
    }
    return {};
}

// One optimizer step on a batch; returns the mean per-sample loss.
// `prompt_rng` is only consulted for interior prompt sampling.
inline double train_step(Model<float>& model, AdamWState<float>& state, const TrainConfig& cfg,
                         const std::vector<const Sample*>& batch, Rng* prompt_rng = nullptr) {
    const auto side = model.config().input_size;
    std::vector<Tensor<float>> crops, gts;
    for (const auto* s : batch) {
        PromptPoint p = s->prompt;
        if (cfg.prompt_sampling == PromptSampling::interior) {
            if (!prompt_rng) throw StateError("interior prompt sampling needs a random source");
            p = sample_interior_point(s->mask, *prompt_rng);
        }
        crops.push_back(crop_centered(s->image, p, side).crop);
        gts.push_back(crop_centered(s->mask, p, side).crop);
    }
    typename Model<float>::Cache cache;
    const auto logits = model.forward(detail::stack_batch(crops), &cache);
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    Tensor<float> grad(logits.shape());
    double loss = 0;
    const auto per = logits.numel() / batch.size();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto student = detail::batch_item(logits, i);
        const auto l = cfg.mode == TrainMode::distilled
                           ? total_loss(student, *batch[i]->teacher, gts[i], cfg.lambda_policy)
                           : supervised_loss(student, gts[i]);
        if (!std::isfinite(l.loss)) throw NumericError("non-finite loss on sample '" + batch[i]->name + "'");
        loss += l.loss;
        for (std::size_t k = 0; k < per; ++k) grad[i * per + k] = l.grad[k] * inv_b;
    }
    const auto params = model.params();
    zero_grads(params);
    model.backward(grad, cache);
    adamw_step(params, state, cfg);
    return loss / static_cast<double>(batch.size());
}

inline EvalResult evaluate_model(const Model<float>& model, const std::vector<Sample>& samples) {
    return evaluate([&](const Tensor<float>& crop) { return model.forward(crop); }, samples,
                    model.config().input_size);
}

// Trains `model` in place from a seed-determined initialization. The
// checkpoint of the best validation epoch is written when requested.
inline std::vector<HistoryRow> train(Model<float>& model, const std::vector<Sample>& train_set,
                                     const std::vector<Sample>& val_set, const TrainConfig& cfg,
                                     const TrainOutputs& outputs = {}) {
    cfg.validate();
    if (train_set.empty()) throw DataError("training set is empty");
    if (val_set.empty()) throw DataError("validation set is empty");
    if (cfg.mode == TrainMode::distilled) check_teachers(train_set, model.config().input_size);

    init_params(model, cfg.seed);
    AdamWState<float> state(model.params());
    Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    Rng prompt_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    std::ofstream history_file;
    if (outputs.history_file) {
        if (outputs.history_file->has_parent_path()) std::filesystem::create_directories(outputs.history_file->parent_path());
        history_file.open(*outputs.history_file, std::ios::trunc);
        if (!history_file) throw DataError("cannot open '" + outputs.history_file->string() + "' for writing");
        history_file << history_csv_header << '\n';
    }
    if (outputs.history_stream) *outputs.history_stream << history_csv_header << '\n';

    std::vector<HistoryRow> history;
    double best = -1;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const Sample*> batch;
            for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k)
                batch.push_back(&train_set[order[k]]);
            sum += train_step(model, state, cfg, batch, &prompt_rng) * static_cast<double>(batch.size());
        }
        HistoryRow row{epoch, sum / static_cast<double>(order.size()), evaluate_model(model, val_set).miou};
        history.push_back(row);
        const auto line = history_csv_line(row);
        if (outputs.history_stream) *outputs.history_stream << line << std::endl;
        if (history_file) history_file << line << '\n' << std::flush;
        if (row.val_miou > best) {
            best = row.val_miou;
            if (outputs.best_checkpoint) save_checkpoint(model, *outputs.best_checkpoint);
        }
    }
    return history;
}

} // namespace picosam

#endif
