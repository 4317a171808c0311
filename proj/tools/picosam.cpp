// picosam: command-line front end for the whole pipeline.
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 data or format error,
// 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>

#include "picosam/checkpoint.hpp"
#include "picosam/dataset.hpp"
#include "picosam/evaluate.hpp"
#include "picosam/gradcheck.hpp"
#include "picosam/metrics.hpp"
#include "picosam/quant.hpp"
#include "picosam/trainer.hpp"

namespace fs = std::filesystem;
using namespace picosam;

namespace {

enum Exit : int { ok = 0, usage = 1, data = 2, numeric = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Either model kind, chosen by the file's magic bytes.
struct LoadedModel {
    std::variant<Model<float>, QuantizedModel> m;

    const ModelConfig& config() const {
        return std::visit([](const auto& x) -> const ModelConfig& {
            if constexpr (std::is_same_v<std::decay_t<decltype(x)>, QuantizedModel>) return x.config;
            else return x.config();
        }, m);
    }

    Predictor predictor() const {
        if (const auto* q = std::get_if<QuantizedModel>(&m))
            return [q](const Tensor<float>& crop) { return quantized_forward(*q, crop); };
        const auto* f = &std::get<Model<float>>(m);
        return [f](const Tensor<float>& crop) { return f->forward(crop); };
    }
};

LoadedModel load_model(const fs::path& path) {
    const auto bytes = read_file(path);
    const std::string magic(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(4, bytes.size())));
    if (magic == "PCKP") return {checkpoint_from_bytes(bytes, path.string())};
    if (magic == "PQNT") return {deserialize_quantized(bytes, path.string())};
    throw FormatError(path.string() + ": not a checkpoint (PCKP) or quantized model (PQNT)", 0);
}

PromptPoint parse_point(const std::string& s) {
    const auto comma = s.find(',');
    std::int64_t x = 0, y = 0;
    std::istringstream xs(s.substr(0, comma)), ys(comma == std::string::npos ? "" : s.substr(comma + 1));
    if (comma == std::string::npos || !(xs >> x) || !(ys >> y) || !xs.eof() || !ys.eof())
        throw UsageError("--point: expected X,Y integers, got '" + s + "'");
    return {x, y};
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    SynthConfig cfg{0, 0, 96, 64};
};

int run_synth(const SynthArgs& a) {
    synth_shapes_dataset(a.out, a.cfg);
    std::cout << "wrote " << a.cfg.count << " samples to " << a.out << '\n';
    return ok;
}

struct TrainArgs {
    std::string data, config, mode, out, val_data, history, prompt_sampling;
    std::optional<std::size_t> epochs, batch_size, val_count;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
    const auto kv = KeyValues::load(a.config);
    auto keys = model_config_keys();
    keys.insert(keys.end(), train_config_keys().begin(), train_config_keys().end());
    kv.require_known(keys);
    const auto model_cfg = model_config_from(kv);

    TrainConfig tc = train_config_from(kv);
    if (!a.mode.empty()) tc.mode = parse_train_mode(a.mode);
    if (!a.prompt_sampling.empty()) tc.prompt_sampling = parse_prompt_sampling(a.prompt_sampling);
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.lr) tc.lr = *a.lr;
    if (a.seed) tc.seed = *a.seed;
    tc.validate();

    const auto teachers = tc.mode == TrainMode::distilled ? TeacherFiles::load : TeacherFiles::ignore;
    auto samples = load_dataset(a.data, teachers);
    std::vector<Sample> train_set, val_set;
    if (!a.val_data.empty()) {
        train_set = std::move(samples);
        val_set = load_dataset(a.val_data, TeacherFiles::ignore);
    } else {
        const std::size_t n_val = a.val_count ? *a.val_count : samples.size() / 6;
        if (n_val == 0 || n_val >= samples.size())
            throw UsageError("--val-count: need between 1 and " + std::to_string(samples.size() - 1) +
                             " validation samples out of " + std::to_string(samples.size()));
        const auto split = samples.begin() + static_cast<std::ptrdiff_t>(samples.size() - n_val);
        train_set.assign(std::make_move_iterator(samples.begin()), std::make_move_iterator(split));
        val_set.assign(std::make_move_iterator(split), std::make_move_iterator(samples.end()));
    }

    fs::path history = a.history;
    if (history.empty()) history = fs::path(a.out).replace_extension(".history.csv");
    Model<float> model(model_cfg);
    const auto rows = train(model, train_set, val_set, tc, TrainOutputs{fs::path(a.out), history, &std::cout});
    double best = -1;
    for (const auto& r : rows) best = std::max(best, r.val_miou);
    std::cerr << "best val mIoU " << best << " -> " << a.out << '\n';
    return ok;
}

struct QuantizeArgs {
    std::string ckpt, calib, out;
    std::size_t calib_count = 32;
    bool strict = false;
};

int run_quantize(const QuantizeArgs& a) {
    const auto model = load_checkpoint(a.ckpt);
    const auto samples = load_dataset(a.calib, TeacherFiles::ignore);
    const auto side = model.config().input_size;
    std::vector<Tensor<float>> crops;
    for (std::size_t i = 0; i < std::min(a.calib_count, samples.size()); ++i)
        crops.push_back(crop_centered(samples[i].image, samples[i].prompt, side).crop);
    if (crops.empty()) throw UsageError("--calib-count must be at least 1");
    QuantizeOptions opt;
    opt.degenerate = a.strict ? DegenerateRange::error : DegenerateRange::fallback;
    const auto q = quantize_model(model, calibrate(model, crops), opt);
    save_quantized(q, a.out);
    std::cout << "calibrated on " << crops.size() << " samples, wrote " << serialize_quantized(q).size() << " bytes to "
              << a.out << '\n';
    return ok;
}

struct InferArgs {
    std::string model, image, point, out;
};

int run_infer(const InferArgs& a) {
    const auto p = parse_point(a.point);
    const auto m = load_model(a.model);
    const auto image = load_ppm(a.image);
    if (p.x < 0 || p.y < 0 || p.x >= static_cast<std::int64_t>(image.dim(3)) || p.y >= static_cast<std::int64_t>(image.dim(2)))
        throw UsageError("--point " + a.point + " lies outside " + a.image + " (" + std::to_string(image.dim(3)) + "x" +
                         std::to_string(image.dim(2)) + ")");
    const auto pred = predict_sample(m.predictor(), image, p, m.config().input_size);
    save_pgm(pred.mask, a.out);
    std::cout << "score=" << pred.score << '\n';
    return ok;
}

struct EvalArgs {
    std::string model, data, metrics = "miou,map";
};

int run_eval(const EvalArgs& a) {
    bool want_miou = false, want_map = false;
    for (const auto& m : split_list(a.metrics)) {
        if (m == "miou") want_miou = true;
        else if (m == "map") want_map = true;
        else throw UsageError("--metrics: unknown metric '" + m + "' (expected miou, map)");
    }
    if (!want_miou && !want_map) throw UsageError("--metrics: no metric requested");
    const auto m = load_model(a.model);
    const auto samples = load_dataset(a.data, TeacherFiles::ignore);
    const auto r = evaluate(m.predictor(), samples, m.config().input_size);
    std::cout.precision(6);
    std::cout << "samples=" << samples.size() << '\n';
    if (want_miou) std::cout << "miou=" << r.miou << '\n';
    if (want_map) std::cout << "map=" << r.map << '\n';
    return ok;
}

struct StatsArgs {
    std::string config;
    std::optional<double> latency_ms, clock_hz, mac_units;
};

int run_stats(const StatsArgs& a) {
    const auto kv = KeyValues::load(a.config);
    auto keys = model_config_keys();
    keys.insert(keys.end(), train_config_keys().begin(), train_config_keys().end());
    kv.require_known(keys);
    const auto cfg = model_config_from(kv);
    if (a.latency_ms.has_value() != a.clock_hz.has_value())
        throw UsageError("--latency and --clock must be given together");
    if (a.mac_units && !a.latency_ms) throw UsageError("--mac-units needs --latency and --clock");

    Model<float> model(cfg);
    init_params(model, 0);
    const Shape input{1, 3, cfg.input_size, cfg.input_size};
    const auto graph = model.fold();
    // File sizes depend only on the structure, so placeholder ranges suffice.
    CalibrationRanges ranges{graph.edge_names, std::vector<EdgeRange>(graph.edge_count(), EdgeRange{-1.0f, 1.0f})};
    const auto q = quantize_model(graph, ranges);

    const auto params = count_params(model);
    const auto qmacs = count_macs_quantized(q, input);
    const auto float_bytes = checkpoint_bytes(model).size();
    const auto quant_bytes = serialize_quantized(q).size();
    std::cout.precision(6);
    std::cout << "params=" << params << '\n'
              << "macs=" << model.count_macs(input) << '\n'
              << "quantized_macs=" << qmacs << '\n'
              << "float_payload_bytes=" << params * 4 << '\n'
              << "float_bytes=" << float_bytes << '\n'
              << "quantized_bytes=" << quant_bytes << '\n'
              << "float_mb=" << static_cast<double>(float_bytes) / 1e6 << '\n'
              << "quantized_mb=" << static_cast<double>(quant_bytes) / 1e6 << '\n';
    if (a.latency_ms) {
        const auto e = efficiency_report(static_cast<double>(qmacs), *a.latency_ms / 1000.0, *a.clock_hz, a.mac_units);
        std::cout << "macs_per_cycle=" << e.macs_per_cycle << '\n';
        if (e.utilization) std::cout << "utilization=" << *e.utilization << '\n';
    }
    return ok;
}

int run_gradcheck(std::uint64_t seed) {
    bool all = true;
    for (const auto& r : gradient_suite(seed)) {
        all = all && r.passed();
        std::printf("%-4s %-36s error %.3e  tolerance %.0e  checked %zu\n", r.passed() ? "ok" : "FAIL", r.name.c_str(),
                    r.error, r.tolerance, r.checked);
    }
    return all ? ok : numeric;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e)) return usage;
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DegenerateRangeError*>(&e) ||
        dynamic_cast<const StateError*>(&e))
        return numeric;
    return data;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prompt-point segmentation pipeline: synthetic data, training, INT8 quantization, inference and evaluation"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic shapes dataset");
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--count", synth.cfg.count, "Number of samples")->required();
    s->add_option("--seed", synth.cfg.seed, "Random seed")->required();
    s->add_option("--image-size", synth.cfg.image_size, "Image side in pixels")->capture_default_str();
    s->add_option("--crop-size", synth.cfg.crop_size, "Crop side (model input size) for teacher logits")->capture_default_str();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model; writes the best-validation checkpoint");
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--config", tr.config, "Config file (model keys, optional training keys)")->required();
    t->add_option("--mode", tr.mode, "distilled or supervised (overrides the config)");
    t->add_option("--out", tr.out, "Checkpoint path for the best epoch")->required();
    t->add_option("--epochs", tr.epochs, "Epochs");
    t->add_option("--lr", tr.lr, "Learning rate");
    t->add_option("--seed", tr.seed, "Seed for initialization and shuffling");
    t->add_option("--batch-size", tr.batch_size, "Batch size");
    t->add_option("--val-data", tr.val_data, "Separate validation dataset directory");
    t->add_option("--val-count", tr.val_count, "Hold out the last N samples of --data (default: a sixth)");
    t->add_option("--history", tr.history, "History CSV path (default: <out>.history.csv)");
    t->add_option("--prompt-sampling", tr.prompt_sampling, "centroid or interior (interior needs supervised mode)");

    QuantizeArgs qa;
    auto* q = app.add_subcommand("quantize", "Calibrate and quantize a checkpoint to INT8");
    q->add_option("--ckpt", qa.ckpt, "Float checkpoint")->required();
    q->add_option("--calib", qa.calib, "Calibration dataset directory")->required();
    q->add_option("--out", qa.out, "Quantized model path")->required();
    q->add_option("--calib-count", qa.calib_count, "Calibration samples to use")->capture_default_str();
    q->add_flag("--strict-ranges", qa.strict, "Fail on a zero-range activation edge instead of falling back to scale 1");

    InferArgs ia;
    auto* i = app.add_subcommand("infer", "Segment the object under a prompt point");
    i->add_option("--model", ia.model, "Checkpoint or quantized model")->required();
    i->add_option("--image", ia.image, "Binary P6 image")->required();
    i->add_option("--point", ia.point, "Prompt as X,Y pixel coordinates")->required();
    i->add_option("--out", ia.out, "Output mask (binary P5)")->required();

    EvalArgs ea;
    auto* e = app.add_subcommand("eval", "Score a model on a dataset");
    e->add_option("--model", ea.model, "Checkpoint or quantized model")->required();
    e->add_option("--data", ea.data, "Dataset directory")->required();
    e->add_option("--metrics", ea.metrics, "Comma-separated subset of miou,map")->capture_default_str();

    StatsArgs sa;
    auto* st = app.add_subcommand("stats", "Parameter, MAC and size accounting for a model config");
    st->add_option("--config", sa.config, "Model config file")->required();
    st->add_option("--latency", sa.latency_ms, "Measured latency in milliseconds");
    st->add_option("--clock", sa.clock_hz, "Clock frequency in Hz");
    st->add_option("--mac-units", sa.mac_units, "MAC units in the array, for utilization");

    std::uint64_t gc_seed = 0;
    auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every layer and loss");
    g->add_option("--seed", gc_seed, "Random seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return usage;
    }

    try {
        if (s->parsed()) return run_synth(synth);
        if (t->parsed()) return run_train(tr);
        if (q->parsed()) return run_quantize(qa);
        if (i->parsed()) return run_infer(ia);
        if (e->parsed()) return run_eval(ea);
        if (st->parsed()) return run_stats(sa);
        if (g->parsed()) return run_gradcheck(gc_seed);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return exit_code_for(err);
    }
    return usage;
}
