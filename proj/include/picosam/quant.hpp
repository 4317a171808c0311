#ifndef PICOSAM_QUANT_HPP
#define PICOSAM_QUANT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "folded_graph.hpp"
#include "io.hpp"
#include "model.hpp"

namespace picosam {

// Affine int8 mapping: real = (q - zero_point) * scale.
struct QuantParams {
    float scale = 1.0f;
    std::int8_t zero_point = 0;

    friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline std::int8_t quantize_value(double x, const QuantParams& qp) {
    const double q = std::nearbyint(x / static_cast<double>(qp.scale)) + qp.zero_point;
    return static_cast<std::int8_t>(std::clamp(q, -128.0, 127.0));
}

inline double dequantize_value(std::int32_t q, const QuantParams& qp) {
    return static_cast<double>(q - qp.zero_point) * static_cast<double>(qp.scale);
}

inline Tensor<std::int8_t> quantize_tensor(const Tensor<float>& x, const QuantParams& qp) {
    Tensor<std::int8_t> q(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) q[i] = quantize_value(x[i], qp);
    return q;
}

inline Tensor<float> dequantize_tensor(const Tensor<std::int8_t>& q, const QuantParams& qp) {
    Tensor<float> x(q.shape());
    for (std::size_t i = 0; i < q.numel(); ++i) x[i] = static_cast<float>(dequantize_value(q[i], qp));
    return x;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct EdgeRange {
    float min = std::numeric_limits<float>::infinity();
    float max = -std::numeric_limits<float>::infinity();

    friend bool operator==(const EdgeRange&, const EdgeRange&) = default;
};

struct CalibrationRanges {
    std::vector<std::string> edge_names;
    std::vector<EdgeRange> ranges;
};

// Running min/max of every edge over the calibration forward passes.
inline void accumulate_ranges(const FoldedGraph& g, const Tensor<float>& sample, CalibrationRanges& r) {
    run(g, sample, [&](std::size_t edge, const Tensor<float>& t) {
        auto& er = r.ranges[edge];
        for (auto v : t.data()) {
            if (!std::isfinite(v)) throw NumericError("calibration: non-finite activation on edge '" + g.edge_names[edge] + "'");
            er.min = std::min(er.min, v);
            er.max = std::max(er.max, v);
        }
    });
}

inline CalibrationRanges calibrate(const FoldedGraph& g, const std::vector<Tensor<float>>& samples) {
    if (samples.empty()) throw ConfigError("calibration needs at least one sample");
    CalibrationRanges r{g.edge_names, std::vector<EdgeRange>(g.edge_count())};
    for (const auto& s : samples) accumulate_ranges(g, s, r);
    return r;
}

template <std::floating_point T>
CalibrationRanges calibrate(const Model<T>& model, const std::vector<Tensor<float>>& samples) {
    return calibrate(model.fold(), samples);
}

enum class DegenerateRange { fallback, error };

struct QuantizeOptions {
    DegenerateRange degenerate = DegenerateRange::fallback;
    std::vector<std::string>* warnings = nullptr; // stderr when null
};

// Asymmetric per-tensor parameters over [min, max] widened to contain 0, so
// that zero padding and ReLU floors are exact on the grid.
inline QuantParams activation_params(EdgeRange r, const std::string& edge, const QuantizeOptions& opt = {}) {
    if (!std::isfinite(r.min) || !std::isfinite(r.max)) throw DegenerateRangeError("edge '" + edge + "' was never calibrated");
    const double lo = std::min(0.0, static_cast<double>(r.min));
    const double hi = std::max(0.0, static_cast<double>(r.max));
    if (!(hi > lo)) {
        const std::string msg = "edge '" + edge + "' has a zero calibration range";
        if (opt.degenerate == DegenerateRange::error) throw DegenerateRangeError(msg);
        if (opt.warnings) opt.warnings->push_back(msg + "; using scale 1");
        else std::cerr << "warning: " << msg << "; using scale 1\n";
        return {1.0f, 0};
    }
    QuantParams qp;
    qp.scale = static_cast<float>((hi - lo) / 255.0);
    // Round up so that 255 steps always span the range after float rounding.
    while (255.0 * static_cast<double>(qp.scale) < hi - lo)
        qp.scale = std::nextafter(qp.scale, std::numeric_limits<float>::infinity());
    const double zp = std::nearbyint(-128.0 - lo / static_cast<double>(qp.scale));
    qp.zero_point = static_cast<std::int8_t>(std::clamp(zp, -128.0, 127.0));
    return qp;
}

// Symmetric per-output-channel scales max|w|/127; an all-zero channel gets 1.
inline std::vector<float> weight_scales(const Tensor<float>& w) {
    const auto cout = w.dim(0), per = w.numel() / cout;
    std::vector<float> s(cout);
    for (std::size_t o = 0; o < cout; ++o) {
        float m = 0;
        for (std::size_t i = 0; i < per; ++i) m = std::max(m, std::abs(w[o * per + i]));
        s[o] = m > 0 ? m / 127.0f : 1.0f;
    }
    return s;
}

inline Tensor<std::int8_t> quantize_weights(const Tensor<float>& w, const std::vector<float>& scales) {
    const auto cout = w.dim(0), per = w.numel() / cout;
    Tensor<std::int8_t> q(w.shape());
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < per; ++i) {
            const double v = std::nearbyint(static_cast<double>(w[o * per + i]) / scales[o]);
            q[o * per + i] = static_cast<std::int8_t>(std::clamp(v, -127.0, 127.0));
        }
    return q;
}

inline Tensor<float> dequantize_weights(const Tensor<std::int8_t>& q, const std::vector<float>& scales) {
    const auto cout = q.dim(0), per = q.numel() / cout;
    Tensor<float> w(q.shape());
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < per; ++i) w[o * per + i] = static_cast<float>(q[o * per + i]) * scales[o];
    return w;
}

// ---------------------------------------------------------------------------
// Quantized model
// ---------------------------------------------------------------------------

struct QConv {
    std::size_t input = 0;
    std::size_t output = 0;
    Tensor<std::int8_t> weight;
    std::vector<float> weight_scales;
    Tensor<std::int32_t> bias; // scale s_in * s_w[o]
    ConvGeometry geom;
    bool relu = false;
};

struct QResize {
    std::size_t input = 0;
    std::size_t output = 0;
};

struct QConcat {
    std::size_t first = 0;
    std::size_t second = 0;
    std::size_t output = 0;
};

using QOp = std::variant<QConv, QResize, QConcat>;

struct QuantizedModel {
    ModelConfig config;
    std::vector<std::string> edge_names;
    std::vector<QuantParams> edges;
    std::size_t output_edge = 0;
    std::vector<QOp> ops;
};

namespace detail {

// Bound on every intermediate of the accumulation: |x_q|, |zp| <= 128.
inline void check_accumulator_bound(const QConv& c, const std::string& name) {
    const auto cout = c.weight.dim(0), per = c.weight.numel() / cout;
    for (std::size_t o = 0; o < cout; ++o) {
        std::int64_t bound = std::abs(static_cast<std::int64_t>(c.bias[o]));
        for (std::size_t i = 0; i < per; ++i) bound += 256 * std::abs(static_cast<std::int64_t>(c.weight[o * per + i]));
        if (bound > std::numeric_limits<std::int32_t>::max()) {
            throw NumericError("layer '" + name + "' channel " + std::to_string(o) +
                               " can overflow the int32 accumulator");
        }
    }
}

} // namespace detail

inline QuantizedModel quantize_model(const FoldedGraph& g, const CalibrationRanges& ranges,
                                     const QuantizeOptions& opt = {}) {
    if (ranges.ranges.size() != g.edge_count()) throw ConfigError("calibration ranges do not match the graph");
    QuantizedModel q;
    q.config = g.config;
    q.edge_names = g.edge_names;
    q.output_edge = g.output_edge;
    q.edges.resize(g.edge_count());
    std::vector<bool> assigned(g.edge_count(), false);
    auto params_for = [&](std::size_t e) -> const QuantParams& {
        if (!assigned[e]) {
            q.edges[e] = activation_params(ranges.ranges[e], g.edge_names[e], opt);
            assigned[e] = true;
        }
        return q.edges[e];
    };
    params_for(0);
    for (const auto& op : g.ops) {
        if (const auto* c = std::get_if<FoldedConv>(&op)) {
            QConv qc;
            qc.input = c->input;
            qc.output = c->output;
            qc.geom = c->geom;
            qc.relu = c->relu;
            qc.weight_scales = weight_scales(c->weight);
            qc.weight = quantize_weights(c->weight, qc.weight_scales);
            const double s_in = params_for(c->input).scale;
            params_for(c->output);
            qc.bias = Tensor<std::int32_t>({c->weight.dim(0)});
            for (std::size_t o = 0; o < qc.bias.numel(); ++o) {
                const double b = std::nearbyint(static_cast<double>(c->bias[o]) / (s_in * qc.weight_scales[o]));
                if (std::abs(b) > std::numeric_limits<std::int32_t>::max())
                    throw NumericError("layer '" + g.edge_names[c->output] + "' bias does not fit int32");
                qc.bias[o] = static_cast<std::int32_t>(b);
            }
            detail::check_accumulator_bound(qc, g.edge_names[c->output]);
            q.ops.emplace_back(std::move(qc));
        } else if (const auto* r = std::get_if<FoldedResize>(&op)) {
            // Nearest-neighbour copies codes, so the output shares the input grid.
            q.edges[r->output] = params_for(r->input);
            assigned[r->output] = true;
            q.ops.emplace_back(QResize{r->input, r->output});
        } else {
            const auto& cc = std::get<FoldedConcat>(op);
            params_for(cc.first);
            params_for(cc.second);
            params_for(cc.output);
            q.ops.emplace_back(QConcat{cc.first, cc.second, cc.output});
        }
    }
    return q;
}

template <std::floating_point T>
QuantizedModel quantize_model(const Model<T>& model, const CalibrationRanges& ranges, const QuantizeOptions& opt = {}) {
    return quantize_model(model.fold(), ranges, opt);
}

// ---------------------------------------------------------------------------
// Integer inference
// ---------------------------------------------------------------------------

// Raw int32 accumulators sum(x_q * w_q) - zp_in * sum(w_q) + bias, with
// padding taps reading zp_in (the code for real 0).
inline Tensor<std::int32_t> quantized_conv_accumulators(const Tensor<std::int8_t>& x, std::int8_t zp_in,
                                                        const Tensor<std::int8_t>& w, const Tensor<std::int32_t>& bias,
                                                        const ConvGeometry& geom) {
    check_conv_args(x, w, geom, "quantized conv");
    const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const auto cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
    const auto ho = conv_out_size(h, k, geom.stride, geom.pad), wo = conv_out_size(wd, k, geom.stride, geom.pad);
    const auto opg = cout / geom.groups;
    if (bias.numel() != cout) throw ShapeError("quantized conv: bias has " + std::to_string(bias.numel()) + " entries");
    (void)cin;

    std::vector<std::int32_t> wsum(cout, 0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < cpg * k * k; ++i) wsum[o] += w[o * cpg * k * k + i];

    Tensor<std::int32_t> acc({n, cout, ho, wo});
    const auto pad = static_cast<std::int64_t>(geom.pad);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < cout; ++o) {
            const std::size_t g = o / opg;
            const std::int32_t base = bias[o] - static_cast<std::int32_t>(zp_in) * wsum[o];
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    std::int32_t s = 0;
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        const std::size_t c = g * cpg + ci;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::int64_t iy = static_cast<std::int64_t>(oy * geom.stride + ky) - pad;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::int64_t ix = static_cast<std::int64_t>(ox * geom.stride + kx) - pad;
                                const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(h) &&
                                                    ix < static_cast<std::int64_t>(wd);
                                const std::int32_t xv =
                                    inside ? x.at(b, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) : zp_in;
                                s += xv * static_cast<std::int32_t>(w.at(o, ci, ky, kx));
                            }
                        }
                    }
                    acc.at(b, o, oy, ox) = base + s;
                }
        }
    return acc;
}

// Float-multiplier requantization to the output grid; ReLU clamps at the
// output zero point.
inline Tensor<std::int8_t> requantize(const Tensor<std::int32_t>& acc, double s_in, const std::vector<float>& s_w,
                                      const QuantParams& out, bool relu) {
    const auto n = acc.dim(0), c = acc.dim(1), hw = acc.dim(2) * acc.dim(3);
    Tensor<std::int8_t> y(acc.shape());
    const double lo = relu ? static_cast<double>(out.zero_point) : -128.0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < c; ++o) {
            const double m = s_in * static_cast<double>(s_w[o]) / static_cast<double>(out.scale);
            const std::size_t base = (b * c + o) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double q = std::nearbyint(static_cast<double>(acc[base + i]) * m) + out.zero_point;
                y[base + i] = static_cast<std::int8_t>(std::clamp(q, lo, 127.0));
            }
        }
    return y;
}

inline Tensor<std::int8_t> requantize_codes(const Tensor<std::int8_t>& x, const QuantParams& from, const QuantParams& to) {
    if (from == to) return x;
    Tensor<std::int8_t> y(x.shape());
    const double m = static_cast<double>(from.scale) / static_cast<double>(to.scale);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double q = std::nearbyint(static_cast<double>(x[i] - from.zero_point) * m) + to.zero_point;
        y[i] = static_cast<std::int8_t>(std::clamp(q, -128.0, 127.0));
    }
    return y;
}

// Float crop in, float logits out; everything in between runs on int8 codes.
inline Tensor<float> quantized_forward(const QuantizedModel& q, const Tensor<float>& rgb_crop) {
    const auto s = q.config.input_size;
    if (rgb_crop.rank() != 4 || rgb_crop.dim(1) != 3 || rgb_crop.dim(2) != s || rgb_crop.dim(3) != s) {
        throw ShapeError("quantized_forward: expected Nx3x" + std::to_string(s) + "x" + std::to_string(s) + ", got " +
                         shape_str(rgb_crop.shape()));
    }
    std::vector<std::optional<Tensor<std::int8_t>>> edges(q.edges.size());
    edges[0] = quantize_tensor(rgb_crop, q.edges[0]);
    auto get = [&](std::size_t e) -> const Tensor<std::int8_t>& {
        if (!edges.at(e)) throw StateError("quantized graph: edge '" + q.edge_names.at(e) + "' read before write");
        return *edges[e];
    };
    for (const auto& op : q.ops) {
        if (const auto* c = std::get_if<QConv>(&op)) {
            const auto& in = q.edges[c->input];
            const auto acc = quantized_conv_accumulators(get(c->input), in.zero_point, c->weight, c->bias, c->geom);
            edges[c->output] = requantize(acc, in.scale, c->weight_scales, q.edges[c->output], c->relu);
        } else if (const auto* r = std::get_if<QResize>(&op)) {
            edges[r->output] = resize_nearest_x2(get(r->input));
        } else {
            const auto& cc = std::get<QConcat>(op);
            const auto& out = q.edges[cc.output];
            edges[cc.output] = concat_channels(requantize_codes(get(cc.first), q.edges[cc.first], out),
                                               requantize_codes(get(cc.second), q.edges[cc.second], out));
        }
    }
    return dequantize_tensor(get(q.output_edge), q.edges[q.output_edge]);
}

inline std::uint64_t count_macs_quantized(const QuantizedModel& q, const Shape& input_shape) {
    require_rank(input_shape, 4, "count_macs_quantized");
    std::vector<std::pair<std::size_t, std::size_t>> hw(q.edges.size());
    hw[0] = {input_shape[2], input_shape[3]};
    std::uint64_t total = 0;
    for (const auto& op : q.ops) {
        if (const auto* c = std::get_if<QConv>(&op)) {
            const auto k = c->weight.dim(2);
            const auto [h, w] = hw[c->input];
            const auto ho = conv_out_size(h, k, c->geom.stride, c->geom.pad);
            const auto wo = conv_out_size(w, k, c->geom.stride, c->geom.pad);
            total += static_cast<std::uint64_t>(k * k * c->weight.dim(1) * c->weight.dim(0)) * ho * wo;
            hw[c->output] = {ho, wo};
        } else if (const auto* r = std::get_if<QResize>(&op)) {
            hw[r->output] = {2 * hw[r->input].first, 2 * hw[r->input].second};
        } else {
            const auto& cc = std::get<QConcat>(op);
            hw[cc.output] = hw[cc.first];
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// "PQNT" files
//   magic | u8 version | config block | u32 edge count | per edge: f32 scale, i8 zp
//   | per conv: u32 Cout, Cout x f32 weight scales | per conv: int8 weights, int32 biases
// The op structure is rebuilt from the config block.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t quantized_format_version = 1;

inline Bytes serialize_quantized(const QuantizedModel& q) {
    ByteWriter w;
    w.raw("PQNT");
    w.u8(quantized_format_version);
    write_config_block(w, q.config);
    w.u32(static_cast<std::uint32_t>(q.edges.size()));
    for (const auto& e : q.edges) {
        w.f32(e.scale);
        w.i8(e.zero_point);
    }
    for (const auto& op : q.ops)
        if (const auto* c = std::get_if<QConv>(&op)) {
            w.u32(static_cast<std::uint32_t>(c->weight_scales.size()));
            for (auto s : c->weight_scales) w.f32(s);
        }
    for (const auto& op : q.ops)
        if (const auto* c = std::get_if<QConv>(&op)) {
            for (auto v : c->weight.data()) w.i8(v);
            for (auto v : c->bias.data()) w.i32(v);
        }
    return w.take();
}

inline QuantizedModel deserialize_quantized(const Bytes& bytes, const std::string& source) {
    ByteReader r(bytes, source);
    r.expect_magic("PQNT");
    const auto version = r.u8();
    if (version != quantized_format_version)
        throw FormatError(source + ": unsupported quantized-model version " + std::to_string(version), 4);
    QuantizedModel q;
    q.config = read_config_block(r);
    const auto structure = Model<float>(q.config).fold();
    q.edge_names = structure.edge_names;
    q.output_edge = structure.output_edge;

    const auto edges_at = r.pos();
    const auto edge_count = r.u32();
    if (edge_count != structure.edge_count()) {
        throw FormatError(source + ": " + std::to_string(edge_count) + " edges, config implies " +
                              std::to_string(structure.edge_count()),
                          edges_at);
    }
    q.edges.resize(edge_count);
    for (auto& e : q.edges) {
        const auto at = r.pos();
        e.scale = r.f32();
        e.zero_point = r.i8();
        if (!(std::isfinite(e.scale) && e.scale > 0)) throw FormatError(source + ": invalid edge scale", at);
    }
    for (const auto& op : structure.ops) {
        if (const auto* c = std::get_if<FoldedConv>(&op)) {
            QConv qc;
            qc.input = c->input;
            qc.output = c->output;
            qc.geom = c->geom;
            qc.relu = c->relu;
            const auto at = r.pos();
            const auto cout = r.u32();
            if (cout != c->weight.dim(0))
                throw FormatError(source + ": layer '" + q.edge_names[c->output] + "' channel count mismatch", at);
            qc.weight_scales.resize(cout);
            for (auto& s : qc.weight_scales) s = r.f32();
            qc.weight = Tensor<std::int8_t>(c->weight.shape());
            qc.bias = Tensor<std::int32_t>({cout});
            q.ops.emplace_back(std::move(qc));
        } else if (const auto* rs = std::get_if<FoldedResize>(&op)) {
            q.ops.emplace_back(QResize{rs->input, rs->output});
        } else {
            const auto& cc = std::get<FoldedConcat>(op);
            q.ops.emplace_back(QConcat{cc.first, cc.second, cc.output});
        }
    }
    for (auto& op : q.ops)
        if (auto* c = std::get_if<QConv>(&op)) {
            for (auto& v : c->weight.data()) v = r.i8();
            for (auto& v : c->bias.data()) v = r.i32();
        }
    if (r.remaining() != 0) throw FormatError(source + ": trailing bytes after quantized model", r.pos());
    return q;
}

inline void save_quantized(const QuantizedModel& q, const std::filesystem::path& path) {
    write_file(path, serialize_quantized(q));
}

inline QuantizedModel load_quantized(const std::filesystem::path& path) {
    return deserialize_quantized(read_file(path), path.string());
}

// Element totals behind the file-size law.
struct QuantizedPayload {
    std::uint64_t int8_elements = 0;
    std::uint64_t int32_elements = 0;
    std::uint64_t weight_scales = 0;
};

inline QuantizedPayload quantized_payload(const QuantizedModel& q) {
    QuantizedPayload p;
    for (const auto& op : q.ops)
        if (const auto* c = std::get_if<QConv>(&op)) {
            p.int8_elements += c->weight.numel();
            p.int32_elements += c->bias.numel();
            p.weight_scales += c->weight_scales.size();
        }
    return p;
}

} // namespace picosam

#endif
