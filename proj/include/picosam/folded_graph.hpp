#ifndef PICOSAM_FOLDED_GRAPH_HPP
#define PICOSAM_FOLDED_GRAPH_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "model_config.hpp"
#include "ops.hpp"

namespace picosam {

// Inference-only float graph with every norm folded into its convolution.
// Ops run in order over numbered activation edges; edge 0 is the input.
struct FoldedConv {
    std::size_t input = 0;
    std::size_t output = 0;
    Tensor<float> weight; // [Cout, Cin/groups, K, K]
    Tensor<float> bias;   // [Cout]
    ConvGeometry geom;
    bool relu = false;
};

struct FoldedResize {
    std::size_t input = 0;
    std::size_t output = 0;
};

struct FoldedConcat {
    std::size_t first = 0;
    std::size_t second = 0;
    std::size_t output = 0;
};

using FoldedOp = std::variant<FoldedConv, FoldedResize, FoldedConcat>;

struct FoldedGraph {
    ModelConfig config;
    std::vector<std::string> edge_names{"input"};
    std::size_t output_edge = 0;
    std::vector<FoldedOp> ops;

    std::size_t edge_count() const { return edge_names.size(); }

    std::size_t add_edge(std::string name) {
        edge_names.push_back(std::move(name));
        return edge_names.size() - 1;
    }
};

struct NoObserver {
    void operator()(std::size_t, const Tensor<float>&) const {}
};

// Runs the graph; `observe(edge, tensor)` sees every edge value once.
template <class Observer = NoObserver>
Tensor<float> run(const FoldedGraph& g, const Tensor<float>& input, Observer&& observe = {}) {
    std::vector<std::optional<Tensor<float>>> edges(g.edge_count());
    edges[0] = input;
    observe(std::size_t{0}, input);
    auto get = [&](std::size_t e) -> const Tensor<float>& {
        if (!edges.at(e)) throw StateError("folded graph: edge '" + g.edge_names.at(e) + "' read before write");
        return *edges[e];
    };
    for (const auto& op : g.ops) {
        std::size_t out = 0;
        if (const auto* c = std::get_if<FoldedConv>(&op)) {
            auto y = conv2d(get(c->input), c->weight, &c->bias, c->geom);
            if (c->relu)
                for (auto& v : y.data()) v = v > 0.0f ? v : 0.0f;
            out = c->output;
            edges[out] = std::move(y);
        } else if (const auto* r = std::get_if<FoldedResize>(&op)) {
            out = r->output;
            edges[out] = resize_nearest_x2(get(r->input));
        } else {
            const auto& cc = std::get<FoldedConcat>(op);
            out = cc.output;
            edges[out] = concat_channels(get(cc.first), get(cc.second));
        }
        observe(out, *edges[out]);
    }
    return get(g.output_edge);
}

inline std::uint64_t count_macs(const FoldedGraph& g, const Shape& input_shape) {
    require_rank(input_shape, 4, "count_macs");
    std::vector<std::pair<std::size_t, std::size_t>> hw(g.edge_count());
    hw[0] = {input_shape[2], input_shape[3]};
    std::uint64_t total = 0;
    for (const auto& op : g.ops) {
        if (const auto* c = std::get_if<FoldedConv>(&op)) {
            const auto k = c->weight.dim(2);
            const auto [h, w] = hw[c->input];
            const auto ho = conv_out_size(h, k, c->geom.stride, c->geom.pad);
            const auto wo = conv_out_size(w, k, c->geom.stride, c->geom.pad);
            total += static_cast<std::uint64_t>(k * k * c->weight.dim(1) * c->weight.dim(0)) * ho * wo;
            hw[c->output] = {ho, wo};
        } else if (const auto* r = std::get_if<FoldedResize>(&op)) {
            hw[r->output] = {2 * hw[r->input].first, 2 * hw[r->input].second};
        } else {
            const auto& cc = std::get<FoldedConcat>(op);
            hw[cc.output] = hw[cc.first];
        }
    }
    return total;
}

} // namespace picosam

#endif
