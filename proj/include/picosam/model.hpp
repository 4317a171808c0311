#ifndef PICOSAM_MODEL_HPP
#define PICOSAM_MODEL_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "folded_graph.hpp"
#include "model_config.hpp"
#include "nn.hpp"

namespace picosam {

// Depthwise-separable U-Net producing single-channel mask logits.
//
//   stem 3x3 conv -> [blocks, downsample] x (S-1) -> bottleneck blocks
//   -> [upsample, concat skip, blocks] x (S-1) -> head block -> 1x1 logits
//
// The input is a plain RGB crop in [0,1]. There is no prompt channel: the
// prompt is conveyed by centring the crop on it.
template <std::floating_point T>
class Model {
public:
    struct EncoderCache {
        std::vector<typename DepthwiseSeparable<T>::Cache> blocks;
        typename DepthwiseSeparable<T>::Cache down;
    };
    struct DecoderCache {
        typename Upsample<T>::Cache up;
        std::vector<typename DepthwiseSeparable<T>::Cache> blocks;
    };
    struct Cache {
        bool valid = false;
        typename ConvUnit<T>::Cache stem;
        std::vector<EncoderCache> encoder;
        std::vector<typename DepthwiseSeparable<T>::Cache> bottleneck;
        std::vector<DecoderCache> decoder;
        typename DepthwiseSeparable<T>::Cache head_block;
        typename Conv2d<T>::Cache head;
    };

    explicit Model(ModelConfig config) : config_(std::move(config)) {
        config_.validate();
        build();
    }

    const ModelConfig& config() const { return config_; }

    Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const {
        check_input(x);
        const auto& ch = config_.stage_channels;
        const std::size_t stages = ch.size();
        if (cache) {
            *cache = Cache{};
            cache->encoder.resize(stages - 1);
            cache->decoder.resize(stages - 1);
            cache->bottleneck.resize(bottleneck_.size());
        }

        auto y = stem_.forward(x, cache ? &cache->stem : nullptr);
        std::vector<Tensor<T>> skips;
        for (std::size_t s = 0; s + 1 < stages; ++s) {
            const auto& stage = encoder_[s];
            if (cache) cache->encoder[s].blocks.resize(stage.blocks.size());
            for (std::size_t b = 0; b < stage.blocks.size(); ++b)
                y = stage.blocks[b].forward(y, cache ? &cache->encoder[s].blocks[b] : nullptr);
            skips.push_back(y);
            y = stage.down.forward(y, cache ? &cache->encoder[s].down : nullptr);
        }
        for (std::size_t b = 0; b < bottleneck_.size(); ++b)
            y = bottleneck_[b].forward(y, cache ? &cache->bottleneck[b] : nullptr);
        // decoder_[s] restores the resolution of encoder stage s
        for (std::size_t s = stages - 1; s-- > 0;) {
            const auto& stage = decoder_[s];
            y = stage.up.forward(y, cache ? &cache->decoder[s].up : nullptr);
            y = concat_channels(y, skips[s]);
            if (cache) cache->decoder[s].blocks.resize(stage.blocks.size());
            for (std::size_t b = 0; b < stage.blocks.size(); ++b)
                y = stage.blocks[b].forward(y, cache ? &cache->decoder[s].blocks[b] : nullptr);
        }
        y = head_block_.forward(y, cache ? &cache->head_block : nullptr);
        y = head_.forward(y, cache ? &cache->head : nullptr);
        if (cache) cache->valid = true;
        return y;
    }

    // Accumulates parameter gradients; returns dL/d(input).
    Tensor<T> backward(const Tensor<T>& grad_logits, const Cache& cache) {
        if (!cache.valid) throw StateError("model backward without a forward cache");
        const std::size_t stages = config_.stage_channels.size();
        auto g = head_.backward(grad_logits, cache.head);
        g = head_block_.backward(g, cache.head_block);
        std::vector<Tensor<T>> skip_grads(stages - 1);
        for (std::size_t s = 0; s + 1 < stages; ++s) {
            auto& stage = decoder_[s];
            for (std::size_t b = stage.blocks.size(); b-- > 0;) g = stage.blocks[b].backward(g, cache.decoder[s].blocks[b]);
            auto [g_up, g_skip] = split_channels(g, config_.stage_channels[s]);
            skip_grads[s] = std::move(g_skip);
            g = stage.up.backward(g_up, cache.decoder[s].up);
        }
        for (std::size_t b = bottleneck_.size(); b-- > 0;) g = bottleneck_[b].backward(g, cache.bottleneck[b]);
        for (std::size_t s = stages - 1; s-- > 0;) {
            auto& stage = encoder_[s];
            g = stage.down.backward(g, cache.encoder[s].down);
            const auto& gs = skip_grads[s];
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gs[i];
            for (std::size_t b = stage.blocks.size(); b-- > 0;) g = stage.blocks[b].backward(g, cache.encoder[s].blocks[b]);
        }
        return stem_.backward(g, cache.stem);
    }

    // Parameters in a fixed order; names are unique.
    ParamList<T> params() {
        ParamList<T> out;
        collect(out);
        return out;
    }

    void collect(ParamList<T>& out) {
        stem_.collect(out);
        for (auto& s : encoder_) {
            for (auto& b : s.blocks) b.collect(out);
            s.down.collect(out);
        }
        for (auto& b : bottleneck_) b.collect(out);
        for (std::size_t s = decoder_.size(); s-- > 0;) {
            decoder_[s].up.collect(out);
            for (auto& b : decoder_[s].blocks) b.collect(out);
        }
        head_block_.collect(out);
        head_.collect(out);
    }

    std::uint64_t count_macs(const Shape& input_shape) const {
        require_rank(input_shape, 4, "count_macs");
        std::size_t h = input_shape[2], w = input_shape[3];
        std::uint64_t total = 0;
        auto add = [&](const auto& layer) {
            const auto m = layer.macs(h, w);
            total += m.macs;
            h = m.out_h;
            w = m.out_w;
        };
        add(stem_);
        for (const auto& s : encoder_) {
            for (const auto& b : s.blocks) add(b);
            add(s.down);
        }
        for (const auto& b : bottleneck_) add(b);
        for (std::size_t s = decoder_.size(); s-- > 0;) {
            add(decoder_[s].up);
            for (const auto& b : decoder_[s].blocks) add(b);
        }
        add(head_block_);
        add(head_);
        return total;
    }

    // Layer listing in execution order, including the concat points.
    std::vector<std::pair<std::string, LayerSpec>> describe() const { return layout_; }

    // Inference graph with norms folded into the convolutions.
    FoldedGraph fold() const {
        FoldedGraph g;
        g.config = config_;
        std::size_t cur = 0;
        auto unit = [&](const ConvUnit<T>& u, const std::string& name) {
            FoldedConv fc;
            fc.input = cur;
            fc.output = g.add_edge(name);
            fc.geom = u.conv().geometry();
            fc.relu = u.activation() == Activation::relu;
            const auto& wt = u.conv().weight().value;
            const auto cout = wt.dim(0);
            const auto per = wt.numel() / cout;
            fc.weight = Tensor<float>(wt.shape());
            fc.bias = Tensor<float>({cout});
            const auto* nrm = u.norm();
            for (std::size_t o = 0; o < cout; ++o) {
                const T scale = nrm ? nrm->scale().value[o] : T(1);
                const T shift = nrm ? nrm->shift().value[o] : T(0);
                for (std::size_t i = 0; i < per; ++i) fc.weight[o * per + i] = static_cast<float>(scale * wt[o * per + i]);
                const T b = u.conv().bias() ? u.conv().bias()->value[o] : T(0);
                fc.bias[o] = static_cast<float>(scale * b + shift);
            }
            g.ops.emplace_back(std::move(fc));
            cur = g.edge_count() - 1;
        };
        auto ds = [&](const DepthwiseSeparable<T>& b, const std::string& name) {
            unit(b.depthwise(), name + ".dw");
            unit(b.pointwise(), name + ".pw");
        };
        auto plain = [&](const Conv2d<T>& c, const std::string& name) {
            FoldedConv fc;
            fc.input = cur;
            fc.output = g.add_edge(name);
            fc.geom = c.geometry();
            fc.weight = cast<float>(c.weight().value);
            fc.bias = c.bias() ? cast<float>(c.bias()->value) : Tensor<float>({c.out_channels()});
            g.ops.emplace_back(std::move(fc));
            cur = g.edge_count() - 1;
        };

        unit(stem_, "stem");
        std::vector<std::size_t> skip_edges;
        for (std::size_t s = 0; s < encoder_.size(); ++s) {
            for (std::size_t b = 0; b < encoder_[s].blocks.size(); ++b)
                ds(encoder_[s].blocks[b], "enc" + std::to_string(s) + ".block" + std::to_string(b));
            skip_edges.push_back(cur);
            ds(encoder_[s].down, "enc" + std::to_string(s) + ".down");
        }
        for (std::size_t b = 0; b < bottleneck_.size(); ++b) ds(bottleneck_[b], "bottleneck.block" + std::to_string(b));
        for (std::size_t s = decoder_.size(); s-- > 0;) {
            const std::string base = "dec" + std::to_string(s);
            FoldedResize r{cur, g.add_edge(base + ".resize")};
            g.ops.emplace_back(r);
            cur = r.output;
            plain(decoder_[s].up.conv(), base + ".up");
            FoldedConcat cc{cur, skip_edges[s], g.add_edge(base + ".concat")};
            g.ops.emplace_back(cc);
            cur = cc.output;
            for (std::size_t b = 0; b < decoder_[s].blocks.size(); ++b)
                ds(decoder_[s].blocks[b], base + ".block" + std::to_string(b));
        }
        ds(head_block_, "head.block");
        plain(head_, "head.out");
        g.output_edge = cur;
        return g;
    }

private:
    struct EncoderStage {
        std::vector<DepthwiseSeparable<T>> blocks;
        DepthwiseSeparable<T> down;
    };
    struct DecoderStage {
        Upsample<T> up;
        std::vector<DepthwiseSeparable<T>> blocks;
    };

    void check_input(const Tensor<T>& x) const {
        const auto s = config_.input_size;
        if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s) {
            throw ShapeError("model expects input Nx3x" + std::to_string(s) + "x" + std::to_string(s) +
                             ", got " + shape_str(x.shape()));
        }
    }

    LayerSpec ds_spec(LayerKind kind, std::size_t in, std::size_t out) const {
        LayerSpec s;
        s.kind = kind;
        s.in_channels = in;
        s.out_channels = out;
        s.kernel = config_.kernel;
        s.stride = kind == LayerKind::downsample ? 2 : 1;
        s.norm = config_.norm;
        return s;
    }

    DepthwiseSeparable<T> make_ds(const std::string& name, LayerKind kind, std::size_t in, std::size_t out) {
        auto spec = ds_spec(kind, in, out);
        layout_.emplace_back(name, spec);
        return DepthwiseSeparable<T>(name, spec);
    }

    void build() {
        const auto& ch = config_.stage_channels;
        const std::size_t stages = ch.size();
        const std::size_t blocks = config_.blocks_per_stage;

        LayerSpec stem_spec;
        stem_spec.kind = LayerKind::conv2d;
        stem_spec.in_channels = 3;
        stem_spec.out_channels = ch[0];
        stem_spec.kernel = config_.kernel;
        stem_spec.norm = config_.norm;
        stem_spec.validate("stem");
        layout_.emplace_back("stem", stem_spec);
        stem_ = ConvUnit<T>("stem", 3, ch[0], config_.kernel, 1, 1, config_.norm, Activation::relu);

        for (std::size_t s = 0; s + 1 < stages; ++s) {
            const std::string base = "enc" + std::to_string(s);
            EncoderStage st;
            for (std::size_t b = 0; b < blocks; ++b)
                st.blocks.push_back(make_ds(base + ".block" + std::to_string(b), LayerKind::depthwise_separable, ch[s], ch[s]));
            st.down = make_ds(base + ".down", LayerKind::downsample, ch[s], ch[s + 1]);
            encoder_.push_back(std::move(st));
        }
        for (std::size_t b = 0; b < blocks; ++b)
            bottleneck_.push_back(make_ds("bottleneck.block" + std::to_string(b), LayerKind::depthwise_separable,
                                          ch.back(), ch.back()));

        decoder_.resize(stages - 1);
        for (std::size_t s = stages - 1; s-- > 0;) {
            const std::string base = "dec" + std::to_string(s);
            LayerSpec up;
            up.kind = LayerKind::upsample;
            up.in_channels = ch[s + 1];
            up.out_channels = ch[s];
            up.activation = Activation::none;
            up.norm = false;
            layout_.emplace_back(base + ".up", up);
            decoder_[s].up = Upsample<T>(base + ".up", up);

            LayerSpec cat;
            cat.kind = LayerKind::concat_skip;
            cat.in_channels = ch[s];
            cat.out_channels = 2 * ch[s];
            layout_.emplace_back(base + ".concat", cat);

            for (std::size_t b = 0; b < blocks; ++b)
                decoder_[s].blocks.push_back(make_ds(base + ".block" + std::to_string(b), LayerKind::depthwise_separable,
                                                     b == 0 ? 2 * ch[s] : ch[s], ch[s]));
        }
        head_block_ = make_ds("head.block", LayerKind::depthwise_separable, ch[0], config_.head_channels);
        LayerSpec out;
        out.kind = LayerKind::conv2d;
        out.in_channels = config_.head_channels;
        out.out_channels = 1;
        out.kernel = 1;
        out.activation = Activation::none;
        out.norm = false;
        layout_.emplace_back("head.out", out);
        head_ = Conv2d<T>("head.out", config_.head_channels, 1, 1, 1, 1);

        check_unique_names(params());
    }

    ModelConfig config_;
    ConvUnit<T> stem_;
    std::vector<EncoderStage> encoder_;
    std::vector<DepthwiseSeparable<T>> bottleneck_;
    std::vector<DecoderStage> decoder_;
    DepthwiseSeparable<T> head_block_;
    Conv2d<T> head_;
    std::vector<std::pair<std::string, LayerSpec>> layout_;
};

template <std::floating_point T>
std::uint64_t count_macs(const Model<T>& m, const Shape& input_shape) {
    return m.count_macs(input_shape);
}

// Raw mask logits for one prompt-centred crop. Apply sigmoid and threshold
// at 0.5 for a binary mask.
template <std::floating_point T>
Tensor<T> predict_mask(const Model<T>& model, const Tensor<T>& rgb_crop) {
    const auto s = model.config().input_size;
    if (rgb_crop.rank() != 4 || rgb_crop.dim(0) != 1 || rgb_crop.dim(1) != 3 || rgb_crop.dim(2) != s ||
        rgb_crop.dim(3) != s) {
        throw ShapeError("predict_mask: expected crop 1x3x" + std::to_string(s) + "x" + std::to_string(s) +
                         ", got " + shape_str(rgb_crop.shape()));
    }
    for (auto v : rgb_crop.data()) {
        if (!(v >= T(0) && v <= T(1))) throw DomainError("predict_mask: crop values must lie in [0,1]");
    }
    return model.forward(rgb_crop);
}

} // namespace picosam

#endif
