#ifndef PICOSAM_NN_HPP
#define PICOSAM_NN_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "ops.hpp"

namespace picosam {

enum class ParamRole : std::uint8_t { conv_weight, bias, norm_scale, norm_shift };

template <std::floating_point T>
struct Param {
    std::string name;
    ParamRole role = ParamRole::bias;
    std::size_t fan_in = 0; // conv weights only
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, ParamRole r, Shape shape, std::size_t fan = 0)
        : name(std::move(n)), role(r), fan_in(fan), value(shape), grad(shape) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <std::floating_point T>
using ParamList = std::vector<Param<T>*>;

enum class Activation : std::uint8_t { relu, none };

enum class LayerKind : std::uint8_t {
    conv2d,
    depthwise_separable,
    downsample,
    upsample,
    concat_skip,
    norm,
    activation,
    sigmoid_head
};

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::depthwise_separable: return "depthwise_separable";
    case LayerKind::downsample: return "downsample";
    case LayerKind::upsample: return "upsample";
    case LayerKind::concat_skip: return "concat_skip";
    case LayerKind::norm: return "norm";
    case LayerKind::activation: return "activation";
    case LayerKind::sigmoid_head: return "sigmoid_head";
    }
    return "unknown";
}

// Declarative description of one layer. `stride` is implied by the kind for
// downsample (2) and ignored for kinds without a convolution.
struct LayerSpec {
    LayerKind kind = LayerKind::conv2d;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    Activation activation = Activation::relu;
    bool norm = true;
    bool bias = true;

    void validate(const std::string& name) const {
        auto fail = [&](const std::string& why) {
            throw ConfigError("layer '" + name + "' (" + layer_kind_name(kind) + "): " + why);
        };
        switch (kind) {
        case LayerKind::conv2d:
        case LayerKind::depthwise_separable:
        case LayerKind::downsample:
            if (kernel < 1) fail("kernel must be >= 1");
            if (kernel % 2 == 0) fail("kernel must be odd for same padding");
            if (stride < 1) fail("stride must be >= 1");
            [[fallthrough]];
        case LayerKind::upsample:
            if (in_channels < 1 || out_channels < 1) fail("channel counts must be >= 1");
            break;
        case LayerKind::norm:
        case LayerKind::activation:
        case LayerKind::sigmoid_head:
            if (in_channels != out_channels) fail("must preserve channel count");
            break;
        case LayerKind::concat_skip:
            break;
        }
        if (kind == LayerKind::downsample && stride != 2) fail("downsample stride must be 2");
    }
};

struct MacCount {
    std::uint64_t macs = 0;
    std::size_t out_h = 0;
    std::size_t out_w = 0;
};

// ---------------------------------------------------------------------------

template <std::floating_point T>
class Conv2d {
public:
    struct Cache {
        std::optional<Tensor<T>> input;
    };

    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
           std::size_t stride, std::size_t groups, bool bias = true)
        : name_(name), in_(in), out_(out), geom_{stride, kernel / 2, groups},
          weight_(name + ".weight", ParamRole::conv_weight,
                  {out, per_group(name, in, out, groups), kernel, kernel},
                  (in / groups) * kernel * kernel) {
        if (bias) bias_ = Param<T>(name + ".bias", ParamRole::bias, {out});
    }

    Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
        if (x.rank() != 4 || x.dim(1) != in_) {
            throw ShapeError("layer '" + name_ + "': expected " + std::to_string(in_) +
                             " input channels, got input " + shape_str(x.shape()));
        }
        if (cache) cache->input = x;
        return conv2d(x, weight_.value, bias_ ? &bias_->value : nullptr, geom_);
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Cache& cache) {
        if (!cache.input) throw StateError("layer '" + name_ + "': backward without forward cache");
        conv2d_backward_weight(grad_out, *cache.input, weight_.grad, geom_);
        if (bias_) conv2d_backward_bias(grad_out, bias_->grad);
        return conv2d_backward_input(grad_out, weight_.value, cache.input->shape(), geom_);
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight_);
        if (bias_) out.push_back(&*bias_);
    }

    MacCount macs(std::size_t h, std::size_t w) const {
        const auto k = weight_.value.dim(2);
        MacCount m;
        m.out_h = conv_out_size(h, k, geom_.stride, geom_.pad);
        m.out_w = conv_out_size(w, k, geom_.stride, geom_.pad);
        m.macs = static_cast<std::uint64_t>(k * k * (in_ / geom_.groups) * out_) * m.out_h * m.out_w;
        return m;
    }

    const std::string& name() const { return name_; }
    std::size_t in_channels() const { return in_; }
    std::size_t out_channels() const { return out_; }
    const ConvGeometry& geometry() const { return geom_; }
    Param<T>& weight() { return weight_; }
    const Param<T>& weight() const { return weight_; }
    Param<T>* bias() { return bias_ ? &*bias_ : nullptr; }
    const Param<T>* bias() const { return bias_ ? &*bias_ : nullptr; }

private:
    static std::size_t per_group(const std::string& name, std::size_t in, std::size_t out,
                                 std::size_t groups) {
        if (in == 0 || out == 0 || groups == 0 || in % groups || out % groups) {
            throw ConfigError("layer '" + name + "': channels " + std::to_string(in) + "->" +
                              std::to_string(out) + " not divisible by groups " + std::to_string(groups));
        }
        return in / groups;
    }

    std::string name_;
    std::size_t in_ = 0, out_ = 0;
    ConvGeometry geom_;
    Param<T> weight_;
    std::optional<Param<T>> bias_;
};

// Per-channel affine normalization y = scale * x + shift. This is the
// inference form of a frozen-statistics norm, so folding it into the
// preceding convolution is exact.
template <std::floating_point T>
class ChannelNorm {
public:
    struct Cache {
        std::optional<Tensor<T>> input;
    };

    ChannelNorm() = default;
    ChannelNorm(const std::string& name, std::size_t channels)
        : name_(name), scale_(name + ".scale", ParamRole::norm_scale, {channels}),
          shift_(name + ".shift", ParamRole::norm_shift, {channels}) {
        scale_.value.fill(T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
        const auto c = scale_.value.numel();
        if (x.rank() != 4 || x.dim(1) != c) {
            throw ShapeError("layer '" + name_ + "': expected " + std::to_string(c) +
                             " channels, got input " + shape_str(x.shape()));
        }
        if (cache) cache->input = x;
        Tensor<T> y(x.shape());
        const auto plane = x.dim(2) * x.dim(3);
        for (std::size_t b = 0; b < x.dim(0); ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T s = scale_.value[ch], t = shift_.value[ch];
                const T* src = x.ptr() + (b * c + ch) * plane;
                T* dst = y.ptr() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) dst[i] = s * src[i] + t;
            }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g, const Cache& cache) {
        if (!cache.input) throw StateError("layer '" + name_ + "': backward without forward cache");
        const auto& x = *cache.input;
        const auto c = scale_.value.numel();
        const auto plane = x.dim(2) * x.dim(3);
        Tensor<T> gin(x.shape());
        for (std::size_t b = 0; b < x.dim(0); ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T s = scale_.value[ch];
                const T* gp = g.ptr() + (b * c + ch) * plane;
                const T* xp = x.ptr() + (b * c + ch) * plane;
                T* dst = gin.ptr() + (b * c + ch) * plane;
                T gs = 0, gt = 0;
                for (std::size_t i = 0; i < plane; ++i) {
                    gs += gp[i] * xp[i];
                    gt += gp[i];
                    dst[i] = s * gp[i];
                }
                scale_.grad[ch] += gs;
                shift_.grad[ch] += gt;
            }
        return gin;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&scale_);
        out.push_back(&shift_);
    }

    const Param<T>& scale() const { return scale_; }
    const Param<T>& shift() const { return shift_; }
    Param<T>& scale() { return scale_; }
    Param<T>& shift() { return shift_; }

private:
    std::string name_;
    Param<T> scale_, shift_;
};

// ReLU with subgradient 0 at exactly 0.
template <std::floating_point T>
struct ReluCache {
    std::optional<Tensor<T>> output;
};

template <std::floating_point T>
Tensor<T> relu_forward(const Tensor<T>& x, ReluCache<T>* cache) {
    auto y = relu(x);
    if (cache) cache->output = y;
    return y;
}

template <std::floating_point T>
Tensor<T> relu_backward(const Tensor<T>& g, const ReluCache<T>& cache) {
    if (!cache.output) throw StateError("relu: backward without forward cache");
    const auto& y = *cache.output;
    require_same_shape(g, y, "relu_backward");
    Tensor<T> gin(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) gin[i] = y[i] > T(0) ? g[i] : T(0);
    return gin;
}

// conv -> [norm] -> [relu]
template <std::floating_point T>
class ConvUnit {
public:
    struct Cache {
        typename Conv2d<T>::Cache conv;
        typename ChannelNorm<T>::Cache norm;
        ReluCache<T> act;
    };

    ConvUnit() = default;
    ConvUnit(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
             std::size_t stride, std::size_t groups, bool norm, Activation act, bool bias = true)
        : conv_(name + ".conv", in, out, kernel, stride, groups, bias), act_(act) {
        if (norm) norm_ = ChannelNorm<T>(name + ".norm", out);
    }

    Tensor<T> forward(const Tensor<T>& x, Cache* c) const {
        auto y = conv_.forward(x, c ? &c->conv : nullptr);
        if (norm_) y = norm_->forward(y, c ? &c->norm : nullptr);
        if (act_ == Activation::relu) y = relu_forward(y, c ? &c->act : nullptr);
        return y;
    }

    Tensor<T> backward(Tensor<T> g, const Cache& c) {
        if (act_ == Activation::relu) g = relu_backward(g, c.act);
        if (norm_) g = norm_->backward(g, c.norm);
        return conv_.backward(g, c.conv);
    }

    void collect(ParamList<T>& out) {
        conv_.collect(out);
        if (norm_) norm_->collect(out);
    }

    MacCount macs(std::size_t h, std::size_t w) const { return conv_.macs(h, w); }

    const Conv2d<T>& conv() const { return conv_; }
    const ChannelNorm<T>* norm() const { return norm_ ? &*norm_ : nullptr; }
    Activation activation() const { return act_; }

private:
    Conv2d<T> conv_;
    std::optional<ChannelNorm<T>> norm_;
    Activation act_ = Activation::relu;
};

// Depthwise KxK conv -> norm -> act -> pointwise 1x1 conv -> norm -> act.
// With stride 2 this is the downsampling block.
template <std::floating_point T>
class DepthwiseSeparable {
public:
    struct Cache {
        typename ConvUnit<T>::Cache depthwise, pointwise;
    };

    DepthwiseSeparable() = default;
    DepthwiseSeparable(const std::string& name, const LayerSpec& spec) : spec_(spec) {
        spec.validate(name);
        if (spec.kind != LayerKind::depthwise_separable && spec.kind != LayerKind::downsample) {
            throw ConfigError("layer '" + name + "': not a depthwise-separable spec");
        }
        depthwise_ = ConvUnit<T>(name + ".dw", spec.in_channels, spec.in_channels, spec.kernel,
                                 spec.stride, spec.in_channels, spec.norm, spec.activation, spec.bias);
        pointwise_ = ConvUnit<T>(name + ".pw", spec.in_channels, spec.out_channels, 1, 1, 1,
                                 spec.norm, spec.activation, spec.bias);
    }

    Tensor<T> forward(const Tensor<T>& x, Cache* c) const {
        auto y = depthwise_.forward(x, c ? &c->depthwise : nullptr);
        return pointwise_.forward(y, c ? &c->pointwise : nullptr);
    }

    Tensor<T> backward(const Tensor<T>& g, const Cache& c) {
        return depthwise_.backward(pointwise_.backward(g, c.pointwise), c.depthwise);
    }

    void collect(ParamList<T>& out) {
        depthwise_.collect(out);
        pointwise_.collect(out);
    }

    MacCount macs(std::size_t h, std::size_t w) const {
        auto a = depthwise_.macs(h, w);
        auto b = pointwise_.macs(a.out_h, a.out_w);
        return {a.macs + b.macs, b.out_h, b.out_w};
    }

    const LayerSpec& spec() const { return spec_; }
    const ConvUnit<T>& depthwise() const { return depthwise_; }
    const ConvUnit<T>& pointwise() const { return pointwise_; }

private:
    LayerSpec spec_;
    ConvUnit<T> depthwise_, pointwise_;
};

// Nearest x2 resize followed by a pointwise conv.
template <std::floating_point T>
class Upsample {
public:
    struct Cache {
        typename Conv2d<T>::Cache conv;
    };

    Upsample() = default;
    Upsample(const std::string& name, const LayerSpec& spec)
        : conv_(name + ".pw", spec.in_channels, spec.out_channels, 1, 1, 1, spec.bias) {
        spec.validate(name);
    }

    Tensor<T> forward(const Tensor<T>& x, Cache* c) const {
        require_rank(x.shape(), 4, "upsample");
        return conv_.forward(resize_nearest_x2(x), c ? &c->conv : nullptr);
    }

    Tensor<T> backward(const Tensor<T>& g, const Cache& c) {
        return resize_nearest_x2_backward(conv_.backward(g, c.conv));
    }

    void collect(ParamList<T>& out) { conv_.collect(out); }

    MacCount macs(std::size_t h, std::size_t w) const { return conv_.macs(2 * h, 2 * w); }

    const Conv2d<T>& conv() const { return conv_; }

private:
    Conv2d<T> conv_;
};

// Logits -> probabilities. Never part of the model graph; used by callers
// that want a probability map.
template <std::floating_point T>
class SigmoidHead {
public:
    struct Cache {
        std::optional<Tensor<T>> prob;
    };

    Tensor<T> forward(const Tensor<T>& x, Cache* c) const {
        auto p = sigmoid(x);
        if (c) c->prob = p;
        return p;
    }

    Tensor<T> backward(const Tensor<T>& g, const Cache& c) const {
        if (!c.prob) throw StateError("sigmoid_head: backward without forward cache");
        Tensor<T> gin(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gin[i] = g[i] * (*c.prob)[i] * (T(1) - (*c.prob)[i]);
        return gin;
    }
};

// ---------------------------------------------------------------------------

template <std::floating_point T>
std::size_t count_params(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto* p : params) n += p->value.numel();
    return n;
}

// Weights + biases + norm affine parameters of any module with collect().
template <template <class> class Module, std::floating_point T>
std::size_t count_params(Module<T>& m) {
    ParamList<T> ps;
    m.collect(ps);
    return count_params(ps);
}

template <std::floating_point T>
void zero_grads(const ParamList<T>& params) {
    for (auto* p : params) p->zero_grad();
}

template <std::floating_point T>
void check_unique_names(const ParamList<T>& params) {
    std::unordered_set<std::string> seen;
    for (const auto* p : params) {
        if (!seen.insert(p->name).second) throw ConfigError("duplicate parameter name '" + p->name + "'");
    }
}

} // namespace picosam

#endif
