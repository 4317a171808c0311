#ifndef PICOSAM_GRADCHECK_HPP
#define PICOSAM_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "loss.hpp"
#include "model.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace picosam {

struct GradCheckResult {
    std::string name;
    double error = 0;     // worst per-coordinate relative error
    double raw_error = 0; // the same without any resolution floor
    double tolerance = 0;
    std::size_t checked = 0; // coordinates compared
    std::size_t nonzero = 0; // coordinates whose analytic gradient is nonzero
    std::size_t kinks = 0;   // coordinates where the step straddled a ReLU corner
    std::size_t redraws = 0; // random cases discarded because of kinks
    std::size_t worst_tensor = 0, worst_element = 0;
    double worst_analytic = 0, worst_numeric = 0;

    bool passed() const { return std::isfinite(error) && error < tolerance; }
};

inline constexpr double gradcheck_step = 1e-5;
inline constexpr double linear_tolerance = 1e-6;
inline constexpr double nonlinear_tolerance = 1e-4;

// |a - n| / max(1e-12, |a| + |n|) for one coordinate. `floor` discounts an
// absolute disagreement the finite difference cannot resolve.
inline double relative_error(double analytic, double numeric, double floor = 0.0) {
    return std::max(0.0, std::abs(analytic - numeric) - floor) /
           std::max(1e-12, std::abs(analytic) + std::abs(numeric));
}

// Central-difference resolution for an objective of magnitude |f|: 16 ulps
// of f spread over the 2*step baseline.
inline double difference_floor(double f) {
    return 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f)) / (2.0 * gradcheck_step);
}

inline void fill_uniform(Tensor<double>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
}

// Central differences of `objective` with respect to every tensor in
// `vars` (at most `max_coords` sampled coordinates each), compared against
// `analytic()` which returns gradients aligned with `vars`. A coordinate
// whose one-sided differences disagree sits on a non-differentiable corner
// and is counted as a kink instead of being compared.
inline GradCheckResult compare_gradients(const std::string& name, const std::vector<Tensor<double>*>& vars,
                                         const std::function<double()>& objective,
                                         const std::function<std::vector<Tensor<double>>()>& analytic, Rng& rng,
                                         double tolerance, std::size_t max_coords = 64, bool resolution_floor = false) {
    const auto grads = analytic();
    const double base = objective();
    const double floor = resolution_floor ? difference_floor(base) : 0.0;
    GradCheckResult r;
    r.name = name;
    r.tolerance = tolerance;
    for (std::size_t v = 0; v < vars.size(); ++v) {
        auto& t = *vars[v];
        std::vector<std::size_t> idx;
        if (t.numel() <= max_coords) {
            for (std::size_t i = 0; i < t.numel(); ++i) idx.push_back(i);
        } else {
            for (std::size_t i = 0; i < max_coords; ++i)
                idx.push_back(static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(t.numel()) - 1)));
        }
        for (auto i : idx) {
            const double saved = t[i];
            t[i] = saved + gradcheck_step;
            const double up = objective();
            t[i] = saved - gradcheck_step;
            const double down = objective();
            t[i] = saved;
            const double numeric = (up - down) / (2 * gradcheck_step);
            const double fwd = (up - base) / gradcheck_step, bwd = (base - down) / gradcheck_step;
            if (std::abs(fwd - bwd) > 1e-3 * std::max(1e-6, std::abs(fwd) + std::abs(bwd))) {
                ++r.kinks;
                continue;
            }
            if (!std::isfinite(numeric) || !std::isfinite(grads[v][i])) {
                throw NumericError(name + ": non-finite gradient at tensor " + std::to_string(v) + " element " +
                                   std::to_string(i));
            }
            r.nonzero += grads[v][i] != 0.0;
            r.raw_error = std::max(r.raw_error, relative_error(grads[v][i], numeric));
            const double e = relative_error(grads[v][i], numeric, floor);
            if (e > r.error) {
                r.error = e;
                r.worst_tensor = v;
                r.worst_element = i;
                r.worst_analytic = grads[v][i];
                r.worst_numeric = numeric;
            }
        }
        r.checked += idx.size();
    }
    return r;
}

namespace detail {

// Repeats a randomized check until a draw has no kinks (at most 8 draws).
template <class Attempt>
GradCheckResult redraw_on_kink(Attempt attempt) {
    GradCheckResult r;
    for (std::size_t i = 0; i < 8; ++i) {
        r = attempt();
        r.redraws = i;
        if (r.kinks == 0) break;
    }
    return r;
}

inline double project(const Tensor<double>& y, const Tensor<double>& r) {
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r[i];
    return s;
}

// He-scaled weights, norm scales near 1, small offsets, so that a useful
// share of the ReLUs is active and gradients are not trivially zero.
inline void randomize(const ParamList<double>& ps, Rng& rng) {
    for (auto* p : ps) {
        switch (p->role) {
        case ParamRole::conv_weight: {
            const double b = std::sqrt(6.0 / static_cast<double>(p->fan_in));
            fill_uniform(p->value, rng, -b, b);
            break;
        }
        case ParamRole::norm_scale: fill_uniform(p->value, rng, 0.5, 1.5); break;
        case ParamRole::bias:
        case ParamRole::norm_shift: fill_uniform(p->value, rng, -0.1, 0.1); break;
        }
    }
}

// Checks input and parameter gradients of a module with forward/backward/collect
// through the scalar objective sum(r * module(x)).
template <class M>
GradCheckResult check_module_once(const std::string& name, M& m, const Shape& input_shape, Rng& rng, double tolerance) {
    ParamList<double> ps;
    if constexpr (requires { m.collect(ps); }) m.collect(ps);
    randomize(ps, rng);
    Tensor<double> x(input_shape);
    fill_uniform(x, rng, -1.0, 1.0);
    Tensor<double> proj(m.forward(x, nullptr).shape());
    fill_uniform(proj, rng, -1.0, 1.0);

    std::vector<Tensor<double>*> vars{&x};
    for (auto* p : ps) vars.push_back(&p->value);
    auto objective = [&] { return project(m.forward(x, nullptr), proj); };
    auto analytic = [&] {
        typename M::Cache cache;
        m.forward(x, &cache);
        zero_grads(ps);
        std::vector<Tensor<double>> g{m.backward(proj, cache)};
        for (auto* p : ps) g.push_back(p->grad);
        return g;
    };
    return compare_gradients(name, vars, objective, analytic, rng, tolerance);
}

template <class M>
GradCheckResult check_module(const std::string& name, M& m, const Shape& input_shape, Rng& rng, double tolerance) {
    return redraw_on_kink([&] { return check_module_once(name, m, input_shape, rng, tolerance); });
}

// Checks a parameter-free map given its forward and vector-Jacobian product.
inline GradCheckResult check_map(const std::string& name, std::vector<Tensor<double>> inputs,
                                 const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                 const std::function<std::vector<Tensor<double>>(const Tensor<double>&)>& vjp, Rng& rng,
                                 double tolerance) {
    for (auto& t : inputs) fill_uniform(t, rng, -1.0, 1.0);
    Tensor<double> proj(f(inputs).shape());
    fill_uniform(proj, rng, -1.0, 1.0);
    std::vector<Tensor<double>*> vars;
    for (auto& t : inputs) vars.push_back(&t);
    return compare_gradients(
        name, vars, [&] { return project(f(inputs), proj); }, [&] { return vjp(proj); }, rng, tolerance);
}

// Loss gradients with respect to the student logits.
inline GradCheckResult check_loss(const std::string& name, const Shape& shape,
                                  const std::function<std::pair<double, Tensor<double>>(const Tensor<double>&)>& loss,
                                  Rng& rng) {
    Tensor<double> s(shape);
    fill_uniform(s, rng, -3.0, 3.0);
    return compare_gradients(
        name, {&s}, [&] { return loss(s).first; }, [&] { return std::vector<Tensor<double>>{loss(s).second}; }, rng,
        nonlinear_tolerance, 256);
}

} // namespace detail

// Small architecture that still exercises every stage type.
inline ModelConfig gradcheck_config() {
    ModelConfig c;
    c.input_size = 8;
    c.stage_channels = {4, 6, 8};
    c.blocks_per_stage = 1;
    c.head_channels = 4;
    return c;
}

namespace detail {

// Whole network end to end through the distillation objective. Some
// coordinates here have gradients near 1e-9, below what a 1e-5 central
// difference resolves in float64, so this check discounts the resolution floor.
inline GradCheckResult check_model_through_loss(Rng& rng) {
    Model<double> m(gradcheck_config());
    const auto side = m.config().input_size;
    ParamList<double> ps;
    m.collect(ps);
    randomize(ps, rng);
    Tensor<double> x({1, 3, side, side}), teacher({1, 1, side, side}), gt({1, 1, side, side});
    fill_uniform(x, rng, 0.0, 1.0);
    fill_uniform(teacher, rng, -1.0, 1.0);
    for (auto& v : gt.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const LambdaPolicy policy;
    std::vector<Tensor<double>*> vars{&x};
    for (auto* p : ps) vars.push_back(&p->value);
    return compare_gradients(
        "full model through total loss", vars, [&] { return total_loss(m.forward(x), teacher, gt, policy).loss; },
        [&] {
            typename Model<double>::Cache cache;
            const auto y = m.forward(x, &cache);
            zero_grads(ps);
            std::vector<Tensor<double>> g{m.backward(total_loss(y, teacher, gt, policy).grad, cache)};
            for (auto* p : ps) g.push_back(p->grad);
            return g;
        },
        rng, nonlinear_tolerance, 64, true);
}

} // namespace detail

// Every layer type and every loss term, float64.
inline std::vector<GradCheckResult> gradient_suite(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GradCheckResult> out;
    using D = double;

    {
        Conv2d<D> c("conv.dense", 3, 4, 3, 1, 1, true);
        out.push_back(detail::check_module("conv2d dense 3x3", c, {2, 3, 7, 6}, rng, linear_tolerance));
    }
    {
        Conv2d<D> c("conv.depthwise", 4, 4, 3, 2, 4, true);
        out.push_back(detail::check_module("conv2d depthwise 3x3 stride 2", c, {2, 4, 7, 8}, rng, linear_tolerance));
    }
    {
        Conv2d<D> c("conv.pointwise", 5, 3, 1, 1, 1, false);
        out.push_back(detail::check_module("conv2d pointwise", c, {1, 5, 4, 5}, rng, linear_tolerance));
    }
    {
        ChannelNorm<D> n("norm", 3);
        out.push_back(detail::check_module("channel norm", n, {2, 3, 4, 4}, rng, linear_tolerance));
    }
    {
        Upsample<D> u("up", LayerSpec{LayerKind::upsample, 4, 2, 1, 1, Activation::none, false, true});
        out.push_back(detail::check_module("upsample", u, {1, 4, 3, 3}, rng, linear_tolerance));
    }
    out.push_back(detail::check_map(
        "resize nearest x2", {Tensor<D>({1, 2, 3, 4})},
        [](const std::vector<Tensor<D>>& in) { return resize_nearest_x2(in[0]); },
        [](const Tensor<D>& g) { return std::vector<Tensor<D>>{resize_nearest_x2_backward(g)}; }, rng, linear_tolerance));
    out.push_back(detail::check_map(
        "concat skip", {Tensor<D>({1, 2, 3, 3}), Tensor<D>({1, 3, 3, 3})},
        [](const std::vector<Tensor<D>>& in) { return concat_channels(in[0], in[1]); },
        [](const Tensor<D>& g) {
            auto [a, b] = split_channels(g, 2);
            return std::vector<Tensor<D>>{a, b};
        },
        rng, linear_tolerance));
    out.push_back(detail::redraw_on_kink([&] {
        Tensor<D> x({1, 3, 4, 4});
        fill_uniform(x, rng, -1.0, 1.0);
        Tensor<D> proj(x.shape());
        fill_uniform(proj, rng, -1.0, 1.0);
        return compare_gradients(
            "relu", {&x}, [&] { return detail::project(relu_forward<D>(x, nullptr), proj); },
            [&] {
                ReluCache<D> c;
                relu_forward(x, &c);
                return std::vector<Tensor<D>>{relu_backward(proj, c)};
            },
            rng, nonlinear_tolerance);
    }));
    {
        ConvUnit<D> u("unit", 3, 4, 3, 1, 1, true, Activation::relu);
        out.push_back(detail::check_module("conv+norm+relu unit", u, {1, 3, 6, 6}, rng, nonlinear_tolerance));
    }
    {
        DepthwiseSeparable<D> b("ds", LayerSpec{LayerKind::depthwise_separable, 3, 5, 3, 1, Activation::relu, true, true});
        out.push_back(detail::check_module("depthwise separable block", b, {2, 3, 6, 6}, rng, nonlinear_tolerance));
    }
    {
        DepthwiseSeparable<D> b("down", LayerSpec{LayerKind::downsample, 4, 6, 3, 2, Activation::relu, true, true});
        out.push_back(detail::check_module("downsample block", b, {1, 4, 8, 8}, rng, nonlinear_tolerance));
    }
    {
        SigmoidHead<D> h;
        out.push_back(detail::check_module("sigmoid head", h, {1, 1, 4, 4}, rng, nonlinear_tolerance));
    }
    {
        Model<D> m(gradcheck_config());
        const auto s = m.config().input_size;
        out.push_back(detail::check_module("full model", m, {2, 3, s, s}, rng, nonlinear_tolerance));
    }

    out.push_back(detail::redraw_on_kink([&] { return detail::check_model_through_loss(rng); }));

    const Shape ls{1, 1, 6, 6};
    Tensor<D> teacher(ls), gt(ls);
    fill_uniform(teacher, rng, -4.0, 4.0);
    for (auto& v : gt.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto pack = [](const auto& l) { return std::pair<double, Tensor<D>>{l.loss, l.grad}; };
    out.push_back(detail::check_loss("mse on logits", ls, [&](const Tensor<D>& s) { return pack(mse_logits(s, teacher)); }, rng));
    out.push_back(detail::check_loss("balanced bce", ls, [&](const Tensor<D>& s) { return pack(balanced_bce(s, gt)); }, rng));
    out.push_back(detail::check_loss("dice", ls, [&](const Tensor<D>& s) { return pack(dice_loss(s, gt)); }, rng));
    const LambdaPolicy policy;
    out.push_back(detail::check_loss("total (fixed lambda)", ls,
                                     [&](const Tensor<D>& s) { return pack(total_loss(s, teacher, gt, policy)); }, rng));
    out.push_back(detail::check_loss("supervised total", ls,
                                     [&](const Tensor<D>& s) { return pack(supervised_loss(s, gt)); }, rng));
    return out;
}

} // namespace picosam

#endif
