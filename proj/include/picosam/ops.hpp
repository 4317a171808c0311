#ifndef PICOSAM_OPS_HPP
#define PICOSAM_OPS_HPP

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace picosam {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <std::floating_point T>
inline T sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// log(1 + exp(x)) without overflow.
template <std::floating_point T>
inline T softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

namespace detail {

template <Element T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <Element T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f) {
    require_same_shape(a, b, name);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

} // namespace detail

template <Element T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::zip(a, b, "add", [](T x, T y) { return T(x + y); });
}
template <Element T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::zip(a, b, "sub", [](T x, T y) { return T(x - y); });
}
template <Element T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::zip(a, b, "mul", [](T x, T y) { return T(x * y); });
}
template <Element T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
    return detail::map(a, [s](T x) { return T(x * s); });
}
template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::map(a, [](T x) { return sigmoid(x); });
}
template <Element T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::map(a, [](T x) { return x > T(0) ? x : T(0); });
}
template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::map(a, [](T x) { return std::exp(x); });
}
template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::map(a, [](T x) { return std::log(x); });
}
template <Element T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    if (hi < lo) throw DomainError("clamp: upper bound below lower bound");
    return detail::map(a, [lo, hi](T x) { return std::clamp(x, lo, hi); });
}

// ---------------------------------------------------------------------------
// Resampling and channel concatenation
// ---------------------------------------------------------------------------

template <Element T>
Tensor<T> resize_nearest_x2(const Tensor<T>& in) {
    require_rank(in.shape(), 4, "resize_nearest_x2");
    const auto n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    Tensor<T> out({n, c, 2 * h, 2 * w});
    const std::size_t planes = n * c;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = in.ptr() + p * h * w;
        T* dst = out.ptr() + p * 4 * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            T* row = dst + 2 * y * 2 * w;
            for (std::size_t x = 0; x < w; ++x) row[2 * x] = row[2 * x + 1] = src[y * w + x];
            std::copy(row, row + 2 * w, row + 2 * w);
        }
    }
    return out;
}

// Adjoint of resize_nearest_x2: sums each 2x2 block.
template <Element T>
Tensor<T> resize_nearest_x2_backward(const Tensor<T>& grad) {
    require_rank(grad.shape(), 4, "resize_nearest_x2_backward");
    const auto n = grad.dim(0), c = grad.dim(1), h2 = grad.dim(2), w2 = grad.dim(3);
    if (h2 % 2 || w2 % 2) throw ShapeError("resize_nearest_x2_backward: odd spatial size");
    const auto h = h2 / 2, w = w2 / 2;
    Tensor<T> out({n, c, h, w});
    for (std::size_t p = 0; p < n * c; ++p) {
        const T* src = grad.ptr() + p * h2 * w2;
        T* dst = out.ptr() + p * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const T* s = src + 2 * y * w2 + 2 * x;
                dst[y * w + x] = s[0] + s[1] + s[w2] + s[w2 + 1];
            }
        }
    }
    return out;
}

template <std::floating_point T>
Tensor<T> avg_pool2(const Tensor<T>& in) {
    auto summed = resize_nearest_x2_backward(in);
    for (auto& v : summed.data()) v /= T(4);
    return summed;
}

template <Element T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a.shape(), 4, "concat_channels");
    require_rank(b.shape(), 4, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        T* dst = out.ptr() + i * (ca + cb) * hw;
        std::copy_n(a.ptr() + i * ca * hw, ca * hw, dst);
        std::copy_n(b.ptr() + i * cb * hw, cb * hw, dst + ca * hw);
    }
    return out;
}

// Inverse of concat_channels: the first `first_channels` channels go to the
// first tensor.
template <Element T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, std::size_t first_channels) {
    require_rank(t.shape(), 4, "split_channels");
    const auto n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
    if (first_channels == 0 || first_channels >= c) {
        throw ShapeError("split_channels: cannot split " + std::to_string(c) + " channels at " +
                         std::to_string(first_channels));
    }
    const auto cb = c - first_channels;
    Tensor<T> a({n, first_channels, t.dim(2), t.dim(3)});
    Tensor<T> b({n, cb, t.dim(2), t.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        const T* src = t.ptr() + i * c * hw;
        std::copy_n(src, first_channels * hw, a.ptr() + i * first_channels * hw);
        std::copy_n(src + first_channels * hw, cb * hw, b.ptr() + i * cb * hw);
    }
    return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t groups = 1;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw ShapeError("convolution window larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

template <Element T, Element W>
void check_conv_args(const Tensor<T>& input, const Tensor<W>& weight, const ConvGeometry& g,
                     const char* what) {
    require_rank(input.shape(), 4, what);
    require_rank(weight.shape(), 4, what);
    const auto cin = input.dim(1), cout = weight.dim(0);
    if (g.stride < 1) throw ShapeError(std::string(what) + ": stride must be >= 1");
    if (g.groups < 1 || cin % g.groups || cout % g.groups) {
        throw ShapeError(std::string(what) + ": input " + shape_str(input.shape()) + " and weight " +
                         shape_str(weight.shape()) + " not divisible by groups=" +
                         std::to_string(g.groups));
    }
    if (weight.dim(1) != cin / g.groups) {
        throw ShapeError(std::string(what) + ": input " + shape_str(input.shape()) +
                         " channel count does not match weight " + shape_str(weight.shape()) +
                         " with groups=" + std::to_string(g.groups));
    }
}

template <std::floating_point T>
void check_bias(const Tensor<T>* bias, std::size_t cout) {
    if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
        throw ShapeError("conv bias " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
    }
}

// Direct 7-loop convolution with zero padding. Slow and obviously correct;
// every optimized path is tested against it.
template <std::floating_point T>
Tensor<T> conv2d_reference(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                           std::size_t stride, std::size_t pad, std::size_t groups) {
    const ConvGeometry g{stride, pad, groups};
    check_conv_args(input, weight, g, "conv2d_reference");
    check_bias(bias, weight.dim(0));
    const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const auto cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const auto ho = conv_out_size(h, kh, stride, pad), wo = conv_out_size(w, kw, stride, pad);
    const auto cin_g = cin / groups, cout_g = cout / groups;
    Tensor<T> out({n, cout, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t grp = co / cout_g;
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    T acc = bias ? (*bias)[co] : T(0);
                    for (std::size_t ci = 0; ci < cin_g; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                static_cast<std::ptrdiff_t>(pad);
                                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                                    ix >= static_cast<std::ptrdiff_t>(w))
                                    continue;
                                acc += weight.at(co, ci, ky, kx) *
                                       input.at(b, grp * cin_g + ci, static_cast<std::size_t>(iy),
                                                static_cast<std::size_t>(ix));
                            }
                    out.at(b, co, oy, ox) = acc;
                }
        }
    return out;
}

namespace detail {

// Range of output columns whose input column ox*stride + k - pad is in [0, w).
struct ValidRange {
    std::size_t lo, hi; // half-open
};

inline ValidRange valid_outputs(std::size_t k, std::size_t stride, std::size_t pad, std::size_t in,
                                std::size_t out) {
    // ox*stride + k >= pad  and  ox*stride + k - pad <= in - 1
    std::size_t lo = 0;
    if (k < pad) lo = (pad - k + stride - 1) / stride;
    std::size_t hi = 0;
    if (in + pad > k) hi = std::min(out, (in + pad - k - 1) / stride + 1);
    if (hi < lo) hi = lo;
    return {lo, hi};
}

} // namespace detail

namespace detail {

// C[M x N] += A[M x K] * B[K x N], all row-major and densely packed. Four
// rows of C are updated per pass over a B row so each B element is loaded
// once per four multiply-adds; columns are tiled to keep C rows in L1.
template <std::floating_point T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    constexpr std::size_t tile = 512;
    for (std::size_t j0 = 0; j0 < n; j0 += tile) {
        const std::size_t len = std::min(tile, n - j0);
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            T* c0 = c + i * n + j0;
            T* c1 = c0 + n;
            T* c2 = c1 + n;
            T* c3 = c2 + n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T a0 = a[i * k + kk], a1 = a[(i + 1) * k + kk], a2 = a[(i + 2) * k + kk],
                        a3 = a[(i + 3) * k + kk];
                const T* br = b + kk * n + j0;
                for (std::size_t j = 0; j < len; ++j) {
                    const T bv = br[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        }
        for (; i < m; ++i) {
            T* c0 = c + i * n + j0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T a0 = a[i * k + kk];
                const T* br = b + kk * n + j0;
                for (std::size_t j = 0; j < len; ++j) c0[j] += a0 * br[j];
            }
        }
    }
}

template <std::floating_point T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
    return out;
}

inline bool is_pointwise(std::size_t kh, std::size_t kw, const ConvGeometry& g) {
    return kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1;
}

} // namespace detail

// Optimized forward convolution. Pointwise convs run as a channel GEMM over
// contiguous planes; everything else runs a row-vectorizable direct loop.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                 const ConvGeometry& g) {
    check_conv_args(input, weight, g, "conv2d");
    check_bias(bias, weight.dim(0));
    const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const auto cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const auto ho = conv_out_size(h, kh, g.stride, g.pad), wo = conv_out_size(w, kw, g.stride, g.pad);
    const auto cin_g = cin / g.groups, cout_g = cout / g.groups;
    Tensor<T> out({n, cout, ho, wo});
    const std::size_t in_plane = h * w, out_plane = ho * wo;

    for (std::size_t b = 0; b < n; ++b) {
        const T* in_b = input.ptr() + b * cin * in_plane;
        T* out_b = out.ptr() + b * cout * out_plane;
        for (std::size_t co = 0; co < cout; ++co) {
            T* dst = out_b + co * out_plane;
            std::fill(dst, dst + out_plane, bias ? (*bias)[co] : T(0));
        }
        if (detail::is_pointwise(kh, kw, g)) {
            detail::gemm_accumulate(cout, out_plane, cin, weight.ptr(), in_b, out_b);
            continue;
        }
        for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t grp = co / cout_g;
            T* dst = out_b + co * out_plane;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
                const T* src = in_b + (grp * cin_g + ci) * in_plane;
                const T* wk = weight.ptr() + (co * cin_g + ci) * kh * kw;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const auto rows = detail::valid_outputs(ky, g.stride, g.pad, h, ho);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T wv = wk[ky * kw + kx];
                        const auto cols = detail::valid_outputs(kx, g.stride, g.pad, w, wo);
                        const std::size_t len = cols.hi - cols.lo;
                        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
                            const T* s = src + (oy * g.stride + ky - g.pad) * w +
                                         (cols.lo * g.stride + kx - g.pad);
                            T* d = dst + oy * wo + cols.lo;
                            if (g.stride == 1) {
                                for (std::size_t j = 0; j < len; ++j) d[j] += wv * s[j];
                            } else {
                                for (std::size_t j = 0; j < len; ++j) d[j] += wv * s[j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

// dL/d(input) of conv2d.
template <std::floating_point T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                                const Shape& input_shape, const ConvGeometry& g) {
    require_rank(input_shape, 4, "conv2d_backward_input");
    const auto n = input_shape[0], cin = input_shape[1], h = input_shape[2], w = input_shape[3];
    const auto cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const auto ho = grad_out.dim(2), wo = grad_out.dim(3);
    const auto cin_g = cin / g.groups, cout_g = cout / g.groups;
    Tensor<T> grad_in(input_shape);
    const std::size_t in_plane = h * w, out_plane = ho * wo;

    const bool pointwise = detail::is_pointwise(kh, kw, g);
    const std::vector<T> weight_t = pointwise ? detail::transpose(weight.ptr(), cout, cin) : std::vector<T>{};
    for (std::size_t b = 0; b < n; ++b) {
        T* gin_b = grad_in.ptr() + b * cin * in_plane;
        const T* gout_b = grad_out.ptr() + b * cout * out_plane;
        if (pointwise) {
            detail::gemm_accumulate(cin, out_plane, cout, weight_t.data(), gout_b, gin_b);
            continue;
        }
        for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t grp = co / cout_g;
            const T* src = gout_b + co * out_plane;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
                T* dst = gin_b + (grp * cin_g + ci) * in_plane;
                const T* wk = weight.ptr() + (co * cin_g + ci) * kh * kw;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const auto rows = detail::valid_outputs(ky, g.stride, g.pad, h, ho);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T wv = wk[ky * kw + kx];
                        const auto cols = detail::valid_outputs(kx, g.stride, g.pad, w, wo);
                        const std::size_t len = cols.hi - cols.lo;
                        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
                            T* d = dst + (oy * g.stride + ky - g.pad) * w +
                                   (cols.lo * g.stride + kx - g.pad);
                            const T* s = src + oy * wo + cols.lo;
                            if (g.stride == 1) {
                                for (std::size_t j = 0; j < len; ++j) d[j] += wv * s[j];
                            } else {
                                for (std::size_t j = 0; j < len; ++j) d[j * g.stride] += wv * s[j];
                            }
                        }
                    }
                }
            }
        }
    }
    return grad_in;
}

namespace detail {

// Dot product with independent partial sums so the loop vectorizes without
// relaxed floating-point flags.
template <std::floating_point T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T s[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) s[j] += a[i + j] * b[i + j];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) + tail;
}

} // namespace detail

// Accumulates dL/d(weight) into grad_weight (+=).
template <std::floating_point T>
void conv2d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& input,
                            Tensor<T>& grad_weight, const ConvGeometry& g) {
    const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const auto cout = grad_weight.dim(0), kh = grad_weight.dim(2), kw = grad_weight.dim(3);
    const auto ho = grad_out.dim(2), wo = grad_out.dim(3);
    const auto cin_g = cin / g.groups, cout_g = cout / g.groups;
    const std::size_t in_plane = h * w, out_plane = ho * wo;

    for (std::size_t b = 0; b < n; ++b) {
        const T* in_b = input.ptr() + b * cin * in_plane;
        const T* gout_b = grad_out.ptr() + b * cout * out_plane;
        if (detail::is_pointwise(kh, kw, g)) {
            const auto in_t = detail::transpose(in_b, cin, in_plane);
            detail::gemm_accumulate(cout, cin, out_plane, gout_b, in_t.data(), grad_weight.ptr());
            continue;
        }
        for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t grp = co / cout_g;
            const T* gp = gout_b + co * out_plane;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
                const T* src = in_b + (grp * cin_g + ci) * in_plane;
                T* gw = grad_weight.ptr() + (co * cin_g + ci) * kh * kw;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const auto rows = detail::valid_outputs(ky, g.stride, g.pad, h, ho);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const auto cols = detail::valid_outputs(kx, g.stride, g.pad, w, wo);
                        if (cols.hi <= cols.lo) continue;
                        const std::size_t len = cols.hi - cols.lo;
                        T acc = 0;
                        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
                            const T* s = src + (oy * g.stride + ky - g.pad) * w +
                                         (cols.lo * g.stride + kx - g.pad);
                            const T* gr = gp + oy * wo + cols.lo;
                            if (g.stride == 1) {
                                acc += detail::dot(gr, s, len);
                            } else {
                                for (std::size_t j = 0; j < len; ++j) acc += gr[j] * s[j * g.stride];
                            }
                        }
                        gw[ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

// Accumulates dL/d(bias) into grad_bias (+=).
template <std::floating_point T>
void conv2d_backward_bias(const Tensor<T>& grad_out, Tensor<T>& grad_bias) {
    const auto n = grad_out.dim(0), cout = grad_out.dim(1), plane = grad_out.dim(2) * grad_out.dim(3);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            const T* p = grad_out.ptr() + (b * cout + co) * plane;
            T s = 0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            grad_bias[co] += s;
        }
}

} // namespace picosam

#endif
