#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtpose/ops.hpp"
#include "mtpose/tensor.hpp"

namespace mtpose {

// Image tensors are NHWC. Rank-3 [H, W, C] inputs are accepted everywhere
// and treated as a batch of one; the output keeps the caller's rank.

enum class Padding { same, valid };

namespace detail {

struct ImageDims {
    int n = 1, h = 0, w = 0, c = 0;
    bool batched = true;

    Shape shape(int oh, int ow, int oc) const { return batched ? Shape{n, oh, ow, oc} : Shape{oh, ow, oc}; }
};

template <typename Real>
ImageDims image_dims(const char* op, const Tensor<Real>& x) {
    if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
    if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
    throw std::invalid_argument(std::string(op) + ": expected [H,W,C] or [N,H,W,C], got " + shape_str(x.shape()));
}

struct ConvGeometry {
    int out = 0;
    int pad_before = 0;
};

inline ConvGeometry conv_geometry(int in, int k, int stride, Padding padding) {
    if (padding == Padding::valid) {
        if (in < k) return {0, 0};
        return {(in - k) / stride + 1, 0};
    }
    const int out = (in + stride - 1) / stride;
    const int total = std::max((out - 1) * stride + k - in, 0);
    return {out, total / 2};
}

}  // namespace detail

/// Dense 2D convolution. kernel: [k, k, Cin, Cout], bias: [Cout] (optional).
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel, int stride = 1,
                    Padding padding = Padding::same, const Tensor<Real>& bias = {}) {
    const auto d = detail::image_dims("conv2d", input);
    if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != d.c) {
        throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                                    shape_str(kernel.shape()));
    }
    const int k = kernel.dim(0);
    const int cin = d.c;
    const int cout = kernel.dim(3);
    if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) + " for kernel " +
                                    shape_str(kernel.shape()));
    }
    const auto gy = detail::conv_geometry(d.h, k, stride, padding);
    const auto gx = detail::conv_geometry(d.w, k, stride, padding);
    const int oh = gy.out, ow = gx.out;
    if (oh <= 0 || ow <= 0) {
        throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " smaller than kernel " +
                                    shape_str(kernel.shape()));
    }

    std::vector<Real> out(static_cast<std::size_t>(d.n) * oh * ow * cout, Real(0));
    const Real* x = input.data().data();
    const Real* w = kernel.data().data();
    for (int n = 0; n < d.n; ++n) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                Real* o = &out[((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * cout];
                if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), o);
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - gy.pad_before + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - gx.pad_before + kx;
                        if (ix < 0 || ix >= d.w) continue;
                        const Real* xp = &x[((static_cast<std::size_t>(n) * d.h + iy) * d.w + ix) * cin];
                        const Real* wp = &w[(static_cast<std::size_t>(ky) * k + kx) * cin * cout];
                        for (int ci = 0; ci < cin; ++ci) {
                            const Real xv = xp[ci];
                            const Real* wr = wp + static_cast<std::size_t>(ci) * cout;
                            for (int co = 0; co < cout; ++co) o[co] += xv * wr[co];
                        }
                    }
                }
            }
        }
    }

    std::vector<Tensor<Real>> inputs{input, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<Real>(
        "conv2d", d.shape(oh, ow, cout), std::move(out), inputs,
        [input, kernel, bias, d, k, stride, gy, gx, oh, ow, cin, cout](const std::vector<Real>& g) mutable {
            Real* dx = grad_target(input);
            Real* dw = grad_target(kernel);
            Real* db = bias.defined() ? grad_target(bias) : nullptr;
            const Real* x = input.data().data();
            // transposed copy so the input-gradient inner loop runs over Cin
            std::vector<Real> wt;
            if (dx) {
                const auto w = kernel.data();
                wt.resize(w.size());
                for (int t = 0; t < k * k; ++t)
                    for (int ci = 0; ci < cin; ++ci)
                        for (int co = 0; co < cout; ++co)
                            wt[(static_cast<std::size_t>(t) * cout + co) * cin + ci] =
                                w[(static_cast<std::size_t>(t) * cin + ci) * cout + co];
            }
            for (int n = 0; n < d.n; ++n) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const Real* go = &g[((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * cout];
                        if (db)
                            for (int co = 0; co < cout; ++co) db[co] += go[co];
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * stride - gy.pad_before + ky;
                            if (iy < 0 || iy >= d.h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * stride - gx.pad_before + kx;
                                if (ix < 0 || ix >= d.w) continue;
                                const std::size_t xo = ((static_cast<std::size_t>(n) * d.h + iy) * d.w + ix) * cin;
                                const std::size_t tap = static_cast<std::size_t>(ky) * k + kx;
                                if (dw) {
                                    Real* dwp = &dw[tap * cin * cout];
                                    for (int ci = 0; ci < cin; ++ci) {
                                        const Real xv = x[xo + ci];
                                        Real* dwr = dwp + static_cast<std::size_t>(ci) * cout;
                                        for (int co = 0; co < cout; ++co) dwr[co] += xv * go[co];
                                    }
                                }
                                if (dx) {
                                    Real* dxp = &dx[xo];
                                    const Real* wtp = &wt[tap * cout * cin];
                                    for (int co = 0; co < cout; ++co) {
                                        const Real gv = go[co];
                                        const Real* wr = wtp + static_cast<std::size_t>(co) * cin;
                                        for (int ci = 0; ci < cin; ++ci) dxp[ci] += gv * wr[ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Per-channel spatial convolution. kernel: [k, k, C], stride 1.
template <typename Real>
Tensor<Real> depthwise_conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel, Padding padding = Padding::same) {
    const auto d = detail::image_dims("depthwise_conv2d", input);
    if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != d.c) {
        throw std::invalid_argument("depthwise_conv2d: input " + shape_str(input.shape()) +
                                    " incompatible with kernel " + shape_str(kernel.shape()));
    }
    const int k = kernel.dim(0);
    const int c = d.c;
    if (k % 2 == 0) throw std::invalid_argument("depthwise_conv2d: kernel size must be odd");
    const auto gy = detail::conv_geometry(d.h, k, 1, padding);
    const auto gx = detail::conv_geometry(d.w, k, 1, padding);
    const int oh = gy.out, ow = gx.out;
    if (oh <= 0 || ow <= 0) {
        throw std::invalid_argument("depthwise_conv2d: input " + shape_str(input.shape()) +
                                    " smaller than kernel " + shape_str(kernel.shape()));
    }
    std::vector<Real> out(static_cast<std::size_t>(d.n) * oh * ow * c, Real(0));
    const Real* x = input.data().data();
    const Real* w = kernel.data().data();
    for (int n = 0; n < d.n; ++n) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                Real* o = &out[((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * c];
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy - gy.pad_before + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox - gx.pad_before + kx;
                        if (ix < 0 || ix >= d.w) continue;
                        const Real* xp = &x[((static_cast<std::size_t>(n) * d.h + iy) * d.w + ix) * c];
                        const Real* wp = &w[(static_cast<std::size_t>(ky) * k + kx) * c];
                        for (int ch = 0; ch < c; ++ch) o[ch] += xp[ch] * wp[ch];
                    }
                }
            }
        }
    }
    return make_result<Real>(
        "depthwise_conv2d", d.shape(oh, ow, c), std::move(out), {input, kernel},
        [input, kernel, d, k, gy, gx, oh, ow, c](const std::vector<Real>& g) mutable {
            Real* dx = grad_target(input);
            Real* dw = grad_target(kernel);
            const Real* x = input.data().data();
            const Real* w = kernel.data().data();
            for (int n = 0; n < d.n; ++n) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const Real* go = &g[((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * c];
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy - gy.pad_before + ky;
                            if (iy < 0 || iy >= d.h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox - gx.pad_before + kx;
                                if (ix < 0 || ix >= d.w) continue;
                                const std::size_t xo = ((static_cast<std::size_t>(n) * d.h + iy) * d.w + ix) * c;
                                const std::size_t wo = (static_cast<std::size_t>(ky) * k + kx) * c;
                                if (dw)
                                    for (int ch = 0; ch < c; ++ch) dw[wo + ch] += x[xo + ch] * go[ch];
                                if (dx)
                                    for (int ch = 0; ch < c; ++ch) dx[xo + ch] += w[wo + ch] * go[ch];
                            }
                        }
                    }
                }
            }
        });
}

/// Depthwise k×k stage followed by a 1×1 pointwise stage.
/// depthwise_kernel: [k, k, Cin]; pointwise_kernel: [1, 1, Cin, Cout].
template <typename Real>
Tensor<Real> depthwise_separable_conv2d(const Tensor<Real>& input, const Tensor<Real>& depthwise_kernel,
                                        const Tensor<Real>& pointwise_kernel, const Tensor<Real>& bias = {}) {
    if (pointwise_kernel.rank() != 4 || pointwise_kernel.dim(0) != 1 || pointwise_kernel.dim(1) != 1) {
        throw std::invalid_argument("depthwise_separable_conv2d: pointwise kernel must be [1,1,Cin,Cout], got " +
                                    shape_str(pointwise_kernel.shape()));
    }
    return conv2d(depthwise_conv2d(input, depthwise_kernel, Padding::same), pointwise_kernel, 1, Padding::same, bias);
}

/// 2×2 max pooling, stride 2. Ties route the gradient to the first cell in
/// row-major order.
template <typename Real>
Tensor<Real> maxpool2(const Tensor<Real>& input) {
    const auto d = detail::image_dims("maxpool2", input);
    if (d.h % 2 != 0 || d.w % 2 != 0) {
        throw std::invalid_argument("maxpool2: spatial dimensions must be even, got " + shape_str(input.shape()));
    }
    const int oh = d.h / 2, ow = d.w / 2, c = d.c;
    std::vector<Real> out(static_cast<std::size_t>(d.n) * oh * ow * c);
    std::vector<std::size_t> argmax(out.size());
    const auto x = input.data();
    for (int n = 0; n < d.n; ++n) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const std::size_t o = ((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * c;
                for (int ch = 0; ch < c; ++ch) {
                    std::size_t best = ((static_cast<std::size_t>(n) * d.h + 2 * oy) * d.w + 2 * ox) * c + ch;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t idx =
                                ((static_cast<std::size_t>(n) * d.h + 2 * oy + dy) * d.w + 2 * ox + dx) * c + ch;
                            if (x[idx] > x[best]) best = idx;
                        }
                    }
                    out[o + ch] = x[best];
                    argmax[o + ch] = best;
                }
            }
        }
    }
    return make_result<Real>("maxpool2", d.shape(oh, ow, c), std::move(out), {input},
                             [input, argmax = std::move(argmax)](const std::vector<Real>& g) mutable {
                                 Real* dx = grad_target(input);
                                 for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
                             });
}

/// Nearest-neighbour 2× upsampling.
template <typename Real>
Tensor<Real> upsample2(const Tensor<Real>& input) {
    const auto d = detail::image_dims("upsample2", input);
    const int oh = d.h * 2, ow = d.w * 2, c = d.c;
    std::vector<Real> out(static_cast<std::size_t>(d.n) * oh * ow * c);
    const auto x = input.data();
    for (int n = 0; n < d.n; ++n)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const std::size_t o = ((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * c;
                const std::size_t i = ((static_cast<std::size_t>(n) * d.h + oy / 2) * d.w + ox / 2) * c;
                for (int ch = 0; ch < c; ++ch) out[o + ch] = x[i + ch];
            }
    return make_result<Real>("upsample2", d.shape(oh, ow, c), std::move(out), {input},
                             [input, d, oh, ow, c](const std::vector<Real>& g) mutable {
                                 Real* dx = grad_target(input);
                                 for (int n = 0; n < d.n; ++n)
                                     for (int oy = 0; oy < oh; ++oy)
                                         for (int ox = 0; ox < ow; ++ox) {
                                             const std::size_t o =
                                                 ((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * c;
                                             const std::size_t i =
                                                 ((static_cast<std::size_t>(n) * d.h + oy / 2) * d.w + ox / 2) * c;
                                             for (int ch = 0; ch < c; ++ch) dx[i + ch] += g[o + ch];
                                         }
                             });
}

enum class NormMode { train, eval };

struct BatchNormOptions {
    double epsilon = 1e-5;
    double momentum = 0.99;  // weight on the old running value
};

/// Per-channel batch normalisation over every axis but the last.
///
/// Train mode normalises with batch statistics and folds them into
/// running_mean / running_var (unbiased variance); eval mode uses the
/// running statistics. Running buffers are updated in place.
template <typename Real>
Tensor<Real> batchnorm(const Tensor<Real>& input, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                       Tensor<Real> running_mean, Tensor<Real> running_var, NormMode mode,
                       BatchNormOptions opt = {}) {
    const int c = input.dim(-1);
    for (const Tensor<Real>* p : {&gamma, &beta, static_cast<const Tensor<Real>*>(&running_mean),
                                   static_cast<const Tensor<Real>*>(&running_var)}) {
        if (p->rank() != 1 || p->dim(0) != c) {
            throw std::invalid_argument("batchnorm: per-channel parameter " + shape_str(p->shape()) +
                                        " does not match input " + shape_str(input.shape()));
        }
    }
    const std::size_t m = input.numel() / static_cast<std::size_t>(c);
    const auto x = input.data();
    std::vector<Real> mu(c, Real(0)), inv_std(c);
    if (mode == NormMode::train) {
        if (m == 0) throw std::invalid_argument("batchnorm: empty batch");
        std::vector<double> s(c, 0.0), s2(c, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (int ch = 0; ch < c; ++ch) s[ch] += static_cast<double>(x[i * c + ch]);
        for (int ch = 0; ch < c; ++ch) s[ch] /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const double dv = static_cast<double>(x[i * c + ch]) - s[ch];
                s2[ch] += dv * dv;
            }
        for (int ch = 0; ch < c; ++ch) {
            const double var = s2[ch] / static_cast<double>(m);
            mu[ch] = static_cast<Real>(s[ch]);
            inv_std[ch] = static_cast<Real>(1.0 / std::sqrt(var + opt.epsilon));
            const double unbiased = m > 1 ? s2[ch] / static_cast<double>(m - 1) : var;
            running_mean[ch] = static_cast<Real>(opt.momentum * running_mean[ch] + (1 - opt.momentum) * s[ch]);
            running_var[ch] = static_cast<Real>(opt.momentum * running_var[ch] + (1 - opt.momentum) * unbiased);
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mu[ch] = running_mean[ch];
            inv_std[ch] = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + opt.epsilon));
        }
    }
    std::vector<Real> xhat(input.numel()), y(input.numel());
    const auto gm = gamma.data();
    const auto bt = beta.data();
    for (std::size_t i = 0; i < m; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t idx = i * c + ch;
            xhat[idx] = (x[idx] - mu[ch]) * inv_std[ch];
            y[idx] = gm[ch] * xhat[idx] + bt[ch];
        }
    const bool train = mode == NormMode::train;
    return make_result<Real>(
        "batchnorm", input.shape(), std::move(y), {input, gamma, beta},
        [input, gamma, beta, xhat = std::move(xhat), inv_std, m, c, train](const std::vector<Real>& g) mutable {
            Real* dx = grad_target(input);
            Real* dg = grad_target(gamma);
            Real* dbt = grad_target(beta);
            const auto gm = gamma.data();
            std::vector<Real> sum_g(c, Real(0)), sum_gx(c, Real(0));
            for (std::size_t i = 0; i < m; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    sum_g[ch] += g[i * c + ch];
                    sum_gx[ch] += g[i * c + ch] * xhat[i * c + ch];
                }
            if (dg)
                for (int ch = 0; ch < c; ++ch) dg[ch] += sum_gx[ch];
            if (dbt)
                for (int ch = 0; ch < c; ++ch) dbt[ch] += sum_g[ch];
            if (!dx) return;
            const Real inv_m = Real(1) / static_cast<Real>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t idx = i * c + ch;
                    if (train) {
                        dx[idx] += gm[ch] * inv_std[ch] *
                                   (g[idx] - inv_m * sum_g[ch] - xhat[idx] * inv_m * sum_gx[ch]);
                    } else {
                        dx[idx] += g[idx] * gm[ch] * inv_std[ch];
                    }
                }
        });
}

/// Mean over the spatial axes: [N, H, W, C] -> [N, C].
template <typename Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& input) {
    const auto d = detail::image_dims("global_avg_pool", input);
    const int hw = d.h * d.w;
    std::vector<Real> y(static_cast<std::size_t>(d.n) * d.c, Real(0));
    const auto x = input.data();
    for (int n = 0; n < d.n; ++n)
        for (int p = 0; p < hw; ++p)
            for (int ch = 0; ch < d.c; ++ch)
                y[static_cast<std::size_t>(n) * d.c + ch] += x[(static_cast<std::size_t>(n) * hw + p) * d.c + ch];
    for (auto& v : y) v /= static_cast<Real>(hw);
    return make_result<Real>("global_avg_pool", Shape{d.n, d.c}, std::move(y), {input},
                             [input, d, hw](const std::vector<Real>& g) mutable {
                                 Real* dx = grad_target(input);
                                 const Real s = Real(1) / static_cast<Real>(hw);
                                 for (int n = 0; n < d.n; ++n)
                                     for (int p = 0; p < hw; ++p)
                                         for (int ch = 0; ch < d.c; ++ch)
                                             dx[(static_cast<std::size_t>(n) * hw + p) * d.c + ch] +=
                                                 g[static_cast<std::size_t>(n) * d.c + ch] * s;
                             });
}

}  // namespace mtpose
