#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtpose/tensor.hpp"

namespace mtpose {

namespace detail {

template <typename Real>
void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

template <typename Real, typename Fwd, typename Dfdx>
Tensor<Real> unary(const char* op, const Tensor<Real>& x, Fwd fwd, Dfdx dfdx) {
    std::vector<Real> y(x.numel());
    const auto xs = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
    return make_result<Real>(op, x.shape(), std::move(y), {x}, [x, dfdx](const std::vector<Real>& g) mutable {
        Real* gx = grad_target(x);
        const auto xs = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xs[i]);
    });
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<Real> y(a.numel());
    const auto as = a.data();
    const auto bs = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] + bs[i];
    return make_result<Real>("add", a.shape(), std::move(y), {a, b}, [a, b](const std::vector<Real>& g) mutable {
        if (Real* ga = grad_target(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (Real* gb = grad_target(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<Real> y(a.numel());
    const auto as = a.data();
    const auto bs = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] - bs[i];
    return make_result<Real>("sub", a.shape(), std::move(y), {a, b}, [a, b](const std::vector<Real>& g) mutable {
        if (Real* ga = grad_target(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (Real* gb = grad_target(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<Real> y(a.numel());
    const auto as = a.data();
    const auto bs = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] * bs[i];
    return make_result<Real>("mul", a.shape(), std::move(y), {a, b}, [a, b](const std::vector<Real>& g) mutable {
        const auto as = a.data();
        const auto bs = b.data();
        if (Real* ga = grad_target(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
        if (Real* gb = grad_target(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
    });
}

/// Sum of any number of same-shape tensors; undefined entries are skipped.
/// Returns an undefined tensor when every entry is undefined.
template <typename Real>
Tensor<Real> add_all(const std::vector<Tensor<Real>>& terms) {
    Tensor<Real> acc;
    for (const auto& t : terms) {
        if (!t.defined()) continue;
        acc = acc.defined() ? add(acc, t) : t;
    }
    return acc;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real s) {
    return detail::unary<Real>("scale", x, [s](Real v) { return v * s; }, [s](Real) { return s; });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real s) {
    return detail::unary<Real>("add_scalar", x, [s](Real v) { return v + s; }, [](Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
    return detail::unary<Real>(
        "relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
        [](Real v) { return v > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    std::vector<Real> y(x.numel());
    const auto xs = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        const Real v = xs[i];
        // split on sign so exp never overflows
        if (v >= Real(0)) {
            y[i] = Real(1) / (Real(1) + std::exp(-v));
        } else {
            const Real e = std::exp(v);
            y[i] = e / (Real(1) + e);
        }
    }
    std::vector<Real> saved = y;
    return make_result<Real>("sigmoid", x.shape(), std::move(y), {x},
                             [x, saved = std::move(saved)](const std::vector<Real>& g) mutable {
                                 Real* gx = grad_target(x);
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                     gx[i] += g[i] * saved[i] * (Real(1) - saved[i]);
                             });
}

/// |x| with zero subgradient at the origin.
template <typename Real>
Tensor<Real> abs(const Tensor<Real>& x) {
    return detail::unary<Real>(
        "abs", x, [](Real v) { return std::abs(v); },
        [](Real v) { return v > Real(0) ? Real(1) : (v < Real(0) ? Real(-1) : Real(0)); });
}

template <typename Real>
Tensor<Real> square(const Tensor<Real>& x) {
    return detail::unary<Real>("square", x, [](Real v) { return v * v; }, [](Real v) { return Real(2) * v; });
}

/// log(max(x, floor)); the gradient vanishes where the floor is active.
template <typename Real>
Tensor<Real> log_clamped(const Tensor<Real>& x, Real floor) {
    return detail::unary<Real>(
        "log_clamped", x, [floor](Real v) { return std::log(std::max(v, floor)); },
        [floor](Real v) { return v > floor ? Real(1) / v : Real(0); });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real acc = 0;
    for (Real v : x.data()) acc += v;
    return make_result<Real>("sum", Shape{}, std::vector<Real>{acc}, {x}, [x](const std::vector<Real>& g) mutable {
        Real* gx = grad_target(x);
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
    });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

/// Σ w_i x_i for a fixed (non-differentiated) weight vector; handy for
/// turning any tensor into a scalar test loss.
template <typename Real>
Tensor<Real> weighted_sum(const Tensor<Real>& x, const std::vector<Real>& w) {
    if (w.size() != x.numel()) throw std::invalid_argument("weighted_sum: weight length mismatch");
    Real acc = 0;
    const auto xs = x.data();
    for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * xs[i];
    return make_result<Real>("weighted_sum", Shape{}, std::vector<Real>{acc}, {x},
                             [x, w](const std::vector<Real>& g) mutable {
                                 Real* gx = grad_target(x);
                                 for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i];
                             });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<Real> y(x.data().begin(), x.data().end());
    return make_result<Real>("reshape", std::move(shape), std::move(y), {x}, [x](const std::vector<Real>& g) mutable {
        Real* gx = grad_target(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Rows [begin, end) along the leading axis.
template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, int begin, int end) {
    if (x.rank() < 1 || begin < 0 || end > x.dim(0) || begin > end) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") outside " + shape_str(x.shape()));
    }
    const std::size_t row = x.numel() / static_cast<std::size_t>(std::max(1, x.dim(0)));
    Shape shape = x.shape();
    shape[0] = end - begin;
    const auto xs = x.data();
    std::vector<Real> y(xs.begin() + static_cast<std::ptrdiff_t>(begin * row),
                        xs.begin() + static_cast<std::ptrdiff_t>(end * row));
    const std::size_t offset = begin * row;
    return make_result<Real>("slice_rows", std::move(shape), std::move(y), {x},
                             [x, offset](const std::vector<Real>& g) mutable {
                                 Real* gx = grad_target(x) + offset;
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

/// Concatenate along the last axis; all leading dimensions must agree.
template <typename Real>
Tensor<Real> concat_last(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::vector<int> widths;
    int total = 0;
    for (const auto& p : parts) {
        Shape l = p.shape();
        widths.push_back(l.back());
        total += l.back();
        l.pop_back();
        if (l != lead) {
            throw std::invalid_argument("concat_last: leading shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                        shape_str(p.shape()));
        }
    }
    const std::size_t rows = shape_numel(lead);
    std::vector<Real> y(rows * static_cast<std::size_t>(total));
    int offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto ps = parts[k].data();
        const int w = widths[k];
        for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < w; ++c) y[r * total + offset + c] = ps[r * w + c];
        offset += w;
    }
    Shape shape = lead;
    shape.push_back(total);
    return make_result<Real>("concat_last", std::move(shape), std::move(y), parts,
                             [parts, widths, rows, total](const std::vector<Real>& g) mutable {
                                 int offset = 0;
                                 for (std::size_t k = 0; k < parts.size(); ++k) {
                                     const int w = widths[k];
                                     if (Real* gp = grad_target(parts[k])) {
                                         for (std::size_t r = 0; r < rows; ++r)
                                             for (int c = 0; c < w; ++c) gp[r * w + c] += g[r * total + offset + c];
                                     }
                                     offset += w;
                                 }
                             });
}

/// Multiply each trailing-axis row of `x` by the matching entry of `s`.
/// x: [..., C], s: [...] with numel(s) * C == numel(x).
template <typename Real>
Tensor<Real> scale_rows(const Tensor<Real>& x, const Tensor<Real>& s) {
    const int c = x.dim(-1);
    if (s.numel() * static_cast<std::size_t>(c) != x.numel()) {
        throw std::invalid_argument("scale_rows: " + shape_str(x.shape()) + " vs scale " + shape_str(s.shape()));
    }
    std::vector<Real> y(x.numel());
    const auto xs = x.data();
    const auto ss = s.data();
    for (std::size_t r = 0; r < s.numel(); ++r)
        for (int k = 0; k < c; ++k) y[r * c + k] = xs[r * c + k] * ss[r];
    return make_result<Real>("scale_rows", x.shape(), std::move(y), {x, s}, [x, s, c](const std::vector<Real>& g) mutable {
        const auto xs = x.data();
        const auto ss = s.data();
        Real* gx = grad_target(x);
        Real* gs = grad_target(s);
        for (std::size_t r = 0; r < s.numel(); ++r) {
            for (int k = 0; k < c; ++k) {
                if (gx) gx[r * c + k] += g[r * c + k] * ss[r];
                if (gs) gs[r] += g[r * c + k] * xs[r * c + k];
            }
        }
    });
}

/// x: [M, K] times w: [K, N] plus optional bias [N].
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias = {}) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        throw std::invalid_argument("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                                    shape_str(w.shape()));
    }
    const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
        throw std::invalid_argument("linear: bias shape " + shape_str(bias.shape()));
    }
    std::vector<Real> y(static_cast<std::size_t>(m) * n, Real(0));
    const auto xs = x.data();
    const auto ws = w.data();
    for (int i = 0; i < m; ++i) {
        Real* yr = &y[static_cast<std::size_t>(i) * n];
        if (bias.defined())
            for (int j = 0; j < n; ++j) yr[j] = bias.data()[j];
        for (int p = 0; p < k; ++p) {
            const Real xv = xs[static_cast<std::size_t>(i) * k + p];
            const Real* wr = &ws[static_cast<std::size_t>(p) * n];
            for (int j = 0; j < n; ++j) yr[j] += xv * wr[j];
        }
    }
    std::vector<Tensor<Real>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<Real>("linear", Shape{m, n}, std::move(y), inputs,
                             [x, w, bias, m, k, n](const std::vector<Real>& g) mutable {
                                 const auto xs = x.data();
                                 const auto ws = w.data();
                                 Real* gx = grad_target(x);
                                 Real* gw = grad_target(w);
                                 Real* gb = bias.defined() ? grad_target(bias) : nullptr;
                                 for (int i = 0; i < m; ++i) {
                                     const Real* gr = &g[static_cast<std::size_t>(i) * n];
                                     if (gb)
                                         for (int j = 0; j < n; ++j) gb[j] += gr[j];
                                     for (int p = 0; p < k; ++p) {
                                         const Real* wr = &ws[static_cast<std::size_t>(p) * n];
                                         if (gx) {
                                             Real acc = 0;
                                             for (int j = 0; j < n; ++j) acc += gr[j] * wr[j];
                                             gx[static_cast<std::size_t>(i) * k + p] += acc;
                                         }
                                         if (gw) {
                                             const Real xv = xs[static_cast<std::size_t>(i) * k + p];
                                             Real* gwr = &gw[static_cast<std::size_t>(p) * n];
                                             for (int j = 0; j < n; ++j) gwr[j] += xv * gr[j];
                                         }
                                     }
                                 }
                             });
}

/// Softmax over the last axis, max-subtracted.
template <typename Real>
Tensor<Real> softmax_last(const Tensor<Real>& x) {
    const int n = x.dim(-1);
    const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
    std::vector<Real> y(x.numel());
    const auto xs = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = &xs[r * n];
        Real* yr = &y[r * n];
        const Real m = *std::max_element(xr, xr + n);
        Real z = 0;
        for (int j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - m);
            z += yr[j];
        }
        for (int j = 0; j < n; ++j) yr[j] /= z;
    }
    std::vector<Real> saved = y;
    return make_result<Real>("softmax", x.shape(), std::move(y), {x},
                             [x, saved = std::move(saved), n, rows](const std::vector<Real>& g) mutable {
                                 Real* gx = grad_target(x);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                     const Real* yr = &saved[r * n];
                                     const Real* gr = &g[r * n];
                                     Real dot = 0;
                                     for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
                                     for (int j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
                                 }
                             });
}

/// out[r] = x[r, index[r]] for x: [R, C].
template <typename Real>
Tensor<Real> pick(const Tensor<Real>& x, const std::vector<int>& index) {
    if (x.rank() != 2 || static_cast<int>(index.size()) != x.dim(0)) {
        throw std::invalid_argument("pick: expected one index per row of " + shape_str(x.shape()));
    }
    const int c = x.dim(1);
    std::vector<Real> y(index.size());
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] < 0 || index[r] >= c) {
            throw std::invalid_argument("pick: index " + std::to_string(index[r]) + " outside [0," +
                                        std::to_string(c) + ")");
        }
        y[r] = x.data()[r * c + index[r]];
    }
    return make_result<Real>("pick", Shape{x.dim(0)}, std::move(y), {x}, [x, index, c](const std::vector<Real>& g) mutable {
        Real* gx = grad_target(x);
        for (std::size_t r = 0; r < index.size(); ++r) gx[r * c + index[r]] += g[r];
    });
}

template <typename Real>
bool all_finite(const Tensor<Real>& x) {
    return std::all_of(x.data().begin(), x.data().end(), [](Real v) { return std::isfinite(v); });
}

}  // namespace mtpose
