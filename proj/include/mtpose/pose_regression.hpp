#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtpose/conv.hpp"
#include "mtpose/ops.hpp"
#include "mtpose/tensor.hpp"

namespace mtpose {

// Heat-map tensors are [N, H, W, J] (or [H, W, J]): one map per joint in the
// channel axis, matching the NHWC feature layout.

/// Per-joint softmax over all H·W cells.
template <typename Real>
Tensor<Real> spatial_softmax(const Tensor<Real>& logits) {
    const auto d = detail::image_dims("spatial_softmax", logits);
    const int hw = d.h * d.w, nj = d.c;
    std::vector<Real> y(logits.numel());
    const auto x = logits.data();
    std::vector<Real> mx(nj), z(nj);
    for (int n = 0; n < d.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * hw * nj;
        std::fill(mx.begin(), mx.end(), -INFINITY);
        for (int p = 0; p < hw; ++p)
            for (int j = 0; j < nj; ++j) mx[j] = std::max(mx[j], x[base + p * nj + j]);
        std::fill(z.begin(), z.end(), Real(0));
        for (int p = 0; p < hw; ++p)
            for (int j = 0; j < nj; ++j) {
                const Real e = std::exp(x[base + p * nj + j] - mx[j]);
                y[base + p * nj + j] = e;
                z[j] += e;
            }
        for (int p = 0; p < hw; ++p)
            for (int j = 0; j < nj; ++j) y[base + p * nj + j] /= z[j];
    }
    std::vector<Real> saved = y;
    return make_result<Real>("spatial_softmax", logits.shape(), std::move(y), {logits},
                             [logits, saved = std::move(saved), d, hw, nj](const std::vector<Real>& g) mutable {
                                 Real* dx = grad_target(logits);
                                 std::vector<Real> dot(nj);
                                 for (int n = 0; n < d.n; ++n) {
                                     const std::size_t base = static_cast<std::size_t>(n) * hw * nj;
                                     std::fill(dot.begin(), dot.end(), Real(0));
                                     for (int p = 0; p < hw; ++p)
                                         for (int j = 0; j < nj; ++j) dot[j] += g[base + p * nj + j] * saved[base + p * nj + j];
                                     for (int p = 0; p < hw; ++p)
                                         for (int j = 0; j < nj; ++j) {
                                             const std::size_t i = base + p * nj + j;
                                             dx[i] += saved[i] * (g[i] - dot[j]);
                                         }
                                 }
                             });
}

/// Expected pixel-centre coordinates under each joint's map:
/// x = Σ h[r,c]·(c+0.5)/W, y = Σ h[r,c]·(r+0.5)/H. Output [N, J, 2] as (x, y).
template <typename Real>
Tensor<Real> soft_argmax_2d(const Tensor<Real>& h) {
    const auto d = detail::image_dims("soft_argmax_2d", h);
    const int nj = d.c;
    std::vector<Real> out(static_cast<std::size_t>(d.n) * nj * 2, Real(0));
    const auto hv = h.data();
    for (int n = 0; n < d.n; ++n)
        for (int r = 0; r < d.h; ++r) {
            const Real yr = (static_cast<Real>(r) + Real(0.5)) / static_cast<Real>(d.h);
            for (int c = 0; c < d.w; ++c) {
                const Real xc = (static_cast<Real>(c) + Real(0.5)) / static_cast<Real>(d.w);
                const std::size_t base = ((static_cast<std::size_t>(n) * d.h + r) * d.w + c) * nj;
                for (int j = 0; j < nj; ++j) {
                    out[(static_cast<std::size_t>(n) * nj + j) * 2 + 0] += hv[base + j] * xc;
                    out[(static_cast<std::size_t>(n) * nj + j) * 2 + 1] += hv[base + j] * yr;
                }
            }
        }
    Shape shape = d.batched ? Shape{d.n, nj, 2} : Shape{nj, 2};
    return make_result<Real>("soft_argmax_2d", std::move(shape), std::move(out), {h},
                             [h, d, nj](const std::vector<Real>& g) mutable {
                                 Real* dh = grad_target(h);
                                 for (int n = 0; n < d.n; ++n)
                                     for (int r = 0; r < d.h; ++r) {
                                         const Real yr = (static_cast<Real>(r) + Real(0.5)) / static_cast<Real>(d.h);
                                         for (int c = 0; c < d.w; ++c) {
                                             const Real xc =
                                                 (static_cast<Real>(c) + Real(0.5)) / static_cast<Real>(d.w);
                                             const std::size_t base = ((static_cast<std::size_t>(n) * d.h + r) * d.w + c) * nj;
                                             for (int j = 0; j < nj; ++j) {
                                                 const std::size_t o = (static_cast<std::size_t>(n) * nj + j) * 2;
                                                 dh[base + j] += g[o] * xc + g[o + 1] * yr;
                                             }
                                         }
                                     }
                             });
}

/// z_j = Σ_{r,c} h_j[r,c] · d_j[r,c]. Output [N, J].
template <typename Real>
Tensor<Real> depth_regress(const Tensor<Real>& h, const Tensor<Real>& d) {
    if (h.shape() != d.shape()) {
        throw std::invalid_argument("depth_regress: probability maps " + shape_str(h.shape()) +
                                    " vs depth maps " + shape_str(d.shape()));
    }
    const auto dims = detail::image_dims("depth_regress", h);
    const int hw = dims.h * dims.w, nj = dims.c;
    std::vector<Real> z(static_cast<std::size_t>(dims.n) * nj, Real(0));
    const auto hv = h.data();
    const auto dv = d.data();
    for (int n = 0; n < dims.n; ++n)
        for (int p = 0; p < hw; ++p)
            for (int j = 0; j < nj; ++j) {
                const std::size_t i = (static_cast<std::size_t>(n) * hw + p) * nj + j;
                z[static_cast<std::size_t>(n) * nj + j] += hv[i] * dv[i];
            }
    Shape shape = dims.batched ? Shape{dims.n, nj} : Shape{nj};
    return make_result<Real>("depth_regress", std::move(shape), std::move(z), {h, d},
                             [h, d, dims, hw, nj](const std::vector<Real>& g) mutable {
                                 Real* gh = grad_target(h);
                                 Real* gd = grad_target(d);
                                 const auto hv = h.data();
                                 const auto dv = d.data();
                                 for (int n = 0; n < dims.n; ++n)
                                     for (int p = 0; p < hw; ++p)
                                         for (int j = 0; j < nj; ++j) {
                                             const std::size_t i = (static_cast<std::size_t>(n) * hw + p) * nj + j;
                                             const Real gz = g[static_cast<std::size_t>(n) * nj + j];
                                             if (gh) gh[i] += gz * dv[i];
                                             if (gd) gd[i] += gz * hv[i];
                                         }
                             });
}

/// Per-joint maximum of the probability map. Output [N, J]. The gradient
/// goes to the first maximal cell in row-major order.
template <typename Real>
Tensor<Real> joint_confidence(const Tensor<Real>& h) {
    const auto d = detail::image_dims("joint_confidence", h);
    const int hw = d.h * d.w, nj = d.c;
    std::vector<Real> out(static_cast<std::size_t>(d.n) * nj);
    std::vector<std::size_t> where(out.size());
    const auto hv = h.data();
    for (int n = 0; n < d.n; ++n)
        for (int j = 0; j < nj; ++j) {
            std::size_t best = static_cast<std::size_t>(n) * hw * nj + j;
            for (int p = 1; p < hw; ++p) {
                const std::size_t i = (static_cast<std::size_t>(n) * hw + p) * nj + j;
                if (hv[i] > hv[best]) best = i;
            }
            out[static_cast<std::size_t>(n) * nj + j] = hv[best];
            where[static_cast<std::size_t>(n) * nj + j] = best;
        }
    Shape shape = d.batched ? Shape{d.n, nj} : Shape{nj};
    return make_result<Real>("joint_confidence", std::move(shape), std::move(out), {h},
                             [h, where = std::move(where)](const std::vector<Real>& g) mutable {
                                 Real* gh = grad_target(h);
                                 for (std::size_t i = 0; i < g.size(); ++i) gh[where[i]] += g[i];
                             });
}

/// X = W_r∗h + W_s∗d + Z′ + Z with 1×1 projections W_r, W_s: [1,1,N_j,N_f].
template <typename Real>
Tensor<Real> pose_reinject(const Tensor<Real>& h, const Tensor<Real>& d, const Tensor<Real>& z_prime,
                           const Tensor<Real>& z_feat, const Tensor<Real>& w_r, const Tensor<Real>& w_s) {
    if (h.shape() != d.shape()) {
        throw std::invalid_argument("pose_reinject: h " + shape_str(h.shape()) + " vs d " + shape_str(d.shape()));
    }
    if (z_prime.shape() != z_feat.shape()) {
        throw std::invalid_argument("pose_reinject: Z' " + shape_str(z_prime.shape()) + " vs Z " +
                                    shape_str(z_feat.shape()));
    }
    const auto ph = conv2d(h, w_r, 1, Padding::same);
    const auto pd = conv2d(d, w_s, 1, Padding::same);
    if (ph.shape() != z_feat.shape() || pd.shape() != z_feat.shape()) {
        throw std::invalid_argument("pose_reinject: projected maps " + shape_str(ph.shape()) +
                                    " do not match features " + shape_str(z_feat.shape()));
    }
    return add(add(add(ph, pd), z_prime), z_feat);
}

/// Batched pose: joints [N, J, 3] as (x, y, z) and confidence [N, J].
template <typename Real>
struct PoseTensors {
    Tensor<Real> joints;
    Tensor<Real> confidence;
};

/// Root-depth value used for z when only 2D is regressed.
inline constexpr double kRootDepth = 0.5;

/// Concatenate (x, y) and z. An undefined `z` selects 2D mode, where every
/// z equals the root depth 0.5.
template <typename Real>
PoseTensors<Real> assemble_pose(const Tensor<Real>& xy, const Tensor<Real>& z, const Tensor<Real>& confidence) {
    if (xy.rank() < 2 || xy.dim(-1) != 2) throw std::invalid_argument("assemble_pose: xy must end in 2, got " + shape_str(xy.shape()));
    Shape lead = xy.shape();
    lead.pop_back();
    if (confidence.shape() != lead) {
        throw std::invalid_argument("assemble_pose: joint-count mismatch between xy " + shape_str(xy.shape()) +
                                    " and confidence " + shape_str(confidence.shape()));
    }
    Shape zshape = lead;
    zshape.push_back(1);
    Tensor<Real> zcol;
    if (z.defined()) {
        if (z.shape() != lead) {
            throw std::invalid_argument("assemble_pose: joint-count mismatch between xy " + shape_str(xy.shape()) +
                                        " and z " + shape_str(z.shape()));
        }
        zcol = reshape(z, zshape);
    } else {
        zcol = Tensor<Real>::full(zshape, static_cast<Real>(kRootDepth));
    }
    return {concat_last<Real>({xy, zcol}), confidence};
}

/// Plain-value pose for one frame.
struct Pose {
    std::vector<std::array<float, 3>> joints;
    std::vector<float> confidence;

    int num_joints() const { return static_cast<int>(joints.size()); }
};

/// Split batched pose tensors into per-sample Pose values.
template <typename Real>
std::vector<Pose> to_poses(const PoseTensors<Real>& p) {
    const int nj = p.joints.dim(-2);
    const std::size_t n = p.joints.numel() / (static_cast<std::size_t>(nj) * 3);
    std::vector<Pose> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].joints.resize(nj);
        out[i].confidence.resize(nj);
        for (int j = 0; j < nj; ++j) {
            for (int a = 0; a < 3; ++a)
                out[i].joints[j][a] = static_cast<float>(p.joints[(i * nj + j) * 3 + a]);
            out[i].confidence[j] = static_cast<float>(p.confidence[i * nj + j]);
        }
    }
    return out;
}

}  // namespace mtpose
