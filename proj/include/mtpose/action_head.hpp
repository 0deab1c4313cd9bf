#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtpose/conv.hpp"
#include "mtpose/ops.hpp"
#include "mtpose/pose_regression.hpp"
#include "mtpose/tensor.hpp"

namespace mtpose {

/// Confidence-weighted pose image for a batch of clips.
///
/// joints: [B·T, J, 3], confidence: [B·T, J]. Returns [B, T, J, dims] with
/// entry (b, t, j, :) = confidence · (x, y[, z]).
template <typename Real>
Tensor<Real> pose_feature_image(const Tensor<Real>& joints, const Tensor<Real>& confidence, int clip_length,
                                int dims = 3) {
    if (joints.rank() != 3 || joints.dim(2) != 3) {
        throw std::invalid_argument("pose_feature_image: joints must be [N,J,3], got " + shape_str(joints.shape()));
    }
    if (dims != 2 && dims != 3) throw std::invalid_argument("pose_feature_image: dims must be 2 or 3");
    const int n = joints.dim(0), nj = joints.dim(1);
    if (clip_length < 1 || n % clip_length != 0) {
        throw std::invalid_argument("pose_feature_image: " + std::to_string(n) + " frames is not a multiple of T=" +
                                    std::to_string(clip_length));
    }
    Tensor<Real> coords = joints;
    if (dims == 2) {
        // drop z: [N,J,3] -> [N·J,3] -> first two columns
        std::vector<Real> sel;
        sel.reserve(static_cast<std::size_t>(n) * nj * 2);
        const auto jv = joints.data();
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * nj; ++i) {
            sel.push_back(jv[i * 3]);
            sel.push_back(jv[i * 3 + 1]);
        }
        coords = make_result<Real>("select_xy", Shape{n, nj, 2}, std::move(sel), {joints},
                                   [joints](const std::vector<Real>& g) mutable {
                                       Real* gj = grad_target(joints);
                                       for (std::size_t i = 0; i < g.size() / 2; ++i) {
                                           gj[i * 3] += g[i * 2];
                                           gj[i * 3 + 1] += g[i * 2 + 1];
                                       }
                                   });
    }
    return reshape(scale_rows(coords, confidence), Shape{n / clip_length, clip_length, nj, dims});
}

/// Value-level form: T poses with identical joint counts -> [T, J, dims].
inline Tensor<float> encode_pose_features(const std::vector<Pose>& poses, int dims = 3) {
    if (poses.empty()) throw std::invalid_argument("encode_pose_features: empty pose sequence");
    const int nj = poses.front().num_joints();
    std::vector<float> joints, conf;
    for (const auto& p : poses) {
        if (p.num_joints() != nj || static_cast<int>(p.confidence.size()) != nj) {
            throw std::invalid_argument("encode_pose_features: inconsistent joint counts (" + std::to_string(nj) +
                                        " vs " + std::to_string(p.num_joints()) + ")");
        }
        for (int j = 0; j < nj; ++j) {
            joints.insert(joints.end(), p.joints[j].begin(), p.joints[j].end());
            conf.push_back(p.confidence[j]);
        }
    }
    const int t = static_cast<int>(poses.size());
    Tensor<float> jt(Shape{t, nj, 3}, std::move(joints));
    Tensor<float> ct(Shape{t, nj}, std::move(conf));
    return reshape(pose_feature_image(jt, ct, t, dims), Shape{t, nj, dims});
}

/// V[n, j, f] = Σ_{r,c} h[n, r, c, j] · Z[n, r, c, f].
/// z: [N, H, W, F], h: [N, H, W, J] -> [N, J, F] (rank-3 inputs give [J, F]).
template <typename Real>
Tensor<Real> extract_appearance_features(const Tensor<Real>& z, const Tensor<Real>& h) {
    const auto dz = detail::image_dims("extract_appearance_features", z);
    const auto dh = detail::image_dims("extract_appearance_features", h);
    if (dz.n != dh.n || dz.h != dh.h || dz.w != dh.w || dz.batched != dh.batched) {
        throw std::invalid_argument("extract_appearance_features: spatial mismatch between Z " +
                                    shape_str(z.shape()) + " and h " + shape_str(h.shape()));
    }
    const int hw = dz.h * dz.w, nf = dz.c, nj = dh.c;
    std::vector<Real> v(static_cast<std::size_t>(dz.n) * nj * nf, Real(0));
    const auto zv = z.data();
    const auto hv = h.data();
    for (int n = 0; n < dz.n; ++n) {
        Real* vn = &v[static_cast<std::size_t>(n) * nj * nf];
        for (int p = 0; p < hw; ++p) {
            const Real* zp = &zv[(static_cast<std::size_t>(n) * hw + p) * nf];
            const Real* hp = &hv[(static_cast<std::size_t>(n) * hw + p) * nj];
            for (int j = 0; j < nj; ++j) {
                const Real w = hp[j];
                Real* vj = vn + static_cast<std::size_t>(j) * nf;
                for (int f = 0; f < nf; ++f) vj[f] += w * zp[f];
            }
        }
    }
    Shape shape = dz.batched ? Shape{dz.n, nj, nf} : Shape{nj, nf};
    return make_result<Real>("appearance_pool", std::move(shape), std::move(v), {z, h},
                             [z, h, dz, hw, nf, nj](const std::vector<Real>& g) mutable {
                                 Real* gz = grad_target(z);
                                 Real* gh = grad_target(h);
                                 const auto zv = z.data();
                                 const auto hv = h.data();
                                 for (int n = 0; n < dz.n; ++n) {
                                     const Real* gn = &g[static_cast<std::size_t>(n) * nj * nf];
                                     for (int p = 0; p < hw; ++p) {
                                         const std::size_t zo = (static_cast<std::size_t>(n) * hw + p) * nf;
                                         const std::size_t ho = (static_cast<std::size_t>(n) * hw + p) * nj;
                                         for (int j = 0; j < nj; ++j) {
                                             const Real* gj = gn + static_cast<std::size_t>(j) * nf;
                                             if (gz) {
                                                 const Real w = hv[ho + j];
                                                 for (int f = 0; f < nf; ++f) gz[zo + f] += w * gj[f];
                                             }
                                             if (gh) {
                                                 Real acc = 0;
                                                 for (int f = 0; f < nf; ++f) acc += gj[f] * zv[zo + f];
                                                 gh[ho + j] += acc;
                                             }
                                         }
                                     }
                                 }
                             });
}

template <typename Real>
struct AggregationParams {
    Tensor<Real> pose_proj;        // [1, 1, pose_dims, N_v]
    Tensor<Real> pose_bias;        // [N_v]
    Tensor<Real> appearance_proj;  // [1, 1, N_f, N_v]
    Tensor<Real> appearance_bias;  // [N_v]
};

/// Y = P_pose∗pose + P_app∗V + Y_prev + Y_neighbor over the T×N_j grid.
/// pose: [B, T, J, C], appearance: [B, T, J, F]. Undefined prior-Y terms
/// contribute nothing.
template <typename Real>
Tensor<Real> aggregate_action_features(const Tensor<Real>& pose_feat, const Tensor<Real>& appearance_feat,
                                       const Tensor<Real>& y_prev_pyramid, const Tensor<Real>& y_neighbor_level,
                                       const AggregationParams<Real>& p) {
    if (pose_feat.rank() != 4 || appearance_feat.rank() != 4 || pose_feat.dim(0) != appearance_feat.dim(0) ||
        pose_feat.dim(1) != appearance_feat.dim(1) || pose_feat.dim(2) != appearance_feat.dim(2)) {
        throw std::invalid_argument("aggregate_action_features: T or N_j mismatch between pose " +
                                    shape_str(pose_feat.shape()) + " and appearance " +
                                    shape_str(appearance_feat.shape()));
    }
    auto y = add(conv2d(pose_feat, p.pose_proj, 1, Padding::same, p.pose_bias),
                 conv2d(appearance_feat, p.appearance_proj, 1, Padding::same, p.appearance_bias));
    for (const auto* prior : {&y_prev_pyramid, &y_neighbor_level}) {
        if (!prior->defined()) continue;
        if (prior->shape() != y.shape()) {
            throw std::invalid_argument("aggregate_action_features: prior action features " +
                                        shape_str(prior->shape()) + " vs " + shape_str(y.shape()));
        }
        y = add(y, *prior);
    }
    return y;
}

template <typename Real>
struct ActionHeadParams {
    Tensor<Real> conv1, bias1;  // [3, 3, N_v, N_v]
    Tensor<Real> conv2, bias2;  // [3, 3, N_v, N_v]
    Tensor<Real> fc, fc_bias;   // [N_v, N_a], [N_a]
};

template <typename Real>
struct ActionOutput {
    Tensor<Real> logits;  // [B, N_a]
    Tensor<Real> probs;   // [B, N_a]
};

/// Two 3×3 convolutions over the T×N_j grid, global average pooling, a
/// linear layer to N_a logits, softmax.
template <typename Real>
ActionOutput<Real> action_predict(const Tensor<Real>& y, const ActionHeadParams<Real>& p) {
    if (y.rank() != 4) throw std::invalid_argument("action_predict: expected [B,T,J,N_v], got " + shape_str(y.shape()));
    auto a = relu(conv2d(y, p.conv1, 1, Padding::same, p.bias1));
    a = relu(conv2d(a, p.conv2, 1, Padding::same, p.bias2));
    auto logits = linear(global_avg_pool(a), p.fc, p.fc_bias);
    auto probs = softmax_last(logits);
    return {logits, probs};
}

/// Probability vector over N_a actions.
struct ActionProbs {
    std::vector<double> values;

    int argmax() const {
        return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
    }
    bool valid(double tol = 1e-6) const {
        double s = 0;
        for (double v : values) {
            if (!(v >= 0.0)) return false;
            s += v;
        }
        return !values.empty() && std::abs(s - 1.0) <= tol;
    }
};

/// Rows of a [B, N_a] probability tensor as ActionProbs.
template <typename Real>
std::vector<ActionProbs> to_action_probs(const Tensor<Real>& probs) {
    const int b = probs.dim(0), na = probs.dim(1);
    std::vector<ActionProbs> out(b);
    for (int i = 0; i < b; ++i)
        for (int k = 0; k < na; ++k) out[i].values.push_back(static_cast<double>(probs[static_cast<std::size_t>(i) * na + k]));
    return out;
}

/// Arithmetic mean of per-clip probability vectors.
inline ActionProbs multi_clip_average(const std::vector<ActionProbs>& clips) {
    if (clips.empty()) throw std::invalid_argument("multi_clip_average: no clips");
    const std::size_t na = clips.front().values.size();
    ActionProbs out{std::vector<double>(na, 0.0)};
    for (const auto& c : clips) {
        if (c.values.size() != na) {
            throw std::invalid_argument("multi_clip_average: action count mismatch (" + std::to_string(na) + " vs " +
                                        std::to_string(c.values.size()) + ")");
        }
        for (std::size_t k = 0; k < na; ++k) out.values[k] += c.values[k];
    }
    for (auto& v : out.values) v /= static_cast<double>(clips.size());
    return out;
}

}  // namespace mtpose
