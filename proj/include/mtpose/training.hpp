#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtpose/action_head.hpp"
#include "mtpose/checkpoint.hpp"
#include "mtpose/config.hpp"
#include "mtpose/data_synth.hpp"
#include "mtpose/network.hpp"
#include "mtpose/ops.hpp"
#include "mtpose/pose_regression.hpp"
#include "mtpose/tensor.hpp"

namespace mtpose {

// ---------------------------------------------------------------- losses

/// (1/N_j)·Σ_j (‖e_j‖₁ + ‖e_j‖₂²) over unmasked axes, averaged over the
/// batch. pred, gt, mask: [N, J, 3] (or [J, 3]); gt and mask carry no
/// gradient.
template <typename Real>
Tensor<Real> elastic_net_loss(const Tensor<Real>& pred, const Tensor<Real>& gt, const Tensor<Real>& mask) {
    if (pred.shape() != gt.shape() || pred.shape() != mask.shape()) {
        throw std::invalid_argument("elastic_net_loss: pred " + shape_str(pred.shape()) + ", gt " +
                                    shape_str(gt.shape()) + ", mask " + shape_str(mask.shape()) + " must agree");
    }
    if (pred.rank() < 2) throw std::invalid_argument("elastic_net_loss: expected [..., J, D], got " + shape_str(pred.shape()));
    const Real rows = static_cast<Real>(pred.numel() / static_cast<std::size_t>(pred.dim(-1)));
    const auto e = mul(sub(pred, gt.detach()), mask.detach());
    return scale(add(sum(abs(e)), sum(square(e))), Real(1) / rows);
}

inline constexpr double kProbabilityFloor = 1e-7;

/// Mean binary cross-entropy with log arguments clamped at 1e-7.
template <typename Real>
Tensor<Real> confidence_loss(const Tensor<Real>& pred, const Tensor<Real>& gt) {
    if (pred.shape() != gt.shape()) {
        throw std::invalid_argument("confidence_loss: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
    }
    for (const auto* t : {&pred, &gt})
        for (Real v : t->data())
            if (!(v >= 0 && v <= 1)) throw std::invalid_argument("confidence_loss: value outside [0,1]");
    const Real floor = static_cast<Real>(kProbabilityFloor);
    const auto g = gt.detach();
    const auto one_minus_g = add_scalar(scale(g, Real(-1)), Real(1));
    const auto log_p = log_clamped(pred, floor);
    const auto log_q = log_clamped(add_scalar(scale(pred, Real(-1)), Real(1)), floor);
    const auto ll = add(mul(g, log_p), mul(one_minus_g, log_q));
    return scale(sum(ll), Real(-1) / static_cast<Real>(pred.numel()));
}

/// Mean of -log(probs[label]) with the probability clamped at 1e-7.
template <typename Real>
Tensor<Real> action_loss(const Tensor<Real>& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2 || static_cast<int>(labels.size()) != probs.dim(0)) {
        throw std::invalid_argument("action_loss: " + std::to_string(labels.size()) + " labels for probabilities " +
                                    shape_str(probs.shape()));
    }
    for (int l : labels) {
        if (l < 0 || l >= probs.dim(1)) {
            throw std::invalid_argument("action_loss: label " + std::to_string(l) + " outside [0," +
                                        std::to_string(probs.dim(1)) + ")");
        }
    }
    const auto p = pick(probs, labels);
    return scale(sum(log_clamped(p, static_cast<Real>(kProbabilityFloor))), Real(-1) / static_cast<Real>(labels.size()));
}

struct LossWeights {
    double pose = 1.0;
    double confidence = 0.01;
    double action = 0.01;
};

/// Σ over blocks of w_p·pose + w_c·confidence + w_a·action. Undefined terms
/// (absent in the current mode) and zero-weight terms are left out.
template <typename Real>
Tensor<Real> total_loss(const std::vector<Tensor<Real>>& pose, const std::vector<Tensor<Real>>& confidence,
                        const std::vector<Tensor<Real>>& action, const LossWeights& w = {}) {
    std::vector<Tensor<Real>> terms;
    auto collect = [&](const std::vector<Tensor<Real>>& v, double weight) {
        if (weight == 0.0) return;
        for (const auto& t : v)
            if (t.defined()) terms.push_back(scale(t, static_cast<Real>(weight)));
    };
    collect(pose, w.pose);
    collect(confidence, w.confidence);
    collect(action, w.action);
    if (terms.empty()) return Tensor<Real>::scalar(Real(0));
    return add_all(terms);
}

// ------------------------------------------------------- pose normalisation

/// Crop box in pixels.
struct CropBox {
    double x0 = 0, y0 = 0, width = 0, height = 0;
};

inline constexpr double kDepthRangeMm = 2000.0;

/// (u, v) pixels and depth in mm -> normalised (x, y, z). The root joint
/// (index `root`) gets z = 0.5; depth spans `depth_range_mm` over [0, 1].
inline std::vector<std::array<double, 3>> normalize_pose(const std::vector<std::array<double, 3>>& raw, const CropBox& crop,
                                                         double depth_range_mm = kDepthRangeMm, int root = 0) {
    if (!(crop.width > 0) || !(crop.height > 0)) throw std::invalid_argument("normalize_pose: degenerate crop box");
    if (root < 0 || root >= static_cast<int>(raw.size())) throw std::invalid_argument("normalize_pose: bad root index");
    const double root_depth = raw[root][2];
    std::vector<std::array<double, 3>> out(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
        out[j] = {(raw[j][0] - crop.x0) / crop.width, (raw[j][1] - crop.y0) / crop.height,
                  std::clamp(0.5 + (raw[j][2] - root_depth) / depth_range_mm, 0.0, 1.0)};
    }
    return out;
}

inline std::vector<std::array<double, 3>> denormalize_pose(const std::vector<std::array<double, 3>>& norm,
                                                           const CropBox& crop, double root_depth_mm,
                                                           double depth_range_mm = kDepthRangeMm) {
    if (!(crop.width > 0) || !(crop.height > 0)) throw std::invalid_argument("denormalize_pose: degenerate crop box");
    std::vector<std::array<double, 3>> out(norm.size());
    for (std::size_t j = 0; j < norm.size(); ++j) {
        out[j] = {crop.x0 + norm[j][0] * crop.width, crop.y0 + norm[j][1] * crop.height,
                  root_depth_mm + (norm[j][2] - 0.5) * depth_range_mm};
    }
    return out;
}

// ---------------------------------------------------------- augmentation

/// One labelled still image.
struct PoseSample {
    int height = 0, width = 0;
    std::vector<float> image;                 // [H, W, 3]
    std::vector<std::array<float, 3>> pose;   // normalised
    std::vector<std::array<float, 3>> mask;   // per-axis availability
    std::vector<float> confidence;
    float head_size = 0;
    float mm_per_pixel = 0;
};

inline PoseSample pose_sample(const PoseDataset& ds, int i) {
    if (i < 0 || i >= ds.size()) throw std::out_of_range("pose_sample: index " + std::to_string(i));
    PoseSample s;
    s.height = ds.height;
    s.width = ds.width;
    const auto stride = ds.image_stride();
    s.image.assign(ds.images.begin() + static_cast<std::ptrdiff_t>(i * stride),
                   ds.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
    s.pose.resize(ds.joints);
    s.mask.resize(ds.joints);
    s.confidence.resize(ds.joints);
    for (int j = 0; j < ds.joints; ++j) {
        const std::size_t o = static_cast<std::size_t>(i) * ds.joints + j;
        for (int a = 0; a < 3; ++a) {
            s.pose[j][a] = ds.poses[o * 3 + a];
            s.mask[j][a] = ds.mask[o * 3 + a];
        }
        s.confidence[j] = ds.confidence[o];
    }
    s.head_size = ds.head_size[i];
    s.mm_per_pixel = ds.mm_per_pixel[i];
    return s;
}

/// Geometric and photometric augmentation parameters. Rotation is about the
/// image centre with [cos −sin; sin cos] acting on (x, y) in image
/// coordinates (y down).
struct AugmentParams {
    double angle_deg = 0;
    double scale = 1;
    bool flip = false;
    std::array<double, 3> color_gain{1, 1, 1};

    bool identity() const {
        return angle_deg == 0 && scale == 1 && !flip && color_gain == std::array<double, 3>{1, 1, 1};
    }
};

struct AugmentConfig {
    bool enabled = true;
    double max_rotation_deg = 40;
    double scale_min = 0.7, scale_max = 1.3;
    bool flip = true;
    double color_shift = 0.2;  // gain drawn from [1 - s, 1 + s] per channel
    int temporal_min = 1, temporal_max = 2;
};

inline AugmentParams sample_augment(const AugmentConfig& cfg, std::mt19937_64& rng) {
    AugmentParams p;
    if (!cfg.enabled) return p;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    p.angle_deg = (2 * u(rng) - 1) * cfg.max_rotation_deg;
    p.scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * u(rng);
    p.flip = cfg.flip && u(rng) < 0.5;
    for (auto& g : p.color_gain) g = 1 + (2 * u(rng) - 1) * cfg.color_shift;
    return p;
}

/// Forward map of a normalised point (flip, then rotate and scale about
/// the centre).
inline std::array<double, 2> augment_point(double x, double y, const AugmentParams& p) {
    double qx = x - 0.5, qy = y - 0.5;
    if (p.flip) qx = -qx;
    const double a = p.angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    return {0.5 + p.scale * (c * qx - s * qy), 0.5 + p.scale * (s * qx + c * qy)};
}

namespace detail {

/// Resamples an [H, W, 3] image under the augmentation (bilinear, zero
/// outside the source).
inline std::vector<float> warp_image(const std::vector<float>& img, int h, int w, const AugmentParams& p) {
    std::vector<float> out(img.size(), 0.0f);
    const double a = p.angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col) {
            // inverse map of the output pixel centre
            const double ox = (col + 0.5) / w - 0.5, oy = (r + 0.5) / h - 0.5;
            double qx = (c * ox + s * oy) / p.scale;
            const double qy = (-s * ox + c * oy) / p.scale;
            if (p.flip) qx = -qx;
            const double sx = (qx + 0.5) * w - 0.5, sy = (qy + 0.5) * h - 0.5;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            float* o = &out[(static_cast<std::size_t>(r) * w + col) * 3];
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const int yy = y0 + dy, xx = x0 + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    const double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
                    if (wgt == 0) continue;
                    const float* in = &img[(static_cast<std::size_t>(yy) * w + xx) * 3];
                    for (int ch = 0; ch < 3; ++ch) o[ch] += static_cast<float>(wgt * in[ch]);
                }
        }
    return out;
}

}  // namespace detail

/// Applies `p` to image and pose together. Flipping swaps the joints of
/// each pair; joints leaving the crop get confidence 0 and lose their x/y
/// supervision.
inline PoseSample augment(const PoseSample& in, const AugmentParams& p,
                          const std::vector<std::array<int, 2>>& flip_pairs) {
    if (p.identity()) return in;
    PoseSample out = in;
    if (p.angle_deg != 0 || p.scale != 1 || p.flip) out.image = detail::warp_image(in.image, in.height, in.width, p);
    for (std::size_t i = 0; i < out.image.size(); ++i) {
        out.image[i] = static_cast<float>(std::clamp(out.image[i] * p.color_gain[i % 3], 0.0, 1.0));
    }
    const int nj = static_cast<int>(in.pose.size());
    std::vector<int> src(nj);
    for (int j = 0; j < nj; ++j) src[j] = j;
    if (p.flip) {
        for (const auto& fp : flip_pairs) {
            if (fp[0] >= nj || fp[1] >= nj) throw std::invalid_argument("augment: flip pair outside joint range");
            std::swap(src[fp[0]], src[fp[1]]);
        }
    }
    for (int j = 0; j < nj; ++j) {
        const int k = src[j];
        const auto q = augment_point(in.pose[k][0], in.pose[k][1], p);
        out.pose[j] = {static_cast<float>(q[0]), static_cast<float>(q[1]), in.pose[k][2]};
        out.mask[j] = in.mask[k];
        out.confidence[j] = in.confidence[k];
        if (q[0] < 0 || q[0] > 1 || q[1] < 0 || q[1] > 1) {
            out.confidence[j] = 0;
            out.mask[j][0] = out.mask[j][1] = 0;
        }
    }
    out.head_size = static_cast<float>(in.head_size * p.scale);
    out.mm_per_pixel = static_cast<float>(in.mm_per_pixel / p.scale);
    return out;
}

/// Frame indices of a clip of `clip_length` frames taken every `factor`
/// frames from `start`.
inline std::vector<int> temporal_subsample(int video_length, int clip_length, int factor, int start) {
    if (factor < 1 || clip_length < 1) throw std::invalid_argument("temporal_subsample: factor and T must be >= 1");
    const int last = start + (clip_length - 1) * factor;
    if (start < 0 || last >= video_length) {
        throw std::invalid_argument("temporal_subsample: clip [" + std::to_string(start) + ".." + std::to_string(last) +
                                    "] outside a video of " + std::to_string(video_length) + " frames");
    }
    std::vector<int> idx(clip_length);
    for (int t = 0; t < clip_length; ++t) idx[t] = start + t * factor;
    return idx;
}

// ------------------------------------------------------------- scheduler

enum class BatchKind { pose, action };

struct BatchRef {
    BatchKind kind = BatchKind::pose;
    std::uint64_t iteration = 0;
    std::vector<std::pair<int, int>> items;  // pose: (source, sample); action: (0, video)
    bool operator==(const BatchRef&) const = default;
};

/// Deterministic batch stream: batch i is a pure function of (seed, i), so
/// a resumed run sees the same batches. Pose batches draw each sample's
/// source from the mixing ratios.
class AlternatingBatchScheduler {
  public:
    AlternatingBatchScheduler(std::vector<int> pose_source_sizes, std::vector<double> ratios, int action_count,
                              int pose_batch, int action_batch, std::uint64_t seed)
        : sizes_(std::move(pose_source_sizes)),
          ratios_(std::move(ratios)),
          action_count_(action_count),
          pose_batch_(pose_batch),
          action_batch_(action_batch),
          seed_(seed) {
        if (ratios_.empty()) ratios_.assign(sizes_.size(), 1.0);
        if (ratios_.size() != sizes_.size()) throw std::invalid_argument("scheduler: one ratio per pose source required");
        for (std::size_t k = 0; k < sizes_.size(); ++k) {
            if (ratios_[k] < 0) throw std::invalid_argument("scheduler: negative mixing ratio");
            if (ratios_[k] > 0 && sizes_[k] <= 0) throw std::invalid_argument("scheduler: empty pose dataset");
        }
        if (pose_batch_ < 1 || action_batch_ < 1) throw std::invalid_argument("scheduler: batch sizes must be >= 1");
    }

    bool has_pose() const {
        for (std::size_t k = 0; k < sizes_.size(); ++k)
            if (ratios_[k] > 0 && sizes_[k] > 0) return true;
        return false;
    }
    bool has_action() const { return action_count_ > 0; }

    /// Kind of batch i in the alternating stream (pose first).
    static BatchKind alternating_kind(std::uint64_t i) { return i % 2 == 0 ? BatchKind::pose : BatchKind::action; }

    BatchRef batch(std::uint64_t i, BatchKind kind) const {
        BatchRef b;
        b.kind = kind;
        b.iteration = i;
        std::mt19937_64 rng(detail::mix_seed(seed_, i * 2 + (kind == BatchKind::action ? 1 : 0)));
        if (kind == BatchKind::pose) {
            if (!has_pose()) throw std::invalid_argument("scheduler: empty pose dataset");
            std::discrete_distribution<int> pick_source(ratios_.begin(), ratios_.end());
            for (int k = 0; k < pose_batch_; ++k) {
                const int s = pick_source(rng);
                b.items.emplace_back(s, std::uniform_int_distribution<int>(0, sizes_[s] - 1)(rng));
            }
        } else {
            if (!has_action()) throw std::invalid_argument("scheduler: empty action dataset");
            for (int k = 0; k < action_batch_; ++k)
                b.items.emplace_back(0, std::uniform_int_distribution<int>(0, action_count_ - 1)(rng));
        }
        return b;
    }

    /// `count` batches of the strictly alternating stream starting at `first`.
    std::vector<BatchRef> stream(std::uint64_t first, std::uint64_t count) const {
        std::vector<BatchRef> out;
        for (std::uint64_t i = first; i < first + count; ++i) out.push_back(batch(i, alternating_kind(i)));
        return out;
    }

  private:
    std::vector<int> sizes_;
    std::vector<double> ratios_;
    int action_count_;
    int pose_batch_, action_batch_;
    std::uint64_t seed_;
};

// ------------------------------------------------------------- optimizers

struct OptimizerConfig {
    std::string kind = "rmsprop";  // rmsprop | sgd
    double learning_rate = 1e-3;
    double rho = 0.9;
    double epsilon = 1e-7;
    double momentum = 0.9;
    bool nesterov = true;
};

/// RMSprop or SGD with momentum over named parameters. Slot state is keyed
/// by parameter name so it survives checkpoints.
class Optimizer {
  public:
    Optimizer() = default;
    explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.kind != "rmsprop" && cfg_.kind != "sgd") {
            throw std::invalid_argument("optimizer: unknown kind '" + cfg_.kind + "' (rmsprop|sgd)");
        }
    }

    const OptimizerConfig& config() const { return cfg_; }

    /// Updates every parameter that requires a gradient and has one.
    void step(std::vector<ParamEntry<float>>& params, double lr) {
        const float rate = static_cast<float>(lr);
        for (auto& p : params) {
            if (!p.trainable || !p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
            auto& slot = slots_[p.name];
            if (slot.size() != p.tensor.numel()) slot.assign(p.tensor.numel(), 0.0f);
            auto w = p.tensor.data();
            const auto g = p.tensor.grad();
            if (cfg_.kind == "rmsprop") {
                const float rho = static_cast<float>(cfg_.rho), eps = static_cast<float>(cfg_.epsilon);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    slot[i] = rho * slot[i] + (1 - rho) * g[i] * g[i];
                    w[i] -= rate * g[i] / (std::sqrt(slot[i]) + eps);
                }
            } else {
                const float mu = static_cast<float>(cfg_.momentum);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    slot[i] = mu * slot[i] + g[i];
                    w[i] -= rate * (cfg_.nesterov ? g[i] + mu * slot[i] : slot[i]);
                }
            }
        }
    }

    void save(Checkpoint& ck) const {
        ck.meta.set("opt.kind", cfg_.kind);
        for (const auto& [name, v] : slots_) ck.tensors.push_back({"opt/" + name, "slot", Shape{static_cast<int>(v.size())}, v});
    }

    void load(const Checkpoint& ck) {
        slots_.clear();
        if (ck.meta.has("opt.kind") && ck.meta.get("opt.kind", "") != cfg_.kind) {
            throw std::invalid_argument("checkpoint optimizer '" + ck.meta.get("opt.kind", "") + "' differs from '" +
                                        cfg_.kind + "'");
        }
        for (const auto& t : ck.tensors)
            if (t.name.rfind("opt/", 0) == 0) slots_[t.name.substr(4)] = t.data;
    }

    const std::map<std::string, std::vector<float>>& slots() const { return slots_; }

  private:
    OptimizerConfig cfg_;
    std::map<std::string, std::vector<float>> slots_;
};

// ---------------------------------------------------------------- metrics

/// Percentage of visible joints whose 2D error is strictly below
/// threshold·head_size. pred/gt: normalised poses; visible may be empty
/// (all joints count).
inline double evaluate_pckh(const std::vector<Pose>& pred, const std::vector<Pose>& gt, const std::vector<float>& head_size,
                            double threshold = 0.5) {
    if (pred.empty()) throw std::invalid_argument("evaluate_pckh: empty evaluation set");
    if (pred.size() != gt.size() || head_size.size() != gt.size()) {
        throw std::invalid_argument("evaluate_pckh: " + std::to_string(pred.size()) + " predictions, " +
                                    std::to_string(gt.size()) + " ground truths, " + std::to_string(head_size.size()) +
                                    " head sizes");
    }
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].num_joints() != gt[i].num_joints()) throw std::invalid_argument("evaluate_pckh: joint count mismatch");
        for (int j = 0; j < gt[i].num_joints(); ++j) {
            if (!gt[i].confidence.empty() && gt[i].confidence[j] <= 0) continue;
            const double dx = pred[i].joints[j][0] - gt[i].joints[j][0];
            const double dy = pred[i].joints[j][1] - gt[i].joints[j][1];
            ++total;
            if (std::sqrt(dx * dx + dy * dy) < threshold * head_size[i]) ++hits;
        }
    }
    if (total == 0) throw std::invalid_argument("evaluate_pckh: no visible joints");
    return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

/// Mean per-joint Euclidean error after aligning root joints. Poses are
/// joint lists in millimetres.
inline double evaluate_mpjpe(const std::vector<std::vector<std::array<double, 3>>>& pred,
                             const std::vector<std::vector<std::array<double, 3>>>& gt, int root = 0) {
    if (pred.empty()) throw std::invalid_argument("evaluate_mpjpe: empty evaluation set");
    if (pred.size() != gt.size()) throw std::invalid_argument("evaluate_mpjpe: prediction/ground-truth count mismatch");
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != gt[i].size() || root >= static_cast<int>(gt[i].size())) {
            throw std::invalid_argument("evaluate_mpjpe: joint count mismatch");
        }
        for (std::size_t j = 0; j < gt[i].size(); ++j) {
            double d2 = 0;
            for (int a = 0; a < 3; ++a) {
                const double e = (pred[i][j][a] - pred[i][root][a]) - (gt[i][j][a] - gt[i][root][a]);
                d2 += e * e;
            }
            acc += std::sqrt(d2);
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

/// Normalised pose -> millimetres (x, y via the sample scale, z via the
/// depth range).
inline std::vector<std::array<double, 3>> pose_to_mm(const Pose& p, int width, int height, double mm_per_pixel,
                                                     double depth_range_mm = kDepthRangeMm) {
    std::vector<std::array<double, 3>> out(p.joints.size());
    for (std::size_t j = 0; j < p.joints.size(); ++j) {
        out[j] = {p.joints[j][0] * width * mm_per_pixel, p.joints[j][1] * height * mm_per_pixel,
                  (p.joints[j][2] - 0.5) * depth_range_mm};
    }
    return out;
}

inline double evaluate_action_accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
    if (predicted.empty()) throw std::invalid_argument("evaluate_action_accuracy: empty evaluation set");
    if (predicted.size() != labels.size()) throw std::invalid_argument("evaluate_action_accuracy: count mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
    return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ------------------------------------------------------------- inference

inline Tensor<float> pose_images(const PoseDataset& ds, int first, int count) {
    const auto stride = ds.image_stride();
    std::vector<float> img(ds.images.begin() + static_cast<std::ptrdiff_t>(first * stride),
                           ds.images.begin() + static_cast<std::ptrdiff_t>((first + count) * stride));
    return Tensor<float>(Shape{count, ds.height, ds.width, 3}, std::move(img));
}

inline std::vector<Pose> dataset_poses(const PoseDataset& ds) {
    std::vector<Pose> out(ds.size());
    for (int i = 0; i < ds.size(); ++i) {
        const auto s = pose_sample(ds, i);
        for (int j = 0; j < ds.joints; ++j) out[i].joints.push_back(s.pose[j]);
        out[i].confidence = s.confidence;
    }
    return out;
}

/// Poses of the block `block` (default last) for every sample, eval mode.
inline std::vector<Pose> predict_poses(const Network<float>& net, const PoseDataset& ds, int batch = 16, int block = -1) {
    NoGradGuard guard;
    std::vector<Pose> out;
    for (int i = 0; i < ds.size(); i += batch) {
        const int n = std::min(batch, ds.size() - i);
        const auto res = net.forward(pose_images(ds, i, n));
        const auto& b = block < 0 ? res.last() : res.blocks.at(block);
        auto poses = to_poses(b.pose);
        out.insert(out.end(), poses.begin(), poses.end());
    }
    return out;
}

struct PoseMetrics {
    double pckh = 0;
    double mpjpe_mm = 0;
};

inline PoseMetrics evaluate_pose_model(const Network<float>& net, const PoseDataset& ds, int block = -1) {
    const auto pred = predict_poses(net, ds, 16, block);
    const auto gt = dataset_poses(ds);
    PoseMetrics m;
    m.pckh = evaluate_pckh(pred, gt, ds.head_size);
    std::vector<std::vector<std::array<double, 3>>> pm, gm;
    for (int i = 0; i < ds.size(); ++i) {
        pm.push_back(pose_to_mm(pred[i], ds.width, ds.height, ds.mm_per_pixel[i]));
        gm.push_back(pose_to_mm(gt[i], ds.width, ds.height, ds.mm_per_pixel[i]));
    }
    m.mpjpe_mm = evaluate_mpjpe(pm, gm);
    return m;
}

/// Frames of video `v` at `frame_idx`, stacked as [T, H, W, 3] data.
inline void append_clip(const ActionDataset& ds, int v, const std::vector<int>& frame_idx, std::vector<float>& dst) {
    const auto stride = ds.image_stride();
    for (int f : frame_idx) {
        const auto off = (static_cast<std::size_t>(v) * ds.frames + f) * stride;
        dst.insert(dst.end(), ds.images.begin() + static_cast<std::ptrdiff_t>(off),
                   ds.images.begin() + static_cast<std::ptrdiff_t>(off + stride));
    }
}

/// Per-video action probabilities of the last block: one centred clip
/// (single) or the average over T/2-strided clips (multi).
inline std::vector<ActionProbs> predict_actions(const Network<float>& net, const ActionDataset& ds, ClipMode mode,
                                                int clips_per_batch = 8) {
    NoGradGuard guard;
    const int t = net.config().clip_length;
    struct Job {
        int video, start;
    };
    std::vector<Job> jobs;
    for (int v = 0; v < ds.size(); ++v)
        for (int s : clip_sampler(ds.frames, t, mode)) jobs.push_back({v, s});
    std::vector<std::vector<ActionProbs>> per_video(ds.size());
    for (std::size_t i = 0; i < jobs.size(); i += clips_per_batch) {
        const std::size_t n = std::min<std::size_t>(clips_per_batch, jobs.size() - i);
        std::vector<float> img;
        for (std::size_t k = 0; k < n; ++k) append_clip(ds, jobs[i + k].video, temporal_subsample(ds.frames, t, 1, jobs[i + k].start), img);
        ForwardOptions fo;
        fo.video = true;
        const auto res = net.forward(Tensor<float>(Shape{static_cast<int>(n) * t, ds.height, ds.width, 3}, std::move(img)), fo);
        const auto& last = res.last();
        if (!last.action) throw std::invalid_argument("predict_actions: network has no action head on its last block");
        const auto probs = to_action_probs(last.action->probs);
        for (std::size_t k = 0; k < n; ++k) per_video[jobs[i + k].video].push_back(probs[k]);
    }
    std::vector<ActionProbs> out;
    for (const auto& clips : per_video) out.push_back(multi_clip_average(clips));
    return out;
}

inline double evaluate_action_model(const Network<float>& net, const ActionDataset& ds, ClipMode mode) {
    const auto probs = predict_actions(net, ds, mode);
    std::vector<int> pred;
    for (const auto& p : probs) pred.push_back(p.argmax());
    return evaluate_action_accuracy(pred, ds.labels);
}

// --------------------------------------------------------------- training

/// Defaults are the desk-scale toy recipe (64×64, 2000 pose iterations).
/// full_scale() returns the optimiser and augmentation settings meant for full-size data.
struct TrainConfig {
    std::uint64_t seed = 1;
    int pose_iterations = 2000;
    int action_iterations = 300;
    int joint_iterations = 600;
    int pose_batch = 16;
    int action_batch = 4;
    OptimizerConfig optimizer{"rmsprop", 5e-3};
    double action_learning_rate = 1e-3;  // stages 2 and 3
    double lr_decay_fraction = 0.8;      // per stage; 1 disables
    double lr_decay_factor = 0.1;
    LossWeights weights;
    bool decouple = true;
    double decouple_fraction = 0.5;
    AugmentConfig augment{false};
    std::vector<double> source_ratios;  // empty = uniform over pose sources
    int log_every = 50;
    int checkpoint_every = 0;  // 0 = only at stage ends
    int eval_every = 0;
    std::string out_dir;  // empty = no files

    static TrainConfig full_scale() {
        TrainConfig c;
        c.optimizer.learning_rate = 1e-3;
        c.pose_batch = 32;
        c.augment = AugmentConfig{};
        c.augment.temporal_min = 3;
        c.augment.temporal_max = 10;
        return c;
    }

    int total_iterations() const { return pose_iterations + action_iterations + joint_iterations; }

    /// Global iteration at which the action poses are decoupled: the
    /// configured fraction of all training, not before the pose stage ends.
    int decouple_iteration() const {
        const int at = static_cast<int>(std::lround(decouple_fraction * total_iterations()));
        return std::max(at, pose_iterations);
    }

    void validate() const {
        if (pose_iterations < 0 || action_iterations < 0 || joint_iterations < 0) {
            throw std::invalid_argument("train config: stage lengths must be >= 0");
        }
        if (pose_batch < 1 || action_batch < 1) throw std::invalid_argument("train config: batch sizes must be >= 1");
        if (!(weights.pose > 0) || !(weights.confidence > 0) || !(weights.action > 0)) {
            throw std::invalid_argument("train config: loss weights must be > 0");
        }
        if (!(optimizer.learning_rate > 0) || !(action_learning_rate > 0)) throw std::invalid_argument("train config: learning rates must be > 0");
        if (decouple_fraction < 0 || decouple_fraction > 1) throw std::invalid_argument("train config: decouple_fraction outside [0,1]");
    }

    static std::vector<std::string> keys() {
        return {"seed", "pose_iterations", "action_iterations", "joint_iterations", "pose_batch", "action_batch",
                "optimizer", "momentum", "nesterov", "learning_rate", "action_learning_rate", "lr_decay_fraction", "lr_decay_factor",
                "pose_weight", "confidence_weight", "action_weight", "decouple", "decouple_fraction", "augment",
                "max_rotation_deg", "scale_min", "scale_max", "flip", "color_shift", "temporal_min", "temporal_max",
                "source_ratios", "log_every", "checkpoint_every", "eval_every"};
    }

    static TrainConfig from_kv(const KeyValueConfig& kv) {
        TrainConfig c;
        c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(c.seed)));
        c.pose_iterations = kv.get_int("pose_iterations", c.pose_iterations);
        c.action_iterations = kv.get_int("action_iterations", c.action_iterations);
        c.joint_iterations = kv.get_int("joint_iterations", c.joint_iterations);
        c.pose_batch = kv.get_int("pose_batch", c.pose_batch);
        c.action_batch = kv.get_int("action_batch", c.action_batch);
        c.optimizer.kind = kv.get("optimizer", c.optimizer.kind);
        c.optimizer.momentum = kv.get_double("momentum", c.optimizer.momentum);
        c.optimizer.nesterov = kv.get_bool("nesterov", c.optimizer.nesterov);
        c.optimizer.learning_rate = kv.get_double("learning_rate", c.optimizer.learning_rate);
        c.action_learning_rate = kv.get_double("action_learning_rate", c.action_learning_rate);
        c.lr_decay_fraction = kv.get_double("lr_decay_fraction", c.lr_decay_fraction);
        c.lr_decay_factor = kv.get_double("lr_decay_factor", c.lr_decay_factor);
        c.weights.pose = kv.get_double("pose_weight", c.weights.pose);
        c.weights.confidence = kv.get_double("confidence_weight", c.weights.confidence);
        c.weights.action = kv.get_double("action_weight", c.weights.action);
        c.decouple = kv.get_bool("decouple", c.decouple);
        c.decouple_fraction = kv.get_double("decouple_fraction", c.decouple_fraction);
        c.augment.enabled = kv.get_bool("augment", c.augment.enabled);
        c.augment.max_rotation_deg = kv.get_double("max_rotation_deg", c.augment.max_rotation_deg);
        c.augment.scale_min = kv.get_double("scale_min", c.augment.scale_min);
        c.augment.scale_max = kv.get_double("scale_max", c.augment.scale_max);
        c.augment.flip = kv.get_bool("flip", c.augment.flip);
        c.augment.color_shift = kv.get_double("color_shift", c.augment.color_shift);
        c.augment.temporal_min = kv.get_int("temporal_min", c.augment.temporal_min);
        c.augment.temporal_max = kv.get_int("temporal_max", c.augment.temporal_max);
        c.source_ratios = kv.get_list("source_ratios", c.source_ratios);
        c.log_every = kv.get_int("log_every", c.log_every);
        c.checkpoint_every = kv.get_int("checkpoint_every", c.checkpoint_every);
        c.eval_every = kv.get_int("eval_every", c.eval_every);
        return c;
    }
};

/// Datasets used by train(). Pointers are non-owning.
struct TrainData {
    std::vector<const PoseDataset*> pose_sources;
    const ActionDataset* actions = nullptr;
    const PoseDataset* pose_val = nullptr;
    const ActionDataset* action_val = nullptr;
    std::vector<std::array<int, 2>> flip_pairs = SyntheticFigureSpec{}.flip_pairs;
};

/// Resumable state kept between train() calls.
struct TrainState {
    int iteration = 0;  // global iterations completed
    Optimizer optimizer;
    bool aborted = false;
    std::string abort_reason;
};

enum class Stage { pose, action, joint };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pose: return "pose";
        case Stage::action: return "action";
        default: return "joint";
    }
}

/// Line-delimited JSON training log, optionally mirrored to a file.
class TrainLog {
  public:
    explicit TrainLog(const std::string& path = "") {
        if (!path.empty()) {
            file_.open(path, std::ios::app);
            if (!file_) throw std::runtime_error("cannot open training log '" + path + "'");
        }
    }
    void write(const nlohmann::json& rec) {
        const auto line = rec.dump();
        lines_.push_back(line);
        if (file_.is_open()) {
            file_ << line << "\n";
            file_.flush();
        }
    }
    const std::vector<std::string>& lines() const { return lines_; }

  private:
    std::ofstream file_;
    std::vector<std::string> lines_;
};

namespace detail {

inline std::uint64_t aug_seed(std::uint64_t seed, std::uint64_t i) { return mix_seed(seed ^ 0x5DEECE66DULL, i); }

struct PoseBatch {
    Tensor<float> images, gt, mask, conf;
};

inline PoseBatch build_pose_batch(const TrainData& data, const BatchRef& b, const AugmentConfig& aug, std::uint64_t seed) {
    std::mt19937_64 rng(aug_seed(seed, b.iteration * 2));
    const PoseDataset& first = *data.pose_sources.at(b.items.front().first);
    const int n = static_cast<int>(b.items.size()), nj = first.joints;
    std::vector<float> img, gt, mask, conf;
    img.reserve(static_cast<std::size_t>(n) * first.image_stride());
    for (const auto& [src, idx] : b.items) {
        const auto& ds = *data.pose_sources.at(src);
        if (ds.joints != nj || ds.height != first.height || ds.width != first.width) {
            throw std::invalid_argument("train: pose sources disagree on joints or image size");
        }
        auto s = augment(pose_sample(ds, idx), sample_augment(aug, rng), data.flip_pairs);
        img.insert(img.end(), s.image.begin(), s.image.end());
        for (int j = 0; j < nj; ++j) {
            gt.insert(gt.end(), s.pose[j].begin(), s.pose[j].end());
            mask.insert(mask.end(), s.mask[j].begin(), s.mask[j].end());
        }
        conf.insert(conf.end(), s.confidence.begin(), s.confidence.end());
    }
    return {Tensor<float>(Shape{n, first.height, first.width, 3}, std::move(img)),
            Tensor<float>(Shape{n, nj, 3}, std::move(gt)), Tensor<float>(Shape{n, nj, 3}, std::move(mask)),
            Tensor<float>(Shape{n, nj}, std::move(conf))};
}

struct ActionBatch {
    Tensor<float> images;
    std::vector<int> labels;
};

/// Clips with random start and temporal stride; one geometric/colour
/// augmentation shared by all frames of a clip.
inline ActionBatch build_action_batch(const TrainData& data, const BatchRef& b, const AugmentConfig& aug, int t,
                                      std::uint64_t seed) {
    const auto& ds = *data.actions;
    std::mt19937_64 rng(aug_seed(seed, b.iteration * 2 + 1));
    std::vector<float> img;
    std::vector<int> labels;
    for (const auto& item : b.items) {
        const int v = item.second;
        const int max_factor = std::max(1, (ds.frames - 1) / std::max(1, t - 1));
        const int lo = std::clamp(aug.enabled ? aug.temporal_min : 1, 1, max_factor);
        const int hi = std::clamp(aug.enabled ? aug.temporal_max : 1, lo, max_factor);
        const int factor = std::uniform_int_distribution<int>(lo, hi)(rng);
        const int start = std::uniform_int_distribution<int>(0, ds.frames - 1 - (t - 1) * factor)(rng);
        // no flips: mirrored clips would swap left/right action classes
        AugmentConfig clip_aug = aug;
        clip_aug.flip = false;
        const auto p = sample_augment(clip_aug, rng);
        std::vector<float> frames;
        append_clip(ds, v, temporal_subsample(ds.frames, t, factor, start), frames);
        if (p.identity()) {
            img.insert(img.end(), frames.begin(), frames.end());
        } else {
            PoseSample s;
            s.height = ds.height;
            s.width = ds.width;
            const auto stride = ds.image_stride();
            for (int f = 0; f < t; ++f) {
                s.image.assign(frames.begin() + static_cast<std::ptrdiff_t>(f * stride),
                               frames.begin() + static_cast<std::ptrdiff_t>((f + 1) * stride));
                const auto out = augment(s, p, {});
                img.insert(img.end(), out.image.begin(), out.image.end());
            }
        }
        labels.push_back(ds.labels[v]);
    }
    const int n = static_cast<int>(b.items.size());
    return {Tensor<float>(Shape{n * t, ds.height, ds.width, 3}, std::move(img)), std::move(labels)};
}

}  // namespace detail

/// Learning rate at global iteration `it` of a stage [begin, end).
inline double stage_learning_rate(double base, int it, int begin, int end, const TrainConfig& cfg) {
    if (cfg.lr_decay_fraction >= 1.0 || end <= begin) return base;
    const int drop = begin + static_cast<int>(std::lround(cfg.lr_decay_fraction * (end - begin)));
    return it >= drop ? base * cfg.lr_decay_factor : base;
}

/// Full checkpoint: network, optimizer slots and the training position.
inline Checkpoint training_checkpoint(const Network<float>& net, const TrainState& state) {
    auto ck = network_checkpoint(net);
    ck.meta.set("train.iteration", state.iteration);
    state.optimizer.save(ck);
    return ck;
}

inline void restore_training(Network<float>& net, TrainState& state, const Checkpoint& ck) {
    restore_network(net, ck);
    state.iteration = ck.meta.get_int("train.iteration", 0);
    state.optimizer.load(ck);
}

/// Three-stage protocol over global iterations:
///   [0, P)        pose only (single-frame batches, pose weights trained)
///   [P, P+A)      action only (pose weights frozen, pose BN in eval mode)
///   [P+A, P+A+J)  joint, strictly alternating pose and action batches
/// Starts at state.iteration, so a restored state resumes mid-run. Returns
/// false if a non-finite loss aborted training; the last checkpoint written
/// is then left in place.
inline bool train(Network<float>& net, const TrainData& data, const TrainConfig& cfg, TrainState& state, TrainLog& log,
                  const std::function<void(int, Stage)>& on_iteration = {}) {
    cfg.validate();
    const int p_end = cfg.pose_iterations, a_end = p_end + cfg.action_iterations, j_end = a_end + cfg.joint_iterations;
    std::vector<int> sizes;
    for (const auto* s : data.pose_sources) sizes.push_back(s ? s->size() : 0);
    const bool need_pose = cfg.pose_iterations > 0 || cfg.joint_iterations > 0;
    const bool need_action = cfg.action_iterations > 0 || cfg.joint_iterations > 0;
    if (need_pose && (sizes.empty() || std::all_of(sizes.begin(), sizes.end(), [](int n) { return n == 0; }))) {
        throw std::invalid_argument("train: empty pose dataset");
    }
    if (need_action && (!data.actions || data.actions->size() == 0)) throw std::invalid_argument("train: empty action dataset");
    if (data.actions && data.actions->actions != net.config().actions) {
        throw std::invalid_argument("train: dataset has " + std::to_string(data.actions->actions) +
                                    " actions, network expects " + std::to_string(net.config().actions));
    }
    for (const auto* s : data.pose_sources) {
        if (s && s->joints != net.config().joints) throw std::invalid_argument("train: dataset joint count differs from network");
    }
    const AlternatingBatchScheduler sched(sizes, cfg.source_ratios, data.actions ? data.actions->size() : 0,
                                          cfg.pose_batch, cfg.action_batch, cfg.seed);
    const int t = net.config().clip_length;
    const int decouple_at = cfg.decouple_iteration();
    const std::string ck_path = cfg.out_dir.empty() ? "" : (std::filesystem::path(cfg.out_dir) / "checkpoint.prkt").string();
    std::ofstream metrics;
    if (!cfg.out_dir.empty() && cfg.eval_every > 0) {
        const auto mpath = std::filesystem::path(cfg.out_dir) / "metrics.csv";
        const bool fresh = !std::filesystem::exists(mpath);
        metrics.open(mpath, std::ios::app);
        if (fresh) metrics << "stage,iteration,pckh,mpjpe_mm,action_accuracy\n";
    }

    auto save = [&]() {
        if (!ck_path.empty()) save_checkpoint(training_checkpoint(net, state), ck_path);
    };
    auto end_stage = [&](Stage s) {
        save();
        if (!cfg.out_dir.empty()) {
            const auto dst = std::filesystem::path(cfg.out_dir) / (std::string("stage_") + stage_name(s) + ".prkt");
            std::filesystem::copy_file(ck_path, dst, std::filesystem::copy_options::overwrite_existing);
        }
        log.write({{"event", "stage_end"}, {"stage", stage_name(s)}, {"iteration", state.iteration}});
    };
    auto evaluate = [&](Stage stage) {
        nlohmann::json rec{{"event", "eval"}, {"stage", stage_name(stage)}, {"iteration", state.iteration}};
        std::string pckh = "", mpjpe = "", acc = "";
        if (data.pose_val && data.pose_val->size() > 0) {
            const auto m = evaluate_pose_model(net, *data.pose_val);
            rec["pckh"] = m.pckh;
            rec["mpjpe_mm"] = m.mpjpe_mm;
            pckh = std::to_string(m.pckh);
            mpjpe = std::to_string(m.mpjpe_mm);
        }
        if (data.action_val && data.action_val->size() > 0 && net.blocks().back().has_action) {
            const double a = evaluate_action_model(net, *data.action_val, ClipMode::single);
            rec["action_accuracy"] = a;
            acc = std::to_string(a);
        }
        log.write(rec);
        if (metrics.is_open()) metrics << stage_name(stage) << "," << state.iteration << "," << pckh << "," << mpjpe << "," << acc << "\n";
    };

    Stage current = state.iteration < p_end ? Stage::pose : state.iteration < a_end ? Stage::action : Stage::joint;
    const bool ran = state.iteration < j_end;
    if (ran) {
        log.write({{"event", "stage_start"}, {"stage", stage_name(current)}, {"iteration", state.iteration}});
    }
    while (state.iteration < j_end) {
        const int it = state.iteration;
        const Stage stage = it < p_end ? Stage::pose : it < a_end ? Stage::action : Stage::joint;
        if (stage != current) {
            end_stage(current);
            current = stage;
            log.write({{"event", "stage_start"}, {"stage", stage_name(current)}, {"iteration", it}});
        }
        if (cfg.decouple && !net.decoupled() && it >= decouple_at && it >= p_end) {
            net.decouple_action_poses();
            log.write({{"event", "decouple"}, {"iteration", it}});
        }

        BatchKind kind = BatchKind::pose;
        if (stage == Stage::action) kind = BatchKind::action;
        if (stage == Stage::joint) kind = AlternatingBatchScheduler::alternating_kind(static_cast<std::uint64_t>(it - a_end));
        const auto ref = sched.batch(static_cast<std::uint64_t>(it), kind);

        // trainable groups: stage 1 and 3 train everything reachable; stage 2 freezes pose weights
        net.set_trainable(ParamGroup::pose, stage != Stage::action);
        net.set_trainable(ParamGroup::action, true);
        net.zero_grad();

        std::vector<Tensor<float>> pose_terms, conf_terms, act_terms;
        double lr = 0;
        if (kind == BatchKind::pose) {
            const auto b = detail::build_pose_batch(data, ref, cfg.augment, cfg.seed);
            ForwardOptions fo;
            fo.pose_norm = NormMode::train;
            const auto out = net.forward(b.images, fo);
            for (const auto& s : out.blocks) {
                pose_terms.push_back(elastic_net_loss(s.pose.joints, b.gt, b.mask));
                conf_terms.push_back(confidence_loss(s.pose.confidence, b.conf));
            }
            lr = stage == Stage::pose ? stage_learning_rate(cfg.optimizer.learning_rate, it, 0, p_end, cfg)
                                      : stage_learning_rate(cfg.action_learning_rate, it, a_end, j_end, cfg);
        } else {
            const auto b = detail::build_action_batch(data, ref, cfg.augment, t, cfg.seed);
            ForwardOptions fo;
            fo.video = true;
            fo.pose_norm = stage == Stage::action ? NormMode::eval : NormMode::train;
            const auto out = net.forward(b.images, fo);
            for (const auto& s : out.blocks)
                if (s.action) act_terms.push_back(action_loss(s.action->probs, b.labels));
            lr = stage == Stage::action ? stage_learning_rate(cfg.action_learning_rate, it, p_end, a_end, cfg)
                                        : stage_learning_rate(cfg.action_learning_rate, it, a_end, j_end, cfg);
        }
        const auto loss = total_loss(pose_terms, conf_terms, act_terms, cfg.weights);
        auto sum_of = [](const std::vector<Tensor<float>>& v) {
            double s = 0;
            for (const auto& x : v) s += static_cast<double>(x.item());
            return s;
        };
        const double loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
            state.aborted = true;
            state.abort_reason = "non-finite loss at iteration " + std::to_string(it);
            log.write({{"event", "abort"}, {"stage", stage_name(stage)}, {"iteration", it}, {"reason", state.abort_reason}});
            net.zero_grad();
            return false;
        }
        backward(loss);
        state.optimizer.step(net.params(), lr);
        net.zero_grad();
        state.iteration = it + 1;

        if (cfg.log_every > 0 && (it % cfg.log_every == 0 || state.iteration == j_end)) {
            nlohmann::json rec{{"event", "iteration"}, {"stage", stage_name(stage)}, {"iteration", it},
                               {"batch", kind == BatchKind::pose ? "pose" : "action"}, {"lr", lr}, {"loss", loss_value}};
            if (!pose_terms.empty()) {
                rec["pose_loss"] = sum_of(pose_terms);
                rec["confidence_loss"] = sum_of(conf_terms);
            }
            if (!act_terms.empty()) rec["action_loss"] = sum_of(act_terms);
            log.write(rec);
        }
        if (on_iteration) on_iteration(it, stage);
        if (cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0) save();
        if (cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0) evaluate(stage);
    }
    if (ran) {
        end_stage(current);
    } else {
        save();
    }
    return true;
}

}  // namespace mtpose
