#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtpose/action_head.hpp"
#include "mtpose/config.hpp"
#include "mtpose/conv.hpp"
#include "mtpose/ops.hpp"
#include "mtpose/pose_regression.hpp"
#include "mtpose/tensor.hpp"

namespace mtpose {

struct NetworkConfig {
    int pyramids = 2;  // P
    int levels = 3;    // L
    int input_height = 64;
    int input_width = 64;
    int entry_channels = 32;  // N_f at level 1
    int channel_growth = 16;
    int joints = 8;
    int actions = 4;
    int clip_length = 4;
    int action_features = 32;  // N_v
    int action_start_pyramid = 1;
    int kernel_size = 5;  // separable convolutions in single-frame layers
    int pose_feature_dims = 3;

    static NetworkConfig toy();

    /// Full-size layout: 256×256 input reduced to 32×32×288, +96 channels per
    /// level, 8 pyramids × 4 levels, action part from the 5th pyramid.
    static NetworkConfig full() {
        NetworkConfig c;
        c.pyramids = 8;
        c.levels = 4;
        c.input_height = c.input_width = 256;
        c.entry_channels = 288;
        c.channel_growth = 96;
        c.joints = 17;
        c.actions = 60;
        c.clip_length = 8;
        c.action_features = 192;
        c.action_start_pyramid = 5;
        return c;
    }

    int channels(int level) const { return entry_channels + (level - 1) * channel_growth; }
    int level_height(int level) const { return (input_height / 8) >> (level - 1); }
    int level_width(int level) const { return (input_width / 8) >> (level - 1); }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("invalid network config: " + m); };
        if (pyramids < 1) fail("pyramids must be >= 1");
        if (levels < 2) fail("levels must be >= 2");
        if (clip_length < 2) fail("clip_length must be >= 2");
        if (entry_channels < 2) fail("entry_channels must be >= 2");
        if (channel_growth < 0) fail("channel_growth must be >= 0");
        if (joints < 1) fail("joints must be >= 1");
        if (actions < 1) fail("actions must be >= 1");
        if (action_features < 1) fail("action_features must be >= 1");
        if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be odd");
        if (pose_feature_dims != 2 && pose_feature_dims != 3) fail("pose_feature_dims must be 2 or 3");
        if (action_start_pyramid < 1) fail("action_start_pyramid must be >= 1");
        const int multiple = 8 << (levels - 1);
        if (input_height % multiple != 0 || input_width % multiple != 0) {
            fail("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                 " must be a multiple of " + std::to_string(multiple) + " for " + std::to_string(levels) + " levels");
        }
    }

    static std::vector<std::string> keys() {
        return {"pyramids",      "levels",       "input_size",      "input_height",     "input_width",
                "entry_channels", "channel_growth", "joints",        "actions",          "clip_length",
                "action_features", "action_start_pyramid", "kernel_size", "pose_feature_dims"};
    }

    static NetworkConfig from_kv(const KeyValueConfig& kv) { return from_kv(kv, NetworkConfig::toy()); }

    static NetworkConfig from_kv(const KeyValueConfig& kv, const NetworkConfig& base) {
        NetworkConfig c = base;
        c.pyramids = kv.get_int("pyramids", c.pyramids);
        c.levels = kv.get_int("levels", c.levels);
        if (kv.has("input_size")) c.input_height = c.input_width = kv.get_int("input_size", c.input_height);
        c.input_height = kv.get_int("input_height", c.input_height);
        c.input_width = kv.get_int("input_width", c.input_width);
        c.entry_channels = kv.get_int("entry_channels", c.entry_channels);
        c.channel_growth = kv.get_int("channel_growth", c.channel_growth);
        c.joints = kv.get_int("joints", c.joints);
        c.actions = kv.get_int("actions", c.actions);
        c.clip_length = kv.get_int("clip_length", c.clip_length);
        c.action_features = kv.get_int("action_features", c.action_features);
        c.action_start_pyramid = kv.get_int("action_start_pyramid", c.action_start_pyramid);
        c.kernel_size = kv.get_int("kernel_size", c.kernel_size);
        c.pose_feature_dims = kv.get_int("pose_feature_dims", c.pose_feature_dims);
        return c;
    }

    KeyValueConfig to_kv() const {
        KeyValueConfig kv;
        kv.set("pyramids", pyramids);
        kv.set("levels", levels);
        kv.set("input_height", input_height);
        kv.set("input_width", input_width);
        kv.set("entry_channels", entry_channels);
        kv.set("channel_growth", channel_growth);
        kv.set("joints", joints);
        kv.set("actions", actions);
        kv.set("clip_length", clip_length);
        kv.set("action_features", action_features);
        kv.set("action_start_pyramid", action_start_pyramid);
        kv.set("kernel_size", kernel_size);
        kv.set("pose_feature_dims", pose_feature_dims);
        return kv;
    }

    bool operator==(const NetworkConfig&) const = default;
};

inline NetworkConfig NetworkConfig::toy() { return NetworkConfig{}; }

enum class ParamGroup { pose, action };

template <typename Real>
struct ParamEntry {
    std::string name;
    std::string op;
    Tensor<Real> tensor;
    ParamGroup group = ParamGroup::pose;
    bool trainable = true;  // false for running statistics
};

namespace detail {

template <typename Real>
class LayerFactory {
  public:
    LayerFactory(std::vector<ParamEntry<Real>>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

    Tensor<Real> uniform(const std::string& name, const std::string& op, Shape shape, double limit, ParamGroup g) {
        auto t = Tensor<Real>::uniform(std::move(shape), static_cast<Real>(-limit), static_cast<Real>(limit), rng_);
        return add(name, op, t, g, true);
    }
    Tensor<Real> constant(const std::string& name, const std::string& op, Shape shape, double v, ParamGroup g,
                          bool trainable = true) {
        return add(name, op, Tensor<Real>::full(std::move(shape), static_cast<Real>(v)), g, trainable);
    }
    Tensor<Real> add(const std::string& name, const std::string& op, Tensor<Real> t, ParamGroup g, bool trainable) {
        t.set_requires_grad(trainable);
        store_.push_back({name, op, t, g, trainable});
        return t;
    }

  private:
    std::vector<ParamEntry<Real>>& store_;
    std::mt19937_64 rng_;
};

}  // namespace detail

enum class ConvInit { he, lecun, zero };

template <typename Real>
struct ConvLayer {
    Tensor<Real> w, b;  // b may be undefined
    int stride = 1;

    static ConvLayer make(detail::LayerFactory<Real>& f, const std::string& name, int k, int cin, int cout,
                          ParamGroup g, ConvInit init = ConvInit::he, bool bias = true, int stride = 1) {
        ConvLayer l;
        const double fan_in = static_cast<double>(k * k * cin);
        if (init == ConvInit::zero) {
            l.w = f.constant(name + "/w", "conv2d", Shape{k, k, cin, cout}, 0.0, g);
        } else {
            const double limit = std::sqrt((init == ConvInit::he ? 6.0 : 3.0) / fan_in);
            l.w = f.uniform(name + "/w", "conv2d", Shape{k, k, cin, cout}, limit, g);
        }
        if (bias) l.b = f.constant(name + "/b", "conv2d", Shape{cout}, 0.0, g);
        l.stride = stride;
        return l;
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const { return conv2d(x, w, stride, Padding::same, b); }
    int out_channels() const { return w.dim(3); }
};

template <typename Real>
struct SeparableConvLayer {
    Tensor<Real> depthwise, pointwise, b;

    static SeparableConvLayer make(detail::LayerFactory<Real>& f, const std::string& name, int k, int cin, int cout,
                                   ParamGroup g) {
        SeparableConvLayer l;
        l.depthwise = f.uniform(name + "/depthwise", "depthwise_conv2d", Shape{k, k, cin},
                                std::sqrt(6.0 / static_cast<double>(k * k)), g);
        l.pointwise = f.uniform(name + "/pointwise", "conv2d", Shape{1, 1, cin, cout},
                                std::sqrt(6.0 / static_cast<double>(cin)), g);
        l.b = f.constant(name + "/b", "conv2d", Shape{cout}, 0.0, g);
        return l;
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        return depthwise_separable_conv2d(x, depthwise, pointwise, b);
    }
};

template <typename Real>
struct BatchNormLayer {
    Tensor<Real> gamma, beta, running_mean, running_var;

    static BatchNormLayer make(detail::LayerFactory<Real>& f, const std::string& name, int c, ParamGroup g) {
        BatchNormLayer l;
        l.gamma = f.constant(name + "/gamma", "batchnorm", Shape{c}, 1.0, g);
        l.beta = f.constant(name + "/beta", "batchnorm", Shape{c}, 0.0, g);
        l.running_mean = f.constant(name + "/running_mean", "batchnorm", Shape{c}, 0.0, g, false);
        l.running_var = f.constant(name + "/running_var", "batchnorm", Shape{c}, 1.0, g, false);
        return l;
    }

    Tensor<Real> operator()(const Tensor<Real>& x, NormMode mode) const {
        return batchnorm(x, gamma, beta, running_mean, running_var, mode);
    }
};

/// skip(x) + ReLU(BN(SepConv_k(x))), with a 1×1 projection on the skip path
/// when the channel count changes.
template <typename Real>
struct ResidualUnit {
    SeparableConvLayer<Real> conv;
    BatchNormLayer<Real> bn;
    std::optional<ConvLayer<Real>> projection;

    static ResidualUnit make(detail::LayerFactory<Real>& f, const std::string& name, int k, int cin, int cout,
                             ParamGroup g) {
        ResidualUnit u;
        u.conv = SeparableConvLayer<Real>::make(f, name + "/sep", k, cin, cout, g);
        u.bn = BatchNormLayer<Real>::make(f, name + "/bn", cout, g);
        if (cin != cout) u.projection = ConvLayer<Real>::make(f, name + "/skip", 1, cin, cout, g, ConvInit::lecun, false);
        return u;
    }

    Tensor<Real> operator()(const Tensor<Real>& x, NormMode mode) const {
        auto branch = relu(bn(conv(x), mode));
        auto skip = projection ? (*projection)(x) : x;
        return add(skip, branch);
    }
};

enum class Direction { down, up };

/// DU: maxpool2 then RU. UU: upsample2 then RU.
template <typename Real>
struct ScalingUnit {
    Direction direction = Direction::down;
    ResidualUnit<Real> unit;

    Tensor<Real> operator()(const Tensor<Real>& x, NormMode mode) const {
        const auto d = detail::image_dims(direction == Direction::down ? "downscaling_unit" : "upscaling_unit", x);
        if (direction == Direction::down && (d.h % 2 || d.w % 2)) {
            throw std::invalid_argument("downscaling_unit: odd spatial dimensions " + shape_str(x.shape()));
        }
        return unit(direction == Direction::down ? maxpool2(x) : upsample2(x), mode);
    }
};

template <typename Real>
struct EntryFlow {
    ConvLayer<Real> stem;
    BatchNormLayer<Real> stem_bn;
    ResidualUnit<Real> unit1, unit2;

    Tensor<Real> operator()(const Tensor<Real>& image, NormMode mode) const {
        auto x = relu(stem_bn(stem(image), mode));
        x = maxpool2(unit1(x, mode));
        return maxpool2(unit2(x, mode));
    }
};

/// Outputs of one prediction block.
template <typename Real>
struct PredictionBlockState {
    Tensor<Real> x;        // re-injected single-frame features
    Tensor<Real> z;        // multi-task features
    Tensor<Real> z_prime;  // RU output feeding Z
    Tensor<Real> h, d;     // probability and depth maps [N, H_f, W_f, J]
    PoseTensors<Real> pose;
    Tensor<Real> action_h;               // maps read by the action path (h or its replica)
    Tensor<Real> y;                      // [B, T, J, N_v], video mode only
    std::optional<ActionOutput<Real>> action;  // video mode only

    bool has_action() const { return action.has_value(); }
};

template <typename Real>
struct PredictionBlock {
    int pyramid = 1;
    int level = 1;
    Direction direction = Direction::down;
    int prev_pyramid_block = -1;  // block index feeding X^{p-1,l}, -1 if absent
    int neighbor_block = -1;      // block index feeding the neighbour level, -1 = entry flow

    ScalingUnit<Real> neighbor_unit;
    ResidualUnit<Real> z_unit;
    ConvLayer<Real> w_z, w_h, w_d, w_r, w_s;

    bool has_action = false;
    AggregationParams<Real> aggregation;
    ActionHeadParams<Real> head;

    bool decoupled = false;
    ConvLayer<Real> w_h_action, w_d_action;

    std::string name() const { return "p" + std::to_string(pyramid) + "l" + std::to_string(level); }
};

struct ForwardOptions {
    bool video = false;       // clip processing: input is [B·T, H, W, 3]
    int clip_length = 0;      // 0 selects the configured T
    NormMode pose_norm = NormMode::eval;
};

template <typename Real>
struct NetworkOutput {
    std::vector<PredictionBlockState<Real>> blocks;
    const PredictionBlockState<Real>& last() const { return blocks.back(); }
};

/// Entry flow followed by P alternating downscaling/upscaling pyramids of
/// prediction blocks.
///
/// Downscaling pyramids hold blocks at levels 2..L, upscaling pyramids at
/// levels L-1..1, so each pyramid contributes L-1 blocks and every block's
/// neighbour input comes from the adjacent level of the same pyramid or,
/// for a pyramid's first block, from the last block of the previous one.
template <typename Real>
class Network {
  public:
    Network() = default;

    /// `pyramid_limit` < P builds only the first pyramids (used by cutting).
    Network(const NetworkConfig& config, std::uint64_t seed, int pyramid_limit = -1) : config_(config) {
        config_.validate();
        pyramids_built_ = pyramid_limit < 0 ? config_.pyramids : pyramid_limit;
        if (pyramids_built_ < 1 || pyramids_built_ > config_.pyramids) {
            throw std::invalid_argument("pyramid limit " + std::to_string(pyramid_limit) + " outside [1," +
                                        std::to_string(config_.pyramids) + "]");
        }
        build(seed);
    }

    const NetworkConfig& config() const { return config_; }
    int pyramids_built() const { return pyramids_built_; }
    bool decoupled() const { return decoupled_; }
    bool empty() const { return blocks_.empty() && params_.empty(); }

    const std::vector<PredictionBlock<Real>>& blocks() const { return blocks_; }
    std::vector<PredictionBlock<Real>>& blocks() { return blocks_; }
    const std::vector<ParamEntry<Real>>& params() const { return params_; }
    std::vector<ParamEntry<Real>>& params() { return params_; }

    const ParamEntry<Real>* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    /// Index of the last block of pyramid `p` (1-based).
    int last_block_of_pyramid(int p) const {
        int idx = -1;
        for (int i = 0; i < static_cast<int>(blocks_.size()); ++i)
            if (blocks_[i].pyramid == p) idx = i;
        return idx;
    }

    /// Enables or disables gradient tracking for one parameter group.
    void set_trainable(ParamGroup group, bool on) {
        for (auto& p : params_)
            if (p.group == group && p.trainable) p.tensor.set_requires_grad(on);
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    NetworkOutput<Real> forward(const Tensor<Real>& images, const ForwardOptions& opt = {}) const {
        if (images.rank() != 4 || images.dim(3) != 3) {
            throw std::invalid_argument("network forward: expected [N,H,W,3] images, got " + shape_str(images.shape()));
        }
        if (images.dim(1) != config_.input_height || images.dim(2) != config_.input_width) {
            throw std::invalid_argument("network forward: image size " + std::to_string(images.dim(1)) + "x" +
                                        std::to_string(images.dim(2)) + " differs from configured " +
                                        std::to_string(config_.input_height) + "x" +
                                        std::to_string(config_.input_width));
        }
        const int t = opt.clip_length > 0 ? opt.clip_length : config_.clip_length;
        if (opt.video && images.dim(0) % t != 0) {
            throw std::invalid_argument("network forward: " + std::to_string(images.dim(0)) +
                                        " frames is not a whole number of clips of length " + std::to_string(t));
        }
        NetworkOutput<Real> out;
        const auto entry = entry_flow(images, opt.pose_norm);
        out.blocks.reserve(blocks_.size());
        for (const auto& b : blocks_) {
            const Tensor<Real> x_prev = b.prev_pyramid_block >= 0 ? out.blocks[b.prev_pyramid_block].x : Tensor<Real>{};
            const Tensor<Real> x_nb = b.neighbor_block >= 0 ? out.blocks[b.neighbor_block].x : entry;
            Tensor<Real> y_prev, y_nb;
            if (b.prev_pyramid_block >= 0) y_prev = out.blocks[b.prev_pyramid_block].y;
            if (b.neighbor_block >= 0) y_nb = out.blocks[b.neighbor_block].y;
            out.blocks.push_back(prediction_block(b, x_prev, x_nb, y_prev, y_nb, opt.video, t, opt.pose_norm));
        }
        return out;
    }

    Tensor<Real> entry_flow(const Tensor<Real>& images, NormMode mode) const {
        const auto d = detail::image_dims("entry_flow", images);
        if (d.h % 8 != 0 || d.w % 8 != 0) {
            throw std::invalid_argument("entry_flow: input " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                                        " must be a multiple of 8 in both dimensions");
        }
        return entry_(images, mode);
    }

    /// One prediction block. x_prev / y_prev come from the previous pyramid at
    /// the same level, x_nb / y_nb from the neighbouring level; undefined
    /// tensors contribute zero.
    PredictionBlockState<Real> prediction_block(const PredictionBlock<Real>& b, const Tensor<Real>& x_prev,
                                                const Tensor<Real>& x_nb, const Tensor<Real>& y_prev,
                                                const Tensor<Real>& y_nb, bool video, int clip_length,
                                                NormMode mode) const {
        PredictionBlockState<Real> s;
        auto scaled = b.neighbor_unit(x_nb, mode);
        Tensor<Real> merged = scaled;
        if (x_prev.defined()) {
            if (x_prev.shape() != scaled.shape()) {
                throw std::invalid_argument("prediction_block " + b.name() + ": previous-pyramid input " +
                                            shape_str(x_prev.shape()) + " vs scaled neighbour input " +
                                            shape_str(scaled.shape()));
            }
            merged = add(x_prev, scaled);
        }
        s.z_prime = b.z_unit(merged, mode);
        s.z = b.w_z(s.z_prime);
        s.h = spatial_softmax(b.w_h(s.z));
        s.d = sigmoid(b.w_d(s.z));
        s.pose = assemble_pose(soft_argmax_2d(s.h), depth_regress(s.h, s.d), joint_confidence(s.h));
        s.x = pose_reinject(s.h, s.d, s.z_prime, s.z, b.w_r.w, b.w_s.w);

        if (!(video && b.has_action)) return s;

        PoseTensors<Real> action_pose = s.pose;
        s.action_h = s.h;
        if (b.decoupled) {
            s.action_h = spatial_softmax(b.w_h_action(s.z));
            const auto d_action = sigmoid(b.w_d_action(s.z));
            action_pose = assemble_pose(soft_argmax_2d(s.action_h), depth_regress(s.action_h, d_action),
                                        joint_confidence(s.action_h));
        }
        const auto pose_feat =
            pose_feature_image(action_pose.joints, action_pose.confidence, clip_length, config_.pose_feature_dims);
        auto appearance = extract_appearance_features(s.z, s.action_h);
        appearance = reshape(appearance, Shape{pose_feat.dim(0), clip_length, config_.joints, appearance.dim(-1)});
        s.y = aggregate_action_features(pose_feat, appearance, y_prev, y_nb, b.aggregation);
        s.action = action_predict(s.y, b.head);
        return s;
    }

    /// Replicates W_h and W_d of every action-bearing block into action-only
    /// copies; the action path reads the replicas from then on.
    void decouple_action_poses() {
        if (decoupled_) throw std::logic_error("decouple_action_poses: network is already decoupled");
        for (auto& b : blocks_) {
            if (!b.has_action) continue;
            b.w_h_action = clone_layer(b.w_h, b.name() + "/w_h_action");
            b.w_d_action = clone_layer(b.w_d, b.name() + "/w_d_action");
            b.decoupled = true;
        }
        decoupled_ = true;
    }

    /// Deep copy with independent parameter storage.
    Network clone() const {
        Network copy(config_, 0, pyramids_built_);
        if (decoupled_) copy.decouple_action_poses();
        copy.copy_values_from(*this);
        return copy;
    }

    /// Copies every parameter of `this` from the same-named parameter in
    /// `src`; all names must exist there with equal shapes.
    void copy_values_from(const Network& src) {
        std::unordered_map<std::string, const ParamEntry<Real>*> by_name;
        for (const auto& p : src.params_) by_name[p.name] = &p;
        for (auto& p : params_) {
            auto it = by_name.find(p.name);
            if (it == by_name.end()) throw std::invalid_argument("copy_values_from: missing parameter " + p.name);
            if (it->second->tensor.shape() != p.tensor.shape()) {
                throw std::invalid_argument("copy_values_from: shape mismatch for " + p.name);
            }
            std::copy(it->second->tensor.data().begin(), it->second->tensor.data().end(), p.tensor.data().begin());
        }
    }

  private:
    ConvLayer<Real> clone_layer(const ConvLayer<Real>& src, const std::string& name) {
        ConvLayer<Real> l;
        l.stride = src.stride;
        l.w = src.w.detach();
        l.w.set_requires_grad(true);
        params_.push_back({name + "/w", "conv2d", l.w, ParamGroup::action, true});
        if (src.b.defined()) {
            l.b = src.b.detach();
            l.b.set_requires_grad(true);
            params_.push_back({name + "/b", "conv2d", l.b, ParamGroup::action, true});
        }
        return l;
    }

    void build(std::uint64_t seed) {
        detail::LayerFactory<Real> f(params_, seed);
        const auto& c = config_;
        const int k = c.kernel_size;
        const int c1 = c.channels(1);
        const int stem_channels = std::max(1, c1 / 2);
        entry_.stem = ConvLayer<Real>::make(f, "entry/stem", 7, 3, stem_channels, ParamGroup::pose, ConvInit::he, true, 2);
        entry_.stem_bn = BatchNormLayer<Real>::make(f, "entry/stem_bn", stem_channels, ParamGroup::pose);
        entry_.unit1 = ResidualUnit<Real>::make(f, "entry/ru1", k, stem_channels, stem_channels, ParamGroup::pose);
        entry_.unit2 = ResidualUnit<Real>::make(f, "entry/ru2", k, stem_channels, c1, ParamGroup::pose);

        // most recent block index holding each level; -1 = entry flow (level 1 only)
        std::vector<int> blocks_at_level_prev(c.levels + 1, -2);
        blocks_at_level_prev[1] = -2;
        int last_block = -1;  // last block of the previous pyramid
        for (int p = 1; p <= pyramids_built_; ++p) {
            const Direction dir = (p % 2 == 1) ? Direction::down : Direction::up;
            std::vector<int> levels;
            if (dir == Direction::down)
                for (int l = 2; l <= c.levels; ++l) levels.push_back(l);
            else
                for (int l = c.levels - 1; l >= 1; --l) levels.push_back(l);

            std::vector<int> this_pyramid(c.levels + 1, -2);
            int prev_in_pyramid = last_block;  // neighbour of the first block is the carried state
            for (int l : levels) {
                PredictionBlock<Real> b;
                b.pyramid = p;
                b.level = l;
                b.direction = dir;
                b.prev_pyramid_block = blocks_at_level_prev[l] >= 0 ? blocks_at_level_prev[l] : -1;
                b.neighbor_block = prev_in_pyramid;
                const std::string n = b.name();
                const int ch = c.channels(l);
                const int nb_level = dir == Direction::down ? l - 1 : l + 1;
                b.neighbor_unit.direction = dir;
                b.neighbor_unit.unit =
                    ResidualUnit<Real>::make(f, n + (dir == Direction::down ? "/du" : "/uu"), k, c.channels(nb_level), ch,
                                             ParamGroup::pose);
                b.z_unit = ResidualUnit<Real>::make(f, n + "/ru", k, ch, ch, ParamGroup::pose);
                b.w_z = ConvLayer<Real>::make(f, n + "/w_z", 1, ch, ch, ParamGroup::pose, ConvInit::lecun);
                b.w_h = ConvLayer<Real>::make(f, n + "/w_h", 1, ch, c.joints, ParamGroup::pose, ConvInit::lecun);
                b.w_d = ConvLayer<Real>::make(f, n + "/w_d", 1, ch, c.joints, ParamGroup::pose, ConvInit::lecun);
                b.w_r = ConvLayer<Real>::make(f, n + "/w_r", 1, c.joints, ch, ParamGroup::pose, ConvInit::zero, false);
                b.w_s = ConvLayer<Real>::make(f, n + "/w_s", 1, c.joints, ch, ParamGroup::pose, ConvInit::zero, false);
                if (p >= c.action_start_pyramid) {
                    b.has_action = true;
                    const int nv = c.action_features;
                    const auto a = ParamGroup::action;
                    auto pose_proj = ConvLayer<Real>::make(f, n + "/act_pose", 1, c.pose_feature_dims, nv, a, ConvInit::lecun);
                    auto app_proj = ConvLayer<Real>::make(f, n + "/act_app", 1, ch, nv, a, ConvInit::lecun);
                    b.aggregation = {pose_proj.w, pose_proj.b, app_proj.w, app_proj.b};
                    auto conv1 = ConvLayer<Real>::make(f, n + "/act_conv1", 3, nv, nv, a);
                    auto conv2 = ConvLayer<Real>::make(f, n + "/act_conv2", 3, nv, nv, a);
                    b.head.conv1 = conv1.w;
                    b.head.bias1 = conv1.b;
                    b.head.conv2 = conv2.w;
                    b.head.bias2 = conv2.b;
                    b.head.fc = f.uniform(n + "/act_fc/w", "linear", Shape{nv, c.actions},
                                          std::sqrt(3.0 / static_cast<double>(nv)), a);
                    b.head.fc_bias = f.constant(n + "/act_fc/b", "linear", Shape{c.actions}, 0.0, a);
                }
                const int idx = static_cast<int>(blocks_.size());
                blocks_.push_back(std::move(b));
                this_pyramid[l] = idx;
                prev_in_pyramid = idx;
            }
            blocks_at_level_prev = this_pyramid;
            last_block = prev_in_pyramid;
        }
    }

    NetworkConfig config_;
    int pyramids_built_ = 0;
    bool decoupled_ = false;
    std::vector<ParamEntry<Real>> params_;
    EntryFlow<Real> entry_;
    std::vector<PredictionBlock<Real>> blocks_;
};

template <typename Real = float>
Network<Real> build_network(const NetworkConfig& config, std::uint64_t seed) {
    return Network<Real>(config, seed);
}

/// Number of learnable scalars (running statistics excluded).
template <typename Real>
std::size_t count_parameters(const Network<Real>& net) {
    std::size_t n = 0;
    for (const auto& p : net.params())
        if (p.trainable) n += p.tensor.numel();
    return n;
}

/// A network whose outputs are those of the last block of pyramid `p`,
/// with copied weights.
template <typename Real>
Network<Real> cut_network(const Network<Real>& net, int pyramid_index) {
    if (pyramid_index < 1 || pyramid_index > net.pyramids_built()) {
        throw std::invalid_argument("cut_network: pyramid index " + std::to_string(pyramid_index) + " outside [1," +
                                    std::to_string(net.pyramids_built()) + "]");
    }
    Network<Real> cut(net.config(), 0, pyramid_index);
    if (net.decoupled()) cut.decouple_action_poses();
    cut.copy_values_from(net);
    return cut;
}

}  // namespace mtpose
