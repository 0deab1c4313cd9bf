#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mtpose/action_head.hpp"
#include "mtpose/conv.hpp"
#include "mtpose/grad_check.hpp"
#include "mtpose/network.hpp"
#include "mtpose/ops.hpp"
#include "mtpose/pose_regression.hpp"
#include "mtpose/training.hpp"

namespace mtpose {

struct GradSuiteEntry {
    std::string op;
    std::string case_label;  // shapes checked
    GradCheckReport report;
};

struct GradSuiteOptions {
    double eps = 1e-3;
    double tol = 1e-3;
    std::uint64_t seed = 7;
    /// Adds a deliberately broken op (gradient off by 10%); the suite must
    /// then fail.
    bool inject_bug = false;
};

/// Scaling by 1 whose backward overstates the gradient by 10%.
template <typename Real>
Tensor<Real> broken_identity(const Tensor<Real>& x) {
    std::vector<Real> y(x.data().begin(), x.data().end());
    return make_result<Real>("broken_identity", x.shape(), std::move(y), {x}, [x](const std::vector<Real>& g) {
        Real* gx = grad_target(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += Real(1.1) * g[i];
    });
}

namespace detail {

using T64 = Tensor<double>;

inline T64 rnd(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) { return T64::uniform(std::move(s), lo, hi, rng); }

/// Values at least `gap` away from zero, so |x| and relu have no kink
/// within eps.
inline T64 rnd_away_from_zero(Shape s, std::mt19937_64& rng, double gap = 0.05) {
    auto t = rnd(std::move(s), rng, gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (auto& v : t.data()) v = sign(rng) ? v : -v;
    return t;
}

/// Distinct values spaced ≥ 0.01 apart (in shuffled order), so max
/// selections are stable under perturbation.
inline T64 rnd_distinct(Shape s, std::mt19937_64& rng) {
    T64 t(std::move(s));
    std::vector<std::size_t> order(t.numel());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) t[order[i]] = 0.01 * static_cast<double>(i) - 0.3;
    return t;
}

/// Fixed random weights for a scalar readout, so checks see non-uniform
/// output gradients.
inline T64 readout(const T64& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
    std::vector<double> w(y.numel());
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : w) v = u(rng);
    return weighted_sum(y, w);
}

inline std::string dims(const std::vector<T64>& in) {
    std::string s;
    for (std::size_t i = 0; i < in.size(); ++i) s += (i ? " " : "") + shape_str(in[i].shape());
    return s;
}

/// Small 2-PB configuration (P=2, L=2) for whole-network checks.
inline NetworkConfig tiny_network_config() {
    NetworkConfig c;
    c.pyramids = 2;
    c.levels = 2;
    c.input_height = c.input_width = 32;  // level 2 maps are 2×2
    c.entry_channels = 4;
    c.channel_growth = 2;
    c.joints = 3;
    c.actions = 3;
    c.clip_length = 2;
    c.action_features = 4;
    c.action_start_pyramid = 1;
    c.kernel_size = 3;
    return c;
}

}  // namespace detail

/// Finite-difference checks of every differentiable op in double
/// precision, three seeded shapes each, plus a whole 2-PB network.
inline std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& so = {}) {
    using detail::T64;
    std::vector<GradSuiteEntry> out;
    GradCheckOptions opt;
    opt.eps = so.eps;
    opt.tol = so.tol;
    opt.seed = so.seed;

    auto run = [&](const std::string& op, int shape_idx, std::vector<T64> inputs,
                   const std::function<T64(const std::vector<T64>&)>& fn, const GradCheckOptions& o) {
        const std::uint64_t rs = so.seed * 1000 + static_cast<std::uint64_t>(shape_idx);
        auto wrapped = [&](const std::vector<T64>& in) { return detail::readout(fn(in), rs); };
        const std::string label = detail::dims(inputs);
        out.push_back({op, label, grad_check<double>(wrapped, std::move(inputs), o)});
    };

    for (int k = 0; k < 3; ++k) {
        std::mt19937_64 rng(so.seed * 7919 + static_cast<std::uint64_t>(k));
        const int h = 4 + k, w = 5 + k, c = 2 + k % 2;
        const int n = 1 + k % 2;
        using detail::rnd;

        // tensor-level ops
        run("conv2d/same", k, {rnd({n, h, w, c}, rng), rnd({3, 3, c, 3}, rng), rnd({3}, rng)},
            [](const auto& in) { return conv2d(in[0], in[1], 1, Padding::same, in[2]); }, opt);
        run("conv2d/valid", k, {rnd({n, h, w, c}, rng), rnd({3, 3, c, 2}, rng)},
            [](const auto& in) { return conv2d(in[0], in[1], 1, Padding::valid); }, opt);
        run("conv2d/stride2", k, {rnd({n, h + 2, w + 1, c}, rng), rnd({3 + 2 * (k % 2), 3 + 2 * (k % 2), c, 2}, rng)},
            [](const auto& in) { return conv2d(in[0], in[1], 2, Padding::same); }, opt);
        run("depthwise_conv2d", k, {rnd({n, h, w, c}, rng), rnd({3, 3, c}, rng)},
            [](const auto& in) { return depthwise_conv2d(in[0], in[1], Padding::same); }, opt);
        run("depthwise_separable_conv2d", k,
            {rnd({n, h, w, c}, rng), rnd({5, 5, c}, rng), rnd({1, 1, c, 3}, rng), rnd({3}, rng)},
            [](const auto& in) { return depthwise_separable_conv2d(in[0], in[1], in[2], in[3]); }, opt);
        run("maxpool2", k, {detail::rnd_distinct({n, 2 * h, 2 * w, c}, rng)},
            [](const auto& in) { return maxpool2(in[0]); }, opt);
        run("upsample2", k, {rnd({n, h, w, c}, rng)}, [](const auto& in) { return upsample2(in[0]); }, opt);
        run("batchnorm/train", k, {rnd({n + 1, h, w, c}, rng), rnd({c}, rng, 0.5, 1.5), rnd({c}, rng)},
            [c](const auto& in) {
                return batchnorm(in[0], in[1], in[2], T64::zeros({c}), T64::full({c}, 1.0), NormMode::train);
            },
            opt);
        run("batchnorm/eval", k, {rnd({n, h, w, c}, rng), rnd({c}, rng, 0.5, 1.5), rnd({c}, rng)},
            [c](const auto& in) {
                return batchnorm(in[0], in[1], in[2], T64::full({c}, 0.2), T64::full({c}, 1.5), NormMode::eval);
            },
            opt);
        run("relu", k, {detail::rnd_away_from_zero({n, h, w, c}, rng)}, [](const auto& in) { return relu(in[0]); }, opt);
        run("sigmoid", k, {rnd({n, h, w, c}, rng, -4, 4)}, [](const auto& in) { return sigmoid(in[0]); }, opt);
        run("global_avg_pool", k, {rnd({n, h, w, c}, rng)}, [](const auto& in) { return global_avg_pool(in[0]); }, opt);
        run("linear", k, {rnd({n + 1, c + 2}, rng), rnd({c + 2, 3}, rng), rnd({3}, rng)},
            [](const auto& in) { return linear(in[0], in[1], in[2]); }, opt);
        run("softmax_last", k, {rnd({n + 1, c + 2}, rng, -2, 2)}, [](const auto& in) { return softmax_last(in[0]); }, opt);

        // pose readouts
        const int j = 2 + k;
        run("spatial_softmax", k, {rnd({n, h, w, j}, rng, -2, 2)},
            [](const auto& in) { return spatial_softmax(in[0]); }, opt);
        run("soft_argmax_2d", k, {rnd({n, h, w, j}, rng, -2, 2)},
            [](const auto& in) { return soft_argmax_2d(spatial_softmax(in[0])); }, opt);
        run("depth_regress", k, {rnd({n, h, w, j}, rng, -2, 2), rnd({n, h, w, j}, rng, -2, 2)},
            [](const auto& in) { return depth_regress(spatial_softmax(in[0]), sigmoid(in[1])); }, opt);
        run("joint_confidence", k, {detail::rnd_distinct({n, h, w, j}, rng)},
            [](const auto& in) { return joint_confidence(spatial_softmax(in[0])); }, opt);
        run("pose_reinject", k,
            {rnd({n, h, w, j}, rng), rnd({n, h, w, j}, rng), rnd({n, h, w, c}, rng), rnd({n, h, w, c}, rng),
             rnd({1, 1, j, c}, rng), rnd({1, 1, j, c}, rng)},
            [](const auto& in) { return pose_reinject(in[0], in[1], in[2], in[3], in[4], in[5]); }, opt);

        // action features
        const int t = 2 + k % 2;
        run("pose_feature_image", k, {rnd({n * t, j, 3}, rng, 0, 1), rnd({n * t, j}, rng, 0, 1)},
            [t](const auto& in) { return pose_feature_image(in[0], in[1], t); }, opt);
        run("extract_appearance_features", k, {rnd({n, h, w, c + 1}, rng), rnd({n, h, w, j}, rng, 0, 1)},
            [](const auto& in) { return extract_appearance_features(in[0], in[1]); }, opt);
        run("aggregate_action_features", k,
            {rnd({n, t, j, 3}, rng), rnd({n, t, j, c}, rng), rnd({1, 1, 3, 4}, rng), rnd({1, 1, c, 4}, rng),
             rnd({n, t, j, 4}, rng)},
            [](const auto& in) {
                AggregationParams<double> p{in[2], {}, in[3], {}};
                return aggregate_action_features(in[0], in[1], in[4], T64{}, p);
            },
            opt);
        run("action_predict", k,
            {rnd({n, t, j, 4}, rng), rnd({3, 3, 4, 4}, rng), rnd({3, 3, 4, 4}, rng), rnd({4, 3}, rng), rnd({3}, rng)},
            [](const auto& in) {
                ActionHeadParams<double> p{in[1], {}, in[2], {}, in[3], in[4]};
                return action_predict(in[0], p).probs;
            },
            opt);

        // losses
        {
            // pred = gt + e with |e| >= 0.05 keeps every residual off the |e| kink
            const auto gt = rnd({n, j, 3}, rng);
            const auto pred = add(gt, detail::rnd_away_from_zero({n, j, 3}, rng)).detach();
            T64 mask(gt.shape(), 1.0);
            mask[0] = 0.0;
            run("elastic_net_loss", k, {pred},
                [gt, mask](const auto& in) { return elastic_net_loss(in[0], gt, mask); }, opt);
        }
        run("confidence_loss", k, {rnd({n, j}, rng, -3, 3)},
            [n, j, k](const auto& in) {
                std::mt19937_64 g(static_cast<std::uint64_t>(k));
                return confidence_loss(sigmoid(in[0]), T64::uniform({n, j}, 0.0, 1.0, g));
            },
            opt);
        run("action_loss", k, {rnd({n + 1, 4}, rng, -2, 2)},
            [n](const auto& in) {
                std::vector<int> labels;
                for (int i = 0; i < n + 1; ++i) labels.push_back((i * 3 + 1) % 4);
                return action_loss(softmax_last(in[0]), labels);
            },
            opt);
        run("total_loss", k, {rnd({2}, rng), rnd({2}, rng), rnd({1}, rng)},
            [](const auto& in) {
                return total_loss<double>({sum(square(in[0]))}, {sum(square(in[1]))}, {sum(square(in[2]))});
            },
            opt);

        if (so.inject_bug) {
            run("broken_identity", k, {rnd({n, h, w, c}, rng)}, [](const auto& in) { return broken_identity(in[0]); }, opt);
        }
    }

    // whole 2-PB network, video mode, summed losses over every block
    for (int k = 0; k < 3; ++k) {
        auto cfg = detail::tiny_network_config();
        if (k == 1) cfg.clip_length = 3;
        if (k == 2) cfg.input_width = 48;
        Network<double> net(cfg, so.seed + static_cast<std::uint64_t>(k));
        std::mt19937_64 rng(so.seed * 31 + static_cast<std::uint64_t>(k));
        // non-zero re-injection so every path carries gradient; running
        // statistics away from the (0, 1) initial values
        for (auto& p : net.params()) {
            if (p.name.find("/w_r") != std::string::npos || p.name.find("/w_s") != std::string::npos)
                for (auto& v : p.tensor.data()) v = std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
            if (!p.trainable) {
                const bool var = p.name.find("running_var") != std::string::npos;
                for (auto& v : p.tensor.data()) v = std::uniform_real_distribution<double>(var ? 0.5 : -0.2, var ? 1.5 : 0.2)(rng);
            }
        }
        const int frames = cfg.clip_length;  // one clip: fewer activations near a kink
        const auto images = detail::rnd({frames, cfg.input_height, cfg.input_width, 3}, rng, 0, 1);
        const auto gt = detail::rnd({frames, cfg.joints, 3}, rng, 0, 1);
        const auto conf = detail::rnd({frames, cfg.joints}, rng, 0, 1);
        const T64 mask({frames, cfg.joints, 3}, 1.0);
        std::vector<int> labels{1};
        std::vector<T64> inputs;
        for (auto& p : net.params())
            if (p.trainable) inputs.push_back(p.tensor);
        auto fn = [&](const std::vector<T64>&) {
            ForwardOptions fo;
            fo.video = true;
            // batch statistics over a few 16×16 frames flip many relu/max
            // decisions per eps step; train-mode batchnorm is checked on its own
            fo.pose_norm = NormMode::eval;
            const auto res = net.forward(images, fo);
            std::vector<T64> pose, cl, act;
            for (const auto& b : res.blocks) {
                pose.push_back(elastic_net_loss(b.pose.joints, gt, mask));
                cl.push_back(confidence_loss(b.pose.confidence, conf));
                if (b.action) act.push_back(action_loss(b.action->probs, labels));
            }
            return total_loss(pose, cl, act, LossWeights{1.0, 0.5, 0.5});
        };
        GradCheckOptions o = opt;
        o.max_coords_per_input = 4;
        o.skip_nonsmooth = true;
        const std::string label = "P=2 L=2 " + std::to_string(cfg.input_height) + "x" + std::to_string(cfg.input_width) +
                                  " T=" + std::to_string(cfg.clip_length) + ", " + std::to_string(inputs.size()) +
                                  " parameter tensors";
        out.push_back({"network_2pb", label, grad_check<double>(fn, std::move(inputs), o)});
    }
    return out;
}

inline bool grad_suite_passed(const std::vector<GradSuiteEntry>& entries) {
    for (const auto& e : entries)
        if (!e.report.pass) return false;
    return !entries.empty();
}

}  // namespace mtpose
