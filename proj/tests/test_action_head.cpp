#include <gtest/gtest.h>

#include <numeric>

#include "mtpose/action_head.hpp"
#include "mtpose/grad_check.hpp"
#include "mtpose/network.hpp"
#include "mtpose/training.hpp"
#include "test_util.hpp"

using namespace mtpose;
using testutil::rand_tensor;

namespace {

Tensor<double> softmaxed_maps(Shape shape, std::uint64_t seed) {
    return spatial_softmax(rand_tensor(std::move(shape), seed, -2, 2)).detach();
}

NetworkConfig tiny_config() {
    NetworkConfig c;
    c.input_height = c.input_width = 32;
    c.entry_channels = 8;
    c.channel_growth = 4;
    c.joints = 4;
    c.actions = 3;
    c.clip_length = 2;
    c.action_features = 6;
    c.kernel_size = 3;
    return c;
}

NetworkConfig with_input(NetworkConfig c, int size) {
    c.input_height = c.input_width = size;
    return c;
}

bool all_zero(std::span<const float> g) {
    return std::all_of(g.begin(), g.end(), [](float v) { return v == 0.0f; });
}

bool any_nonzero(std::span<const float> g) { return !g.empty() && !all_zero(g); }

}  // namespace

// ------------------------------------------------------------- pose features

TEST(PoseFeatures, ConfidenceWeightsCoordinates) {
    Tensor<double> joints(Shape{2, 2, 3}, {0.2, 0.4, 0.6, 0.1, 0.3, 0.5, 1, 1, 1, 0.5, 0.5, 0.5});
    Tensor<double> conf(Shape{2, 2}, {1.0, 0.5, 0.0, 0.25});
    const auto f = pose_feature_image(joints, conf, 2);
    EXPECT_EQ(f.shape(), (Shape{1, 2, 2, 3}));
    const std::vector<double> expect{0.2, 0.4, 0.6, 0.05, 0.15, 0.25, 0, 0, 0, 0.125, 0.125, 0.125};
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(f[i], expect[i], 1e-15);
}

TEST(PoseFeatures, TwoDimensionalDropsDepth) {
    Tensor<double> joints(Shape{1, 1, 3}, {0.2, 0.4, 0.9});
    Tensor<double> conf(Shape{1, 1}, {0.5});
    const auto f = pose_feature_image(joints, conf, 1, 2);
    EXPECT_EQ(f.shape(), (Shape{1, 1, 1, 2}));
    EXPECT_NEAR(f[0], 0.1, 1e-15);
    EXPECT_NEAR(f[1], 0.2, 1e-15);
}

TEST(PoseFeatures, EncodeFromPoseValues) {
    std::vector<Pose> poses(2);
    for (int t = 0; t < 2; ++t) {
        for (int j = 0; j < 3; ++j) {
            poses[t].joints.push_back({0.1f * j, 0.2f, 0.3f + t * 0.1f});
            poses[t].confidence.push_back(j == 1 ? 0.0f : 1.0f);
        }
    }
    const auto f = encode_pose_features(poses);
    EXPECT_EQ(f.shape(), (Shape{2, 3, 3}));
    for (int t = 0; t < 2; ++t)
        for (int k = 0; k < 3; ++k) EXPECT_EQ(f[(t * 3 + 1) * 3 + k], 0.0f) << "zero-confidence row";
    EXPECT_FLOAT_EQ(f[(1 * 3 + 2) * 3 + 2], 0.4f);
}

TEST(PoseFeatures, MismatchedJointCountsRejected) {
    std::vector<Pose> poses(2);
    poses[0].joints.assign(3, {0, 0, 0});
    poses[0].confidence.assign(3, 1);
    poses[1].joints.assign(2, {0, 0, 0});
    poses[1].confidence.assign(2, 1);
    EXPECT_THROW(encode_pose_features(poses), std::invalid_argument);
    EXPECT_THROW(encode_pose_features({}), std::invalid_argument);
    EXPECT_THROW(pose_feature_image(rand_tensor({3, 2, 3}, 1), rand_tensor({3, 2}, 2), 2), std::invalid_argument);
}

TEST(PoseFeatures, ZeroConfidenceJointGetsNoCoordinateGradient) {
    auto joints = rand_tensor({2, 3, 3}, 3, 0, 1);
    joints.set_requires_grad(true);
    Tensor<double> conf(Shape{2, 3}, {1, 0, 0.5, 0.2, 0.7, 0});
    backward(sum(pose_feature_image(joints, conf, 2)));
    const auto g = joints.grad();
    for (int n = 0; n < 2; ++n)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(g[(n * 3 + j) * 3 + k], conf[n * 3 + j]);
}

// ------------------------------------------------------- appearance features

TEST(AppearanceFeatures, OneHotMapSelectsLocation) {
    const auto z = rand_tensor({4, 5, 3}, 4);
    Tensor<double> h(Shape{4, 5, 2}, std::vector<double>(40, 0.0));
    h[(2 * 5 + 3) * 2 + 0] = 1.0;
    h[(0 * 5 + 4) * 2 + 1] = 1.0;
    const auto v = extract_appearance_features(z, h);
    EXPECT_EQ(v.shape(), (Shape{2, 3}));
    for (int f = 0; f < 3; ++f) {
        EXPECT_EQ(v[f], z[(2 * 5 + 3) * 3 + f]);
        EXPECT_EQ(v[3 + f], z[(0 * 5 + 4) * 3 + f]);
    }
}

TEST(AppearanceFeatures, UniformMapGivesSpatialMean) {
    const auto z = rand_tensor({1, 3, 4, 2}, 5);
    Tensor<double> h(Shape{1, 3, 4, 1}, std::vector<double>(12, 1.0 / 12));
    const auto v = extract_appearance_features(z, h);
    for (int f = 0; f < 2; ++f) {
        double mean = 0;
        for (int p = 0; p < 12; ++p) mean += z[p * 2 + f] / 12;
        EXPECT_NEAR(v[f], mean, 1e-14);
    }
}

TEST(AppearanceFeatures, MatchesBruteForceOracleOverSeeds) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const int n = 2, hh = 5, ww = 6, nj = 3, nf = 4;
        const auto z = rand_tensor({n, hh, ww, nf}, 100 + seed);
        const auto h = softmaxed_maps({n, hh, ww, nj}, 200 + seed);
        const auto v = extract_appearance_features(z, h);
        for (int b = 0; b < n; ++b)
            for (int j = 0; j < nj; ++j)
                for (int f = 0; f < nf; ++f) {
                    long double acc = 0;
                    for (int r = 0; r < hh; ++r)
                        for (int c = 0; c < ww; ++c)
                            acc += static_cast<long double>(h[((b * hh + r) * ww + c) * nj + j]) *
                                   z[((b * hh + r) * ww + c) * nf + f];
                    EXPECT_NEAR(v[(b * nj + j) * nf + f], static_cast<double>(acc), 1e-12) << "seed " << seed;
                }
    }
}

TEST(AppearanceFeatures, Gradcheck) {
    const auto w = rand_tensor({2, 3, 4}, 6).values();
    const auto r = grad_check<double>(
        [&](std::vector<Tensor<double>>& in) { return weighted_sum(extract_appearance_features(in[0], in[1]), w); },
        {rand_tensor({2, 4, 3, 4}, 7), softmaxed_maps({2, 4, 3, 3}, 8)});
    EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
}

TEST(AppearanceFeatures, SpatialMismatchRejected) {
    EXPECT_THROW(extract_appearance_features(rand_tensor({1, 4, 4, 2}, 1), rand_tensor({1, 4, 5, 2}, 2)),
                 std::invalid_argument);
}

// ---------------------------------------------------------------- aggregation

namespace {
AggregationParams<double> agg_params(int dims, int nf, int nv, std::uint64_t seed) {
    return {rand_tensor({1, 1, dims, nv}, seed), rand_tensor({nv}, seed + 1), rand_tensor({1, 1, nf, nv}, seed + 2),
            rand_tensor({nv}, seed + 3)};
}
}  // namespace

TEST(Aggregation, ShapeAndZeroAppearanceProjection) {
    auto p = agg_params(3, 5, 4, 10);
    std::fill(p.appearance_proj.data().begin(), p.appearance_proj.data().end(), 0.0);
    std::fill(p.appearance_bias.data().begin(), p.appearance_bias.data().end(), 0.0);
    const auto pose = rand_tensor({2, 3, 4, 3}, 11);
    const auto y = aggregate_action_features(pose, rand_tensor({2, 3, 4, 5}, 12), {}, {}, p);
    EXPECT_EQ(y.shape(), (Shape{2, 3, 4, 4}));
    const auto only_pose = conv2d(pose, p.pose_proj, 1, Padding::same, p.pose_bias);
    EXPECT_EQ(y.values(), only_pose.values());
}

TEST(Aggregation, PriorFeaturesAreAdded) {
    const auto p = agg_params(3, 5, 4, 20);
    const auto pose = rand_tensor({1, 2, 4, 3}, 21), app = rand_tensor({1, 2, 4, 5}, 22);
    const auto y_prev = rand_tensor({1, 2, 4, 4}, 23), y_nb = rand_tensor({1, 2, 4, 4}, 24);
    const auto base = aggregate_action_features(pose, app, {}, {}, p);
    const auto full = aggregate_action_features(pose, app, y_prev, y_nb, p);
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(full[i], base[i] + y_prev[i] + y_nb[i], 1e-14);
    EXPECT_THROW(aggregate_action_features(pose, app, rand_tensor({1, 2, 4, 3}, 25), {}, p), std::invalid_argument);
}

TEST(Aggregation, GradientReachesEveryInput) {
    const auto p = agg_params(3, 2, 3, 30);
    const auto w = rand_tensor({1, 2, 3, 3}, 31).values();
    const auto r = grad_check<double>(
        [&](std::vector<Tensor<double>>& in) {
            AggregationParams<double> q = p;
            q.pose_proj = in[2];
            q.appearance_proj = in[3];
            return weighted_sum(aggregate_action_features(in[0], in[1], in[4], {}, q), w);
        },
        {rand_tensor({1, 2, 3, 3}, 32), rand_tensor({1, 2, 3, 2}, 33), p.pose_proj.detach(), p.appearance_proj.detach(),
         rand_tensor({1, 2, 3, 3}, 34)});
    EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
}

TEST(Aggregation, ClipOrJointMismatchRejected) {
    const auto p = agg_params(3, 5, 4, 40);
    EXPECT_THROW(aggregate_action_features(rand_tensor({1, 2, 4, 3}, 1), rand_tensor({1, 3, 4, 5}, 2), {}, {}, p),
                 std::invalid_argument);
    EXPECT_THROW(aggregate_action_features(rand_tensor({1, 2, 4, 3}, 1), rand_tensor({1, 2, 5, 5}, 2), {}, {}, p),
                 std::invalid_argument);
}

// ------------------------------------------------------------ action predict

namespace {
ActionHeadParams<double> head_params(int nv, int na, std::uint64_t seed) {
    return {rand_tensor({3, 3, nv, nv}, seed, -0.3, 0.3), rand_tensor({nv}, seed + 1, -0.1, 0.1),
            rand_tensor({3, 3, nv, nv}, seed + 2, -0.3, 0.3), rand_tensor({nv}, seed + 3, -0.1, 0.1),
            rand_tensor({nv, na}, seed + 4), rand_tensor({na}, seed + 5)};
}
}  // namespace

TEST(ActionPredict, ZeroClassifierGivesUniformDistribution) {
    auto p = head_params(4, 5, 50);
    std::fill(p.fc.data().begin(), p.fc.data().end(), 0.0);
    std::fill(p.fc_bias.data().begin(), p.fc_bias.data().end(), 0.0);
    const auto out = action_predict(rand_tensor({3, 4, 6, 4}, 51), p);
    EXPECT_EQ(out.probs.shape(), (Shape{3, 5}));
    for (double v : out.probs.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(ActionPredict, RowsAreValidDistributions) {
    const auto out = action_predict(rand_tensor({4, 4, 6, 4}, 52, -5, 5), head_params(4, 7, 53));
    for (const auto& pr : to_action_probs(out.probs)) EXPECT_TRUE(pr.valid(1e-12));
}

TEST(ActionPredict, SymmetricFiltersMakeJointOrderIrrelevant) {
    // kernels that only look along time treat joints independently;
    // average pooling then makes the order irrelevant
    auto p = head_params(3, 4, 60);
    for (auto* k : {&p.conv1, &p.conv2}) {
        auto d = k->data();
        for (int a = 0; a < 3; ++a)
            for (int b : {0, 2})
                for (int i = 0; i < 9; ++i) d[((a * 3 + b) * 3) * 3 + i] = 0.0;
    }
    const auto y = rand_tensor({1, 4, 5, 3}, 61);
    auto swapped = y.clone();
    for (int t = 0; t < 4; ++t)
        for (int f = 0; f < 3; ++f) std::swap(swapped[(t * 5 + 1) * 3 + f], swapped[(t * 5 + 3) * 3 + f]);
    const auto a = action_predict(y, p).logits, b = action_predict(swapped, p).logits;
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(ActionPredict, RankChecked) {
    EXPECT_THROW(action_predict(rand_tensor({4, 6, 4}, 1), head_params(4, 3, 2)), std::invalid_argument);
}

TEST(MultiClip, AverageOfDistributions) {
    const auto avg = multi_clip_average({{{0.5, 0.5, 0}}, {{0.1, 0.2, 0.7}}, {{0, 0, 1}}});
    EXPECT_NEAR(avg.values[0], 0.2, 1e-15);
    EXPECT_NEAR(avg.values[1], 0.7 / 3, 1e-15);
    EXPECT_NEAR(avg.values[2], 1.7 / 3, 1e-15);
    EXPECT_TRUE(avg.valid());
    EXPECT_EQ(avg.argmax(), 2);
}

TEST(MultiClip, SingleClipIsIdentityAndErrorsRejected) {
    const ActionProbs one{{0.25, 0.75}};
    EXPECT_EQ(multi_clip_average({one}).values, one.values);
    EXPECT_THROW(multi_clip_average({}), std::invalid_argument);
    EXPECT_THROW(multi_clip_average({one, {{1.0}}}), std::invalid_argument);
}

TEST(MultiClip, RandomValidDistributionsAverageToValid) {
    std::mt19937_64 rng(70);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ActionProbs> clips(1 + trial % 7);
        for (auto& c : clips) {
            c.values.resize(5);
            for (auto& v : c.values) v = std::exponential_distribution<double>(1.0)(rng);
            const double s = std::accumulate(c.values.begin(), c.values.end(), 0.0);
            for (auto& v : c.values) v /= s;
        }
        EXPECT_TRUE(multi_clip_average(clips).valid(1e-12));
    }
}

TEST(ActionProbs, ValidityRejectsNegativeAndNaN) {
    EXPECT_FALSE((ActionProbs{{1.2, -0.2}}).valid());
    EXPECT_FALSE((ActionProbs{{std::nan(""), 1.0}}).valid());
    EXPECT_FALSE((ActionProbs{{0.4, 0.4}}).valid());
    EXPECT_FALSE(ActionProbs{}.valid());
}

// ---------------------------------------------------------------- decoupling

namespace {
struct DecoupleFixture {
    NetworkConfig cfg = with_input(tiny_config(), 64);  // deepest maps 2x2, not 1x1
    Network<float> net{cfg, 21};
    Tensor<float> clips;
    ForwardOptions video;

    DecoupleFixture() {
        // nonzero reinjection so cross-block paths exist
        std::mt19937_64 rng(3);
        for (auto& p : net.params())
            if (p.name.find("/w_r") != std::string::npos || p.name.find("/w_s") != std::string::npos)
                for (auto& v : p.tensor.data()) v = std::uniform_real_distribution<float>(-0.1f, 0.1f)(rng);
        net.decouple_action_poses();
        clips = rand_tensor<float>({4, cfg.input_height, cfg.input_width, 3}, 22, 0, 1);
        video.video = true;
    }
    // handle copy shares storage with the network
    Tensor<float> param(const std::string& name) { return net.find(name)->tensor; }
};
}  // namespace

TEST(Decoupling, ReplicasEqualOriginalsAtCloneTime) {
    DecoupleFixture fx;
    for (const auto& b : fx.net.blocks()) {
        ASSERT_TRUE(b.decoupled);
        EXPECT_EQ(b.w_h_action.w.values(), b.w_h.w.values());
        EXPECT_EQ(b.w_d_action.b.values(), b.w_d.b.values());
        EXPECT_FALSE(b.w_h_action.w.same_storage(b.w_h.w));
    }
    const auto out = fx.net.forward(fx.clips, fx.video);
    for (const auto& s : out.blocks) EXPECT_EQ(s.action_h.values(), s.h.values());
}

TEST(Decoupling, SecondCallRejected) {
    DecoupleFixture fx;
    EXPECT_THROW(fx.net.decouple_action_poses(), std::logic_error);
}

TEST(Decoupling, PoseLossLeavesReplicasWithoutGradient) {
    DecoupleFixture fx;
    fx.net.zero_grad();
    const auto out = fx.net.forward(fx.clips, fx.video);
    std::vector<Tensor<float>> pose_terms;
    const auto target = rand_tensor<float>({4, fx.cfg.joints, 3}, 23, 0, 1);
    const Tensor<float> mask(Shape{4, fx.cfg.joints, 3}, std::vector<float>(4 * fx.cfg.joints * 3, 1.0f));
    for (const auto& s : out.blocks) pose_terms.push_back(elastic_net_loss(s.pose.joints, target, mask));
    backward(add_all(pose_terms));
    for (const auto& b : fx.net.blocks()) {
        EXPECT_TRUE(all_zero(fx.param(b.name() + "/w_h_action/w").grad())) << b.name();
        EXPECT_TRUE(all_zero(fx.param(b.name() + "/w_d_action/w").grad())) << b.name();
        EXPECT_TRUE(any_nonzero(fx.param(b.name() + "/w_h/w").grad())) << b.name();
    }
}

TEST(Decoupling, ActionLossReachesReplicaNotSameBlockReadout) {
    DecoupleFixture fx;
    fx.net.zero_grad();
    const auto out = fx.net.forward(fx.clips, fx.video);
    backward(action_loss(out.last().action->probs, {0, 2}));
    const std::string last = fx.net.blocks().back().name();
    EXPECT_TRUE(all_zero(fx.param(last + "/w_h/w").grad()));
    EXPECT_TRUE(all_zero(fx.param(last + "/w_d/w").grad()));
    EXPECT_TRUE(any_nonzero(fx.param(last + "/w_h_action/w").grad()));
}

TEST(Decoupling, PerturbingReplicaChangesLogitsNotPoses) {
    DecoupleFixture fx;
    const auto before = fx.net.forward(fx.clips, fx.video);
    for (const auto& b : fx.net.blocks())
        for (auto& v : fx.param(b.name() + "/w_h_action/w").data()) v *= 1.5f;
    const auto after = fx.net.forward(fx.clips, fx.video);
    for (std::size_t i = 0; i < before.blocks.size(); ++i) {
        EXPECT_EQ(after.blocks[i].pose.joints.values(), before.blocks[i].pose.joints.values());
        EXPECT_EQ(after.blocks[i].pose.confidence.values(), before.blocks[i].pose.confidence.values());
    }
    EXPECT_NE(after.last().action->logits.values(), before.last().action->logits.values());
}

TEST(Decoupling, AddsExactlyReadoutSizedParameters) {
    Network<float> net(tiny_config(), 5);
    const auto before = count_parameters(net);
    net.decouple_action_poses();
    std::size_t expect = 0;
    for (const auto& b : net.blocks())
        if (b.has_action) expect += 2 * (b.w_h.w.numel() + b.w_h.b.numel());
    EXPECT_EQ(count_parameters(net) - before, expect);
}
