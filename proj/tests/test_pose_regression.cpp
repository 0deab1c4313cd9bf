#include <gtest/gtest.h>

#include <cmath>

#include "mtpose/grad_check.hpp"
#include "mtpose/pose_regression.hpp"
#include "test_util.hpp"

using namespace mtpose;
using testutil::rand_tensor;

namespace {

using T = Tensor<double>;

// [H, W, 1] map with the given cells set.
T map1(int h, int w, std::vector<std::tuple<int, int, double>> cells, double fill = 0.0) {
    T m(Shape{h, w, 1}, fill);
    for (auto [r, c, v] : cells) m[static_cast<std::size_t>(r * w + c)] = v;
    return m;
}

T uniform_map(int h, int w) { return T(Shape{h, w, 1}, 1.0 / (h * w)); }

}  // namespace

TEST(SpatialSoftmax, ZeroLogitsGiveUniformMap) {
    const auto h = spatial_softmax(T(Shape{4, 4, 2}, 0.0));
    for (double v : h.values()) EXPECT_NEAR(v, 1.0 / 16, 1e-15);
}

TEST(SpatialSoftmax, LargeLogitConcentratesMass) {
    const auto h = spatial_softmax(map1(4, 4, {{1, 2, 100.0}}));
    EXPECT_GT(h[1 * 4 + 2], 0.999);
}

TEST(SpatialSoftmax, EachJointSumsToOne) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto h = spatial_softmax(rand_tensor<float>({2, 5, 6, 3}, s, -30, 30));
        for (int n = 0; n < 2; ++n)
            for (int j = 0; j < 3; ++j) {
                double total = 0;
                for (int p = 0; p < 30; ++p) {
                    const float v = h[(static_cast<std::size_t>(n) * 30 + p) * 3 + j];
                    EXPECT_GE(v, 0.0f);
                    total += v;
                }
                EXPECT_NEAR(total, 1.0, 1e-5);
            }
    }
}

TEST(SpatialSoftmax, ExtremeLogitsStayFinite) {
    const auto h = spatial_softmax(map1(3, 3, {{0, 0, 1e4}, {2, 2, -1e4}}));
    for (double v : h.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(SoftArgmax, OneHotGivesPixelCentre) {
    const auto xy = soft_argmax_2d(map1(4, 4, {{1, 2, 1.0}}));
    EXPECT_NEAR(xy[0], 0.625, 1e-12);
    EXPECT_NEAR(xy[1], 0.375, 1e-12);
}

TEST(SoftArgmax, UniformMapGivesCentre) {
    const auto xy = soft_argmax_2d(uniform_map(4, 4));
    EXPECT_NEAR(xy[0], 0.5, 1e-12);
    EXPECT_NEAR(xy[1], 0.5, 1e-12);
}

TEST(SoftArgmax, BimodalMassAveragesCentres) {
    const auto xy = soft_argmax_2d(map1(4, 4, {{0, 0, 0.5}, {0, 3, 0.5}}));
    EXPECT_NEAR(xy[0], 0.5, 1e-12);
    EXPECT_NEAR(xy[1], 0.125, 1e-12);
}

TEST(SoftArgmax, PointyDistributionApproachesArgmaxCell) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 8, w = 6;
        auto logits = rand_tensor({h, w, 1}, 50 + trial, -5, 5);
        const int r = static_cast<int>(rng() % h), c = static_cast<int>(rng() % w);
        logits[static_cast<std::size_t>(r * w + c)] = 5 + 20;  // margin >= 20
        const auto xy = soft_argmax_2d(spatial_softmax(logits));
        EXPECT_LT(std::abs(xy[0] - (c + 0.5) / w), 1.0 / (2 * w));
        EXPECT_LT(std::abs(xy[1] - (r + 0.5) / h), 1.0 / (2 * h));
    }
}

TEST(SoftArgmax, ShiftEquivariance) {
    const int h = 12, w = 10;
    for (std::uint64_t s = 0; s < 5; ++s) {
        // mass confined to a 4x4 window at rows/cols [3, 7) so shifts by up to 2 stay >= 2 cells off the border
        T logits(Shape{h, w, 1}, -1e9);
        const auto inner = rand_tensor({4, 4, 1}, 60 + s, -2, 2);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) logits[static_cast<std::size_t>((r + 3) * w + c + 3)] = inner[r * 4 + c];
        const auto base = soft_argmax_2d(spatial_softmax(logits));
        for (auto [dr, dc] : std::vector<std::pair<int, int>>{{1, 2}, {-1, 0}, {2, -1}}) {
            T shifted(Shape{h, w, 1});
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c)
                    shifted[static_cast<std::size_t>(((r + dr + h) % h) * w + (c + dc + w) % w)] = logits[r * w + c];
            const auto xy = soft_argmax_2d(spatial_softmax(shifted));
            EXPECT_NEAR(xy[0] - base[0], static_cast<double>(dc) / w, 1e-4);
            EXPECT_NEAR(xy[1] - base[1], static_cast<double>(dr) / h, 1e-4);
        }
    }
}

TEST(SoftArgmax, ResolutionConsistencyUpToHalfPixel) {
    // the same relative position (row, col) = (1/4, 5/8) of the map
    const auto a = soft_argmax_2d(map1(8, 8, {{2, 5, 1.0}}));
    const auto b = soft_argmax_2d(map1(16, 16, {{4, 10, 1.0}}));
    EXPECT_NEAR(a[0] - 0.5 / 8, b[0] - 0.5 / 16, 1e-12);
    EXPECT_NEAR(a[1] - 0.5 / 8, b[1] - 0.5 / 16, 1e-12);
}

TEST(SoftArgmax, OutputsStayInUnitSquare) {
    const auto xy = soft_argmax_2d(spatial_softmax(rand_tensor<float>({3, 7, 5, 4}, 70, -50, 50)));
    for (float v : xy.values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(DepthRegress, ConstantDepthMapGivesThatDepth) {
    const auto h = spatial_softmax(rand_tensor({5, 5, 2}, 80));
    const auto z = depth_regress(h, T(Shape{5, 5, 2}, 0.3));
    EXPECT_NEAR(z[0], 0.3, 1e-12);
    EXPECT_NEAR(z[1], 0.3, 1e-12);
}

TEST(DepthRegress, OneHotReadsThatCell) {
    auto d = map1(4, 4, {{1, 2, 0.7}}, 0.1);
    EXPECT_NEAR(depth_regress(map1(4, 4, {{1, 2, 1.0}}), d).item(), 0.7, 1e-12);
}

TEST(DepthRegress, TwoHalfMassesAverage) {
    const auto h = map1(4, 4, {{0, 0, 0.5}, {3, 1, 0.5}});
    const auto d = map1(4, 4, {{0, 0, 0.2}, {3, 1, 0.6}}, 0.9);
    EXPECT_NEAR(depth_regress(h, d).item(), 0.4, 1e-12);
}

TEST(DepthRegress, StaysWithinDepthRange) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto h = spatial_softmax(rand_tensor({6, 6, 3}, 90 + s, -4, 4));
        const auto d = rand_tensor({6, 6, 3}, 190 + s, 0.05, 0.95);
        const auto z = depth_regress(h, d);
        for (int j = 0; j < 3; ++j) {
            double lo = 1, hi = 0;
            for (int p = 0; p < 36; ++p) lo = std::min(lo, d[p * 3 + j]), hi = std::max(hi, d[p * 3 + j]);
            EXPECT_GE(z[j], lo);
            EXPECT_LE(z[j], hi);
        }
    }
}

TEST(DepthRegress, ShapeMismatchRejected) {
    EXPECT_THROW(depth_regress(T(Shape{4, 4, 2}), T(Shape{4, 4, 3})), std::invalid_argument);
}

TEST(JointConfidence, MaxOfMap) {
    EXPECT_DOUBLE_EQ(joint_confidence(map1(4, 4, {{3, 3, 1.0}})).item(), 1.0);
    EXPECT_DOUBLE_EQ(joint_confidence(uniform_map(4, 4)).item(), 0.0625);
    EXPECT_DOUBLE_EQ(joint_confidence(map1(4, 4, {{0, 1, 0.42}, {2, 2, 0.38}, {3, 0, 0.2}})).item(), 0.42);
}

TEST(JointConfidence, TiesAreFine) {
    EXPECT_DOUBLE_EQ(joint_confidence(map1(2, 2, {{0, 0, 0.5}, {1, 1, 0.5}})).item(), 0.5);
}

TEST(Readouts, GradientsFromLogitsMatchFiniteDifferences) {
    GradCheckOptions o;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const Shape shape{2, 4 + static_cast<int>(s), 5, 3};
        const auto wx = rand_tensor({2, 3, 2}, 300 + s).values();
        const auto wz = rand_tensor({2, 3}, 310 + s).values();
        const auto wc = rand_tensor({2, 3}, 320 + s).values();
        const auto r = grad_check<double>(
            [&](std::vector<T>& in) {
                const auto h = spatial_softmax(in[0]);
                return add(add(weighted_sum(soft_argmax_2d(h), wx), weighted_sum(depth_regress(h, sigmoid(in[1])), wz)),
                           weighted_sum(joint_confidence(h), wc));
            },
            {rand_tensor(shape, 330 + s, -2, 2), rand_tensor(shape, 340 + s)}, o);
        EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
    }
}

TEST(PoseReinject, ZeroProjectionsGiveSumOfFeatures) {
    const auto h = rand_tensor({4, 4, 3}, 400), d = rand_tensor({4, 4, 3}, 401);
    const auto zp = rand_tensor({4, 4, 5}, 402), z = rand_tensor({4, 4, 5}, 403);
    const auto x = pose_reinject(h, d, zp, z, T(Shape{1, 1, 3, 5}, 0.0), T(Shape{1, 1, 3, 5}, 0.0));
    ASSERT_EQ(x.shape(), z.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], zp[i] + z[i]);
}

TEST(PoseReinject, OutputShapeMatchesFeatures) {
    for (auto [nj, nf] : std::vector<std::pair<int, int>>{{1, 1}, {8, 4}, {17, 32}}) {
        const auto x = pose_reinject(T(Shape{2, 3, 3, nj}), T(Shape{2, 3, 3, nj}), T(Shape{2, 3, 3, nf}),
                                     T(Shape{2, 3, 3, nf}), T(Shape{1, 1, nj, nf}), T(Shape{1, 1, nj, nf}));
        EXPECT_EQ(x.shape(), (Shape{2, 3, 3, nf}));
    }
}

TEST(PoseReinject, ChannelMismatchRejected) {
    EXPECT_THROW(pose_reinject(T(Shape{3, 3, 2}), T(Shape{3, 3, 2}), T(Shape{3, 3, 4}), T(Shape{3, 3, 4}),
                               T(Shape{1, 1, 2, 5}), T(Shape{1, 1, 2, 5})),
                 std::invalid_argument);
}

TEST(PoseReinject, GradientFlowsToMaps) {
    auto h = rand_tensor({3, 3, 2}, 410), d = rand_tensor({3, 3, 2}, 411);
    h.set_requires_grad(true);
    d.set_requires_grad(true);
    const auto x = pose_reinject(h, d, rand_tensor({3, 3, 4}, 412), rand_tensor({3, 3, 4}, 413), rand_tensor({1, 1, 2, 4}, 414),
                                 rand_tensor({1, 1, 2, 4}, 415));
    backward(sum(square(x)));
    double gh = 0, gd = 0;
    for (double g : h.grad()) gh += std::abs(g);
    for (double g : d.grad()) gd += std::abs(g);
    EXPECT_GT(gh, 0);
    EXPECT_GT(gd, 0);
    const auto r = grad_check<double>(
        [](std::vector<T>& in) { return sum(square(pose_reinject(in[0], in[1], in[2], in[3], in[4], in[5]))); },
        {rand_tensor({3, 3, 2}, 420), rand_tensor({3, 3, 2}, 421), rand_tensor({3, 3, 4}, 422), rand_tensor({3, 3, 4}, 423),
         rand_tensor({1, 1, 2, 4}, 424), rand_tensor({1, 1, 2, 4}, 425)});
    EXPECT_TRUE(r.pass);
}

TEST(AssemblePose, TwoDimensionalModeFixesDepth) {
    const auto xy = rand_tensor({3, 5, 2}, 500, 0, 1);
    const auto p = assemble_pose(xy, T{}, rand_tensor({3, 5}, 501, 0, 1));
    for (int i = 0; i < 15; ++i) EXPECT_EQ(p.joints[i * 3 + 2], 0.5);
}

TEST(AssemblePose, SeventeenJoints) {
    const auto p = assemble_pose(T(Shape{17, 2}), T(Shape{17}), T(Shape{17}));
    EXPECT_EQ(to_poses(p).front().num_joints(), 17);
}

TEST(AssemblePose, PreservesReadoutValuesExactly) {
    const auto h = spatial_softmax(rand_tensor({4, 5, 6, 3}, 510));
    const auto xy = soft_argmax_2d(h);
    const auto z = depth_regress(h, sigmoid(rand_tensor({4, 5, 6, 3}, 511)));
    const auto p = assemble_pose(xy, z, joint_confidence(h));
    for (int i = 0; i < 12; ++i) {
        EXPECT_EQ(p.joints[i * 3], xy[i * 2]);
        EXPECT_EQ(p.joints[i * 3 + 1], xy[i * 2 + 1]);
        EXPECT_EQ(p.joints[i * 3 + 2], z[i]);
    }
}

TEST(AssemblePose, JointCountMismatchRejected) {
    EXPECT_THROW(assemble_pose(T(Shape{4, 2}), T(Shape{3}), T(Shape{4})), std::invalid_argument);
    EXPECT_THROW(assemble_pose(T(Shape{4, 2}), T(Shape{4}), T(Shape{5})), std::invalid_argument);
}
