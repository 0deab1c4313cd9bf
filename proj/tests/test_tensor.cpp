#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "mtpose/checkpoint.hpp"
#include "mtpose/conv.hpp"
#include "mtpose/grad_check.hpp"
#include "mtpose/ops.hpp"
#include "test_util.hpp"

using namespace mtpose;
using testutil::rand_tensor;

namespace {

using T = Tensor<double>;

GradCheckReport check(const std::function<T(std::vector<T>&)>& fn, std::vector<T> inputs, double tol = 1e-3) {
    GradCheckOptions o;
    o.tol = tol;
    return grad_check<double>(fn, std::move(inputs), o);
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), std::invalid_argument);
    EXPECT_THROW(Tensor<float>(Shape{2, -1}), std::invalid_argument);
    Tensor<float> t(Shape{2, 3, 4});
    EXPECT_EQ(t.numel(), 24u);
    EXPECT_EQ(t.dim(-1), 4);
}

TEST(Tensor, CopiesShareStorageCloneDoesNot) {
    Tensor<float> a(Shape{3}, 1.0f);
    Tensor<float> b = a;
    auto c = a.clone();
    a[0] = 5;
    EXPECT_EQ(b[0], 5);
    EXPECT_EQ(c[0], 1);
}

TEST(Conv2d, OneByOneIdentityKernelLeavesInputUnchanged) {
    const auto x = rand_tensor({5, 6, 1}, 1);
    const T k(Shape{1, 1, 1, 1}, std::vector<double>{1.0});
    const auto y = conv2d(x, k);
    EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, AllOnesValidOnOnesIsNine) {
    const T x(Shape{3, 3, 1}, 1.0);
    const T k(Shape{3, 3, 1, 1}, 1.0);
    const auto y = conv2d(x, k, 1, Padding::valid);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, OutputSizeFollowsStrideAndPadding) {
    const auto x = rand_tensor({2, 9, 8, 3}, 2);
    EXPECT_EQ(conv2d(x, rand_tensor({3, 3, 3, 5}, 3)).shape(), (Shape{2, 9, 8, 5}));
    EXPECT_EQ(conv2d(x, rand_tensor({3, 3, 3, 5}, 3), 2).shape(), (Shape{2, 5, 4, 5}));
    EXPECT_EQ(conv2d(x, rand_tensor({5, 5, 3, 1}, 3), 1, Padding::valid).shape(), (Shape{2, 5, 4, 1}));
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
    try {
        conv2d(rand_tensor({4, 4, 2}, 1), rand_tensor({3, 3, 3, 1}, 2));
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[4,4,2]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3,3,3,1]"), std::string::npos) << msg;
    }
}

TEST(Conv2d, EvenKernelOrBadStrideRejected) {
    EXPECT_THROW(conv2d(rand_tensor({4, 4, 1}, 1), rand_tensor({2, 2, 1, 1}, 2)), std::invalid_argument);
    EXPECT_THROW(conv2d(rand_tensor({4, 4, 1}, 1), rand_tensor({3, 3, 1, 1}, 2), 0), std::invalid_argument);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    const auto r = check([](std::vector<T>& in) { return sum(square(conv2d(in[0], in[1]))); },
                         {rand_tensor({5, 5, 2}, 4), rand_tensor({3, 3, 2, 3}, 5)});
    EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
}

TEST(Conv2d, IsLinearInTheInput) {
    const auto k = rand_tensor({3, 3, 2, 3}, 6);
    const auto x = rand_tensor({6, 7, 2}, 7), y = rand_tensor({6, 7, 2}, 8);
    const double a = 0.7, b = -1.3;
    const auto lhs = conv2d(add(scale(x, a), scale(y, b)), k);
    const auto rhs = add(scale(conv2d(x, k), a), scale(conv2d(y, k), b));
    for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-5);
}

TEST(DepthwiseSeparable, IdentityKernelsLeaveInputUnchanged) {
    const int c = 3;
    const auto x = rand_tensor({4, 5, c}, 9);
    T dw(Shape{3, 3, c}, 0.0);
    for (int ch = 0; ch < c; ++ch) dw[(1 * 3 + 1) * c + ch] = 1.0;
    T pw(Shape{1, 1, c, c}, 0.0);
    for (int ch = 0; ch < c; ++ch) pw[ch * c + ch] = 1.0;
    const auto y = depthwise_separable_conv2d(x, dw, pw);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(DepthwiseSeparable, EqualsTwoStepConvComposition) {
    const int c = 4;
    const auto x = rand_tensor({6, 6, c}, 10);
    const auto dw = rand_tensor({3, 3, c}, 11);
    const auto pw = rand_tensor({1, 1, c, 5}, 12);
    // depthwise as a dense conv with a block-diagonal kernel
    T dense(Shape{3, 3, c, c}, 0.0);
    for (int i = 0; i < 9; ++i)
        for (int ch = 0; ch < c; ++ch) dense[(i * c + ch) * c + ch] = dw[i * c + ch];
    const auto expected = conv2d(conv2d(x, dense), pw);
    const auto got = depthwise_separable_conv2d(x, dw, pw);
    ASSERT_EQ(got.shape(), expected.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(DepthwiseSeparable, GradientMatchesFiniteDifferences) {
    const auto r = check([](std::vector<T>& in) { return sum(square(depthwise_separable_conv2d(in[0], in[1], in[2]))); },
                         {rand_tensor({5, 5, 2}, 13), rand_tensor({3, 3, 2}, 14), rand_tensor({1, 1, 2, 3}, 15)});
    EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
}

TEST(MaxPool2, ConstantMapStaysConstant) {
    const T x(Shape{4, 6, 2}, 3.5);
    const auto y = maxpool2(x);
    EXPECT_EQ(y.shape(), (Shape{2, 3, 2}));
    for (double v : y.values()) EXPECT_EQ(v, 3.5);
}

TEST(MaxPool2, BlockMaximum) {
    const T x(Shape{2, 2, 1}, std::vector<double>{1, 2, 3, 4});
    EXPECT_EQ(maxpool2(x).item(), 4);
}

TEST(MaxPool2, OddDimensionsRejected) { EXPECT_THROW(maxpool2(T(Shape{3, 4, 1})), std::invalid_argument); }

TEST(MaxPool2, GradientRoutesToWindowArgmax) {
    auto x = rand_tensor({4, 6, 2}, 16);
    x.set_requires_grad(true);
    backward(sum(maxpool2(x)));
    const auto g = x.grad();
    for (int r = 0; r < 4; r += 2)
        for (int c = 0; c < 6; c += 2)
            for (int ch = 0; ch < 2; ++ch) {
                int best = -1;
                double bv = -1e9;
                for (int dr = 0; dr < 2; ++dr)
                    for (int dc = 0; dc < 2; ++dc) {
                        const int i = ((r + dr) * 6 + c + dc) * 2 + ch;
                        if (x[i] > bv) bv = x[i], best = i;
                    }
                for (int dr = 0; dr < 2; ++dr)
                    for (int dc = 0; dc < 2; ++dc) {
                        const int i = ((r + dr) * 6 + c + dc) * 2 + ch;
                        EXPECT_EQ(g[i], i == best ? 1.0 : 0.0);
                    }
            }
}

TEST(MaxPool2, TiesGoToFirstCellInRowMajorOrder) {
    T x(Shape{2, 2, 1}, 1.0);
    x.set_requires_grad(true);
    backward(sum(maxpool2(x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Upsample2, SingleValueReplicates) {
    const auto y = upsample2(T(Shape{1, 1, 1}, 2.5));
    EXPECT_EQ(y.shape(), (Shape{2, 2, 1}));
    for (double v : y.values()) EXPECT_EQ(v, 2.5);
}

TEST(Upsample2, MaxPoolRoundTripIsExact) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto x = rand_tensor({4, 4, 3}, 100 + s, -1e3, 1e3);
        EXPECT_EQ(maxpool2(upsample2(x)).values(), x.values());
    }
}

TEST(Upsample2, GradientSumsFourReplicas) {
    auto x = rand_tensor({2, 3, 2}, 17);
    const auto w = rand_tensor({4, 6, 2}, 18);
    x.set_requires_grad(true);
    backward(weighted_sum(upsample2(x), w.values()));
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c)
            for (int ch = 0; ch < 2; ++ch) {
                double expect = 0;
                for (int dr = 0; dr < 2; ++dr)
                    for (int dc = 0; dc < 2; ++dc) expect += w[((2 * r + dr) * 6 + 2 * c + dc) * 2 + ch];
                EXPECT_NEAR(x.grad()[(r * 3 + c) * 2 + ch], expect, 1e-12);
            }
    const auto rep = check([](std::vector<T>& in) { return sum(square(upsample2(in[0]))); }, {rand_tensor({2, 3, 2}, 19)});
    EXPECT_TRUE(rep.pass);
}

TEST(BatchNorm, TrainModeNormalisesEachChannel) {
    const auto x = rand_tensor({4, 3, 3, 2}, 20, -3, 7);
    T mean(Shape{2}, 0.0), var(Shape{2}, 1.0);
    const auto y = batchnorm(x, T(Shape{2}, 1.0), T(Shape{2}, 0.0), mean, var, NormMode::train);
    for (int ch = 0; ch < 2; ++ch) {
        double m = 0, v = 0;
        const std::size_t n = y.numel() / 2;
        for (std::size_t i = 0; i < n; ++i) m += y[i * 2 + ch];
        m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) v += (y[i * 2 + ch] - m) * (y[i * 2 + ch] - m);
        v /= static_cast<double>(n);
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-3);  // epsilon 1e-5 in the denominator
    }
}

TEST(BatchNorm, TrainModeUpdatesRunningStatsByMovingAverage) {
    const T x(Shape{4, 1}, std::vector<double>{1, 2, 3, 4});
    T mean(Shape{1}, 0.0), var(Shape{1}, 1.0);
    batchnorm(x, T(Shape{1}, 1.0), T(Shape{1}, 0.0), mean, var, NormMode::train);
    EXPECT_NEAR(mean[0], 0.01 * 2.5, 1e-12);
    EXPECT_NEAR(var[0], 0.99 + 0.01 * (5.0 / 3.0), 1e-12);  // unbiased batch variance
}

TEST(BatchNorm, EvalModeWithUnitStatsIsAffine) {
    const auto x = rand_tensor({3, 2, 2}, 21);
    const T gamma(Shape{2}, std::vector<double>{2.0, -0.5}), beta(Shape{2}, std::vector<double>{0.25, 1.0});
    T mean(Shape{2}, 0.0), var(Shape{2}, 1.0);
    const auto y = batchnorm(x, gamma, beta, mean, var, NormMode::eval);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const int ch = static_cast<int>(i % 2);
        EXPECT_NEAR(y[i], gamma[ch] * x[i] / std::sqrt(1 + 1e-5) + beta[ch], 1e-12);
    }
    EXPECT_EQ(mean[0], 0.0);
}

TEST(BatchNorm, ZeroVarianceChannelStaysFinite) {
    const T x(Shape{4, 1}, 3.0);
    T mean(Shape{1}, 0.0), var(Shape{1}, 1.0);
    const auto y = batchnorm(x, T(Shape{1}, 1.0), T(Shape{1}, 0.0), mean, var, NormMode::train);
    EXPECT_TRUE(all_finite(y));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, GradientWithRespectToInputGammaBeta) {
    const auto w = rand_tensor({3, 2, 2, 3}, 22).values();
    for (auto mode : {NormMode::train, NormMode::eval}) {
        const auto r = check(
            [&](std::vector<T>& in) {
                T mean(Shape{3}, 0.1), var(Shape{3}, 0.8);
                return weighted_sum(batchnorm(in[0], in[1], in[2], mean, var, mode), w);
            },
            {rand_tensor({3, 2, 2, 3}, 23), rand_tensor({3}, 24, 0.5, 1.5), rand_tensor({3}, 25)});
        EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
    }
}

TEST(Activation, ReluAndSigmoidValues) {
    const auto r = relu(T(Shape{2}, std::vector<double>{-1, 2}));
    EXPECT_EQ(r[0], 0);
    EXPECT_EQ(r[1], 2);
    EXPECT_EQ(sigmoid(T::scalar(0)).item(), 0.5);
    const auto s = sigmoid(rand_tensor({50}, 26, -40, 40));
    for (double v : s.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Activation, SigmoidGradientIsSTimesOneMinusS) {
    auto x = rand_tensor({20}, 27, -4, 4);
    x.set_requires_grad(true);
    const auto s = sigmoid(x);
    backward(sum(s));
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double fd = (1 / (1 + std::exp(-(x[i] + 1e-5))) - 1 / (1 + std::exp(-(x[i] - 1e-5)))) / 2e-5;
        EXPECT_NEAR(x.grad()[i], s[i] * (1 - s[i]), 1e-12);
        EXPECT_NEAR(x.grad()[i], fd, 1e-4);
    }
}

TEST(Backward, SumGivesOnes) {
    auto x = rand_tensor({3, 4}, 28);
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
    auto x = rand_tensor({7}, 29);
    x.set_requires_grad(true);
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, NonScalarLossRejected) {
    auto x = rand_tensor({3}, 30);
    x.set_requires_grad(true);
    EXPECT_THROW(backward(relu(x)), std::invalid_argument);
}

TEST(Backward, SharedSubgraphVisitedOnce) {
    auto x = rand_tensor({4}, 31);
    x.set_requires_grad(true);
    const auto y = scale(x, 3.0);
    backward(add(sum(y), sum(y)));  // diamond: y feeds two consumers
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 6.0);
}

TEST(Backward, EveryRequiresGradLeafGetsAGradient) {
    auto a = rand_tensor({4, 4, 1}, 32), k = rand_tensor({3, 3, 1, 2}, 33), unused = rand_tensor({2}, 34);
    a.set_requires_grad(true);
    k.set_requires_grad(true);
    backward(sum(relu(conv2d(a, k))));
    EXPECT_TRUE(a.has_grad());
    EXPECT_TRUE(k.has_grad());
    EXPECT_FALSE(unused.has_grad());
}

TEST(Backward, ConvReluSumMatchesFiniteDifferences) {
    const auto r = check([](std::vector<T>& in) { return sum(relu(conv2d(in[0], in[1]))); },
                         {rand_tensor({5, 5, 2}, 35), rand_tensor({3, 3, 2, 2}, 36)});
    EXPECT_TRUE(r.pass) << r.max_rel_error << " " << r.worst;
}

TEST(Backward, DeterministicForFixedInputs) {
    auto run = [] {
        auto x = rand_tensor<float>({2, 8, 8, 3}, 37);
        auto k = rand_tensor<float>({3, 3, 3, 4}, 38);
        k.set_requires_grad(true);
        backward(sum(square(relu(conv2d(x, k)))));
        return std::vector<float>(k.grad().begin(), k.grad().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(Backward, NoGradGuardRecordsNothing) {
    auto x = rand_tensor({3}, 39);
    x.set_requires_grad(true);
    NoGradGuard g;
    EXPECT_FALSE(sum(x).requires_grad());
}

TEST(GradCheck, LinearFunctionIsExact) {
    GradCheckOptions o;
    o.abs_floor = 1e-8;
    const auto w = rand_tensor({6}, 40).values();
    const auto r = grad_check<double>([&](std::vector<T>& in) { return weighted_sum(in[0], w); }, {rand_tensor({6}, 41)}, o);
    EXPECT_TRUE(r.pass);
    EXPECT_LT(r.max_rel_error, 1e-6);
    EXPECT_EQ(r.coords_checked, 6u);
}

TEST(GradCheck, CorruptedBackwardFails) {
    // +10% on the gradient
    auto broken = [](const T& x) {
        return make_result<double>("broken", x.shape(), x.values(), {x}, [x](const std::vector<double>& g) mutable {
            double* dx = grad_target(x);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 1.1 * g[i];
        });
    };
    const auto r = check([&](std::vector<T>& in) { return sum(square(broken(in[0]))); }, {rand_tensor({5}, 42)});
    EXPECT_FALSE(r.pass);
    EXPECT_GT(r.max_rel_error, 0.05);
    EXPECT_FALSE(r.worst.empty());
}

TEST(GradCheck, NonFiniteOutputReportsFailureWithoutThrowing) {
    const auto r = check([](std::vector<T>& in) { return sum(scale(in[0], static_cast<double>(INFINITY))); }, {rand_tensor({3}, 43)});
    EXPECT_FALSE(r.pass);
    EXPECT_NE(r.message.find("non-finite"), std::string::npos);
}

TEST(GradCheck, ExceptionInsideFunctionBecomesReport) {
    const auto r = check([](std::vector<T>& in) { return maxpool2(in[0]); }, {rand_tensor({3, 3, 1}, 44)});
    EXPECT_FALSE(r.pass);
    EXPECT_NE(r.message.find("exception"), std::string::npos);
}

TEST(GradCheck, SkipNonsmoothSkipsAnExactKinkButNotSmoothPoints) {
    GradCheckOptions o;
    o.skip_nonsmooth = true;
    o.max_skip_fraction = 0.5;
    // one coordinate sits exactly on the relu kink
    T x(Shape{4}, std::vector<double>{0.0, 0.7, -0.4, 1.3});
    const auto r = grad_check<double>([](std::vector<T>& in) { return sum(relu(in[0])); }, {x}, o);
    EXPECT_EQ(r.coords_skipped, 1u);
    EXPECT_EQ(r.coords_checked, 3u);
    EXPECT_TRUE(r.pass);
}

TEST(GradCheck, SkipNonsmoothStillCatchesWrongGradients) {
    GradCheckOptions o;
    o.skip_nonsmooth = true;
    auto broken = [](const T& x) {
        return make_result<double>("broken", x.shape(), x.values(), {x}, [x](const std::vector<double>& g) mutable {
            double* dx = grad_target(x);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 1.1 * g[i];
        });
    };
    const auto r = grad_check<double>([&](std::vector<T>& in) { return sum(square(broken(in[0]))); }, {rand_tensor({8}, 45)}, o);
    EXPECT_EQ(r.coords_skipped, 0u);
    EXPECT_FALSE(r.pass);
}

TEST(GradCheck, TooManyKinksFailTheCheck) {
    GradCheckOptions o;
    o.skip_nonsmooth = true;
    const T x(Shape{4}, 0.0);
    const auto r = grad_check<double>([](std::vector<T>& in) { return sum(relu(in[0])); }, {x}, o);
    EXPECT_FALSE(r.pass);
    EXPECT_NE(r.message.find("non-smooth"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
    const auto dir = testutil::scratch_dir("ckpt");
    Checkpoint ck;
    ck.meta.set("answer", "42");
    ck.tensors.push_back({"a/w", "conv2d", Shape{2, 3}, {1, 2, 3, 4, 5, 6.5f}});
    ck.tensors.push_back({"s", "slot", Shape{}, {-0.0f}});
    const auto path = (dir / "c.prkt").string();
    save_checkpoint(ck, path);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.meta.get("answer", ""), "42");
    EXPECT_EQ(back.tensors, ck.tensors);
}

TEST(Checkpoint, TruncationAndBadMagicRejectedWithOffsets) {
    const auto dir = testutil::scratch_dir("ckpt_bad");
    Checkpoint ck;
    ck.tensors.push_back({"w", "conv2d", Shape{8}, std::vector<float>(8, 1.0f)});
    const auto path = (dir / "c.prkt").string();
    save_checkpoint(ck, path);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 4);
    try {
        load_checkpoint(path);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
    }
    {
        std::ofstream out(path, std::ios::binary);
        out << "PRKT2\nend\n";
    }
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}
