#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "urbanform/tensor.hpp"

using namespace urbanform;
using namespace urbanform::nn;

namespace {

Tensor filled(Shape s, std::uint64_t seed) {
    Tensor t(s);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    for (auto& v : t.values) v = d(rng);
    return t;
}

/// Weighted-sum loss over the op output so every output element carries a distinct gradient.
double weighted_loss(const Var& y, const Tensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y->value.numel(); ++i) s += y->value.values[i] * w.values[i];
    return s;
}

/// Central differences on every input entry against the analytic gradient of `op`.
void expect_gradients(const std::function<Var(const Var&)>& op, Shape in_shape, std::uint64_t seed, double tol = 1e-7) {
    auto x = parameter(filled(in_shape, seed));
    auto y = op(x);
    const auto w = filled(y->shape(), seed + 1);
    backward(weighted_sum(y, w));
    const auto analytic = x->grad.values;
    const double h = 1e-6;
    for (std::size_t i = 0; i < x->value.numel(); ++i) {
        const double keep = x->value.values[i];
        x->value.values[i] = keep + h;
        const double fp = weighted_loss(op(constant(x->value)), w);
        x->value.values[i] = keep - h;
        const double fm = weighted_loss(op(constant(x->value)), w);
        x->value.values[i] = keep;
        EXPECT_NEAR(analytic[i], (fp - fm) / (2 * h), tol) << "entry " << i;
    }
}

}  // namespace

TEST(Conv, ValidTwoByTwoOnesKernel) {
    Tensor x({1, 1, 2, 2});
    x.values = {1, 2, 3, 4};
    auto y = conv2d(constant(x), constant(Tensor({1, 1, 2, 2}, 1.0)), nullptr, {1, 1, Padding::valid});
    ASSERT_EQ(y->shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y->value.values[0], 10.0);
}

TEST(Conv, SamePaddingKeepsSizeAndStrideHalves) {
    auto x = constant(filled({2, 3, 8, 6}, 1));
    auto w = constant(filled({5, 3, 3, 3}, 2));
    EXPECT_EQ(conv2d(x, w, nullptr)->shape(), (Shape{2, 5, 8, 6}));
    EXPECT_EQ(conv2d(x, w, nullptr, {2, 1, Padding::same})->shape(), (Shape{2, 5, 4, 3}));
    EXPECT_EQ(conv2d(x, w, nullptr, {1, 3, Padding::same})->shape(), (Shape{2, 5, 8, 6}));
}

TEST(Conv, MatchesDirectSummation) {
    const auto x = filled({1, 2, 5, 5}, 3), w = filled({3, 2, 3, 3}, 4);
    const ConvSpec spec{1, 2, Padding::same};
    const auto y = conv2d(constant(x), constant(w), nullptr, spec)->value;
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t r = 0; r < 5; ++r)
            for (std::size_t c = 0; c < 5; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < 2; ++i)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const long rr = long(r) + 2 * (ky - 1), cc = long(c) + 2 * (kx - 1);
                            if (rr < 0 || cc < 0 || rr >= 5 || cc >= 5) continue;
                            s += x(0, i, rr, cc) * w(o, i, ky, kx);
                        }
                EXPECT_NEAR(y(0, o, r, c), s, 1e-12);
            }
}

TEST(Upsample, AlignedCornersInterpolation) {
    Tensor x2({1, 1, 2, 2});
    x2.values = {0.0, 1.0, 0.0, 1.0};
    const auto y = bilinear_upsample(constant(x2), 2, 4)->value;
    EXPECT_NEAR(y.values[0], 0.0, 1e-15);
    EXPECT_NEAR(y.values[1], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(y.values[2], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(y.values[3], 1.0, 1e-15);
    EXPECT_THROW(bilinear_upsample(constant(x2), 1, 1), Error);
}

TEST(Softmax, ChannelsSumToOne) {
    const auto p = softmax_channels(filled({2, 4, 3, 3}, 8));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < 4; ++c) s += p.values[(n * 4 + c) * 9 + i];
            EXPECT_NEAR(s, 1.0, 1e-14);
        }
}

TEST(Gradients, Conv2dWithStrideAndDilation) {
    const auto w = constant(filled({3, 2, 3, 3}, 11));
    expect_gradients([&](const Var& x) { return conv2d(x, w, nullptr, {2, 1, Padding::same}); }, {1, 2, 6, 6}, 1);
    expect_gradients([&](const Var& x) { return conv2d(x, w, nullptr, {1, 2, Padding::same}); }, {1, 2, 6, 6}, 2);
}

TEST(Gradients, Depthwise) {
    const auto w = constant(filled({3, 1, 3, 3}, 12));
    expect_gradients([&](const Var& x) { return depthwise_conv2d(x, w, {2, 1, Padding::same}); }, {2, 3, 6, 6}, 3);
    expect_gradients([&](const Var& x) { return depthwise_conv2d(x, w, {1, 3, Padding::same}); }, {1, 3, 7, 7}, 4);
}

TEST(Gradients, PoolingUpsampleAndConcat) {
    expect_gradients([](const Var& x) { return avg_pool2(x); }, {1, 2, 4, 4}, 5);
    expect_gradients([](const Var& x) { return max_pool2(x); }, {1, 2, 4, 4}, 6);
    expect_gradients([](const Var& x) { return global_avg_pool(x); }, {2, 2, 3, 3}, 7);
    expect_gradients([](const Var& x) { return bilinear_upsample(x, 7, 5); }, {1, 2, 3, 2}, 8);
    expect_gradients([](const Var& x) { return concat_channels({x, relu(x)}); }, {1, 2, 3, 3}, 9);
}

TEST(Gradients, BatchNormTraining) {
    const auto gamma = constant(filled({1, 3, 1, 1}, 13)), beta = constant(filled({1, 3, 1, 1}, 14));
    expect_gradients(
        [&](const Var& x) {
            BatchNormState st(3);
            return batch_norm(x, gamma, beta, st, true);
        },
        {2, 3, 3, 3}, 10, 1e-6);
}

TEST(Gradients, MaskedCrossEntropy) {
    std::vector<std::uint8_t> labels{0, 2, 1, 1, 0, 2, 2, 0, 1}, mask{1, 1, 0, 1, 1, 1, 0, 1, 1};
    auto x = parameter(filled({1, 3, 3, 3}, 15));
    backward(masked_cross_entropy(x, labels, mask));
    const auto g = x->grad.values;
    const double h = 1e-6;
    for (std::size_t i = 0; i < g.size(); ++i) {
        auto xp = x->value, xm = x->value;
        xp.values[i] += h;
        xm.values[i] -= h;
        const double fd = (masked_cross_entropy(constant(xp), labels, mask)->value.values[0] -
                           masked_cross_entropy(constant(xm), labels, mask)->value.values[0]) /
                          (2 * h);
        EXPECT_NEAR(g[i], fd, 1e-8);
    }
    EXPECT_THROW(masked_cross_entropy(x, labels, std::vector<std::uint8_t>(9, 0)), Error);
}

TEST(BatchNorm, InferenceUsesRunningStatistics) {
    BatchNormState st(1);
    const auto gamma = constant(Tensor({1, 1, 1, 1}, 1.0)), beta = constant(Tensor({1, 1, 1, 1}, 0.0));
    Tensor x({1, 1, 1, 2});
    x.values = {1.0, 3.0};
    const auto y = batch_norm(constant(x), gamma, beta, st, false)->value;
    EXPECT_NEAR(y.values[0], 1.0 / std::sqrt(1.0 + st.eps), 1e-12);
}
