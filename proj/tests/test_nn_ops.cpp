#include <gtest/gtest.h>

#include <cmath>

#include "bcmf/nn_ops.hpp"
#include "bcmf/random.hpp"
#include "bcmf/verify.hpp"
#include "oracles.hpp"

using namespace bcmf;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

template <typename Fn>
ErrorKind kind_of(Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    return static_cast<ErrorKind>(-1);
}

}  // namespace

// --- conv2d ------------------------------------------------------------------

TEST(Conv2d, PointwiseIdentity) {
    Rng rng(1);
    Tensor x = random_tensor({1, 1, 5, 4}, rng);
    Tensor y = conv2d(x, {Tensor({1, 1, 1, 1}, 1.0), Tensor(), 1, 0});
    EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, CenteredDeltaIdentity) {
    Rng rng(2);
    Tensor x = random_tensor({2, 1, 6, 6}, rng);
    Tensor w({1, 1, 3, 3}, 0.0);
    w[4] = 1.0;
    EXPECT_EQ(values(conv2d(x, {w, Tensor(), 1, 1})), values(x));
}

TEST(Conv2d, MatchesDirectLoops) {
    Rng rng(3);
    Tensor x = random_tensor({1, 2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    std::size_t ho = 0, wo = 0;
    const auto bias = values(b);
    const auto ref = oracle::conv2d(values(x), {1, 2, 5, 5}, values(w), 3, 3, &bias, 1, 1, ho, wo);
    EXPECT_EQ(values(conv2d(x, {w, b, 1, 1})), ref);
}

TEST(Conv2d, RandomConfigurationsMatchDirectLoops) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = rng.uniform_int(1, 2), ci = rng.uniform_int(1, 4), co = rng.uniform_int(1, 4);
        const std::size_t k = rng.bernoulli(0.5) ? 3 : 1, stride = rng.uniform_int(1, 2), pad = k / 2;
        const std::size_t h = rng.uniform_int(k, 9), w = rng.uniform_int(k, 9);
        Tensor x = random_tensor({n, ci, h, w}, rng), wt = random_tensor({co, ci, k, k}, rng), b = random_tensor({co}, rng);
        const bool with_bias = rng.bernoulli(0.5);
        std::size_t ho = 0, wo = 0;
        const auto bias = values(b);
        const auto ref = oracle::conv2d(values(x), {n, ci, h, w}, values(wt), co, k, with_bias ? &bias : nullptr, stride, pad, ho, wo);
        Tensor y = conv2d(x, {wt, with_bias ? b : Tensor(), stride, pad});
        ASSERT_EQ(y.shape(), (Shape{n, co, ho, wo}));
        ASSERT_EQ(values(y), ref) << "trial " << trial;
    }
}

TEST(Conv2d, Errors) {
    Tensor x({1, 2, 4, 4}, 1.0);
    EXPECT_EQ(kind_of([&] { conv2d(x, {Tensor({1, 3, 3, 3}, 1.0), Tensor(), 1, 1}); }), ErrorKind::shape);
    EXPECT_EQ(kind_of([&] { conv2d(x, {Tensor({1, 2, 7, 7}, 1.0), Tensor(), 1, 1}); }), ErrorKind::shape);
    EXPECT_EQ(kind_of([&] { conv2d(x, {Tensor({1, 2, 3, 3}, 1.0), Tensor({2}, 0.0), 1, 1}); }), ErrorKind::shape);
}

TEST(Conv2d, StrideTwoHalvesEvenExtents) {
    Tensor x({1, 1, 16, 12}, 1.0);
    Tensor y = conv2d(x, {Tensor({1, 1, 3, 3}, 1.0), Tensor(), 2, 1});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 8, 6}));
}

// --- pooling -------------------------------------------------------------------

TEST(AvgPool, ConstantStaysConstant) {
    Tensor y = avg_pool2d(Tensor({1, 2, 8, 8}, 0.75), 4, 4);
    for (double v : y.data()) EXPECT_EQ(v, 0.75);
}

TEST(AvgPool, TwoByTwo) {
    Tensor y = avg_pool2d(Tensor({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), 2, 2);
    ASSERT_EQ(y.numel(), 1u);
    EXPECT_EQ(y[0], 2.5);
}

TEST(AvgPool, RandomMatchesDirectLoops) {
    Rng rng(5);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    EXPECT_EQ(values(avg_pool2d(x, 2, 2)), oracle::avg_pool(values(x), {1, 3, 8, 8}, 2, 2));
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = rng.uniform_int(1, 4), s = rng.uniform_int(1, 3);
        const std::size_t n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 3);
        const std::size_t h = k + s * rng.uniform_int(0, 4), w = k + s * rng.uniform_int(0, 4);
        Tensor t = random_tensor({n, c, h, w}, rng);
        ASSERT_EQ(values(avg_pool2d(t, k, s)), oracle::avg_pool(values(t), {n, c, h, w}, k, s));
    }
}

TEST(AvgPool, Errors) {
    Tensor x({1, 1, 4, 4}, 1.0);
    EXPECT_EQ(kind_of([&] { avg_pool2d(x, 5, 5); }), ErrorKind::shape);
    EXPECT_EQ(kind_of([&] { avg_pool2d(x, 3, 2); }), ErrorKind::shape);
}

TEST(GlobalAvgPool, ConstantSinglePixelAndRandom) {
    const Tensor pooled = global_avg_pool(Tensor({2, 3, 5, 5}, -1.25));
    for (double v : pooled.data()) EXPECT_EQ(v, -1.25);
    Rng rng(6);
    Tensor one = random_tensor({2, 3, 1, 1}, rng);
    EXPECT_EQ(values(global_avg_pool(one)), values(one));
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 4), h = rng.uniform_int(1, 9), w = rng.uniform_int(1, 9);
        Tensor t = random_tensor({n, c, h, w}, rng);
        ASSERT_EQ(values(global_avg_pool(t)), oracle::global_mean(values(t), {n, c, h, w}));
    }
}

// --- bilinear upsample ---------------------------------------------------------------

TEST(Bilinear, ConstantAndIdentity) {
    const Tensor upsampled = bilinear_upsample(Tensor({1, 2, 3, 5}, 4.5), 11, 17);
    for (double v : upsampled.data()) EXPECT_DOUBLE_EQ(v, 4.5);
    Rng rng(7);
    Tensor x = random_tensor({2, 2, 4, 6}, rng);
    EXPECT_EQ(values(bilinear_upsample(x, 4, 6)), values(x));
}

TEST(Bilinear, HandEvaluatedTwoByTwo) {
    // Half-pixel centres for 2 -> 4: source coords -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
    Tensor y = bilinear_upsample(Tensor({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), 4, 4);
    const std::vector<double> expected{1.0, 1.25, 1.75, 2.0, 1.5, 1.75, 2.25, 2.5, 2.5, 2.75, 3.25, 3.5, 3.0, 3.25, 3.75, 4.0};
    for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(y[i], expected[i]) << i;
}

TEST(Bilinear, RandomMatchesFormula) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = rng.uniform_int(1, 5), w = rng.uniform_int(1, 5);
        const std::size_t oh = h * rng.uniform_int(1, 4), ow = w + rng.uniform_int(0, 7);
        Tensor x = random_tensor({1, 1, h, w}, rng);
        Tensor y = bilinear_upsample(x, oh, ow);
        const auto plane = values(x);
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) ASSERT_EQ(y[i * ow + j], oracle::bilinear_at(plane, h, w, oh, ow, i, j));
    }
}

TEST(Bilinear, TargetSmallerIsAnError) {
    EXPECT_EQ(kind_of([] { bilinear_upsample(Tensor({1, 1, 4, 4}, 1.0), 2, 4); }), ErrorKind::shape);
}

// --- batch norm ------------------------------------------------------------------------

namespace {
BatchNormParams fresh_bn(std::size_t c, double gamma = 1.0, double beta = 0.0) {
    BatchNormParams p;
    p.gamma = Tensor({c}, gamma);
    p.beta = Tensor({c}, beta);
    return p;
}
}  // namespace

TEST(BatchNorm, ConstantInputNormalizesToBeta) {
    auto p = fresh_bn(2);
    const Tensor normed = batch_norm(Tensor({2, 2, 3, 3}, 7.0), p, Mode::train);
    for (double v : normed.data()) EXPECT_LE(std::abs(v), 1e-5);
    auto q = fresh_bn(2, 1.0, 5.0);
    const Tensor shifted = batch_norm(Tensor({2, 2, 3, 3}, 7.0), q, Mode::train);
    for (double v : shifted.data()) EXPECT_NEAR(v, 5.0, 1e-5);
}

TEST(BatchNorm, TrainMatchesDirectStatistics) {
    Rng rng(9);
    const std::size_t N = 2, C = 3, HW = 10;
    Tensor x = random_tensor({N, C, 2, 5}, rng, -3, 3);
    auto p = fresh_bn(C);
    p.gamma = random_tensor({C}, rng, 0.5, 2.0);
    p.beta = random_tensor({C}, rng);
    Tensor y = batch_norm(x, p, Mode::train);
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> v;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) v.push_back(x[(n * C + c) * HW + i]);
        double m = 0;
        for (double a : v) m += a;
        m /= static_cast<double>(v.size());
        double var = 0;
        for (double a : v) var += (a - m) * (a - m);
        const double biased = var / static_cast<double>(v.size()), unbiased = var / static_cast<double>(v.size() - 1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t idx = (n * C + c) * HW + i;
                EXPECT_NEAR(y[idx], p.gamma[c] * (x[idx] - m) / std::sqrt(biased + 1e-5) + p.beta[c], 1e-12);
            }
        EXPECT_NEAR(p.running_mean[c], 0.1 * m, 1e-14);
        EXPECT_NEAR(p.running_var[c], 0.9 + 0.1 * unbiased, 1e-14);
    }
}

TEST(BatchNorm, EvalIsAffineInInput) {
    Rng rng(10);
    auto p = fresh_bn(3);
    p.gamma = random_tensor({3}, rng, 0.5, 2.0);
    p.beta = random_tensor({3}, rng);
    p.running_mean = random_tensor({3}, rng);
    p.running_var = random_tensor({3}, rng, 0.5, 2.0);
    Tensor x = random_tensor({1, 3, 4, 4}, rng);
    Tensor zero({1, 3, 4, 4}, 0.0);
    const double a = 2.5;
    Tensor y0 = batch_norm(zero, p, Mode::eval), y1 = batch_norm(x, p, Mode::eval), ya = batch_norm(scale(x, a), p, Mode::eval);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(ya[i] - y0[i], a * (y1[i] - y0[i]), 1e-12);
}

TEST(BatchNorm, EvalBeforeStatisticsIsAStateError) {
    auto p = fresh_bn(2);
    EXPECT_EQ(kind_of([&] { batch_norm(Tensor({1, 2, 2, 2}, 1.0), p, Mode::eval); }), ErrorKind::state);
}

// --- relu / softmax / cross entropy ----------------------------------------------------------

TEST(Relu, ClampsNegatives) {
    Tensor y = relu(Tensor({4}, std::vector<double>{-1, 0, 2, -0.5}));
    EXPECT_EQ(values(y), (std::vector<double>{0, 0, 2, 0}));
}

TEST(Softmax, UniformLogits) {
    const Tensor probs = softmax_channels(Tensor({1, 4, 2, 2}, 3.0));
    for (double v : probs.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvarianceAndScalarFormula) {
    Rng rng(12);
    Tensor x = random_tensor({2, 5, 3, 3}, rng, -4, 4);
    Tensor shifted = x.clone();
    for (double& v : shifted.data()) v += 17.0;
    Tensor p = softmax_channels(x), q = softmax_channels(shifted);
    const std::size_t HW = 9, C = 5;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
            double denom = 0, total = 0;
            for (std::size_t c = 0; c < C; ++c) denom += std::exp(x[(n * C + c) * HW + i]);
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t idx = (n * C + c) * HW + i;
                EXPECT_NEAR(p[idx], q[idx], 1e-12);
                EXPECT_NEAR(p[idx], std::exp(x[idx]) / denom, 1e-14);
                EXPECT_GT(p[idx], 0.0);
                EXPECT_LT(p[idx], 1.0);
                total += p[idx];
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
}

TEST(CrossEntropy, OneHotIsZeroAndHalfIsLn2) {
    LabelMap lm(2, 2, 2);
    lm.labels = {0, 1, 1, 0};
    Tensor onehot({1, 2, 2, 2}, std::vector<double>{1, 0, 0, 1, 0, 1, 1, 0});
    const Tensor exact = cross_entropy_map(onehot, {lm});
    for (double v : exact.data()) EXPECT_EQ(v, 0.0);
    LabelMap zeros(2, 2, 2, 0);
    const Tensor half = cross_entropy_map(Tensor({1, 2, 2, 2}, 0.5), {zeros});
    for (double v : half.data()) EXPECT_DOUBLE_EQ(v, std::log(2.0));
}

TEST(CrossEntropy, RandomMatchesScalarFormulaAndIgnores) {
    Rng rng(13);
    Tensor p = random_tensor({1, 3, 4, 4}, rng, 0.01, 1.0);
    LabelMap lm(4, 4, 3);
    for (auto& l : lm.labels) l = static_cast<std::int32_t>(rng.uniform_int(0, 3));
    for (auto& l : lm.labels)
        if (l == 3) l = lm.ignore_index;
    Tensor ce = cross_entropy_map(p, {lm});
    for (std::size_t i = 0; i < 16; ++i) {
        if (lm.ignored(i))
            EXPECT_EQ(ce[i], 0.0);
        else
            EXPECT_EQ(ce[i], -std::log(std::max(p[static_cast<std::size_t>(lm.labels[i]) * 16 + i], 1e-12)));
    }
}

TEST(CrossEntropy, LabelOutOfRange) {
    LabelMap lm(1, 1, 2);
    lm.labels = {2};
    EXPECT_EQ(kind_of([&] { cross_entropy_map(Tensor({1, 2, 1, 1}, 0.5), {lm}); }), ErrorKind::domain);
}

// --- sgd -------------------------------------------------------------------------------------

TEST(Sgd, PlainStepSubtractsGradient) {
    std::vector<double> p{1.0, -2.0}, g{0.5, 0.25}, v{0, 0};
    sgd_step(p, g, v, 1.0, 0.0, 0.0);
    EXPECT_EQ(p, (std::vector<double>{0.5, -2.25}));
}

TEST(Sgd, MomentumRecurrenceByHand) {
    std::vector<double> p{1.0}, v{0.0};
    const double lr = 0.1, m = 0.9, wd = 0.01;
    double hp = 1.0, hv = 0.0;
    for (double g : {0.3, -0.2}) {
        std::vector<double> gv{g};
        sgd_step(p, gv, v, lr, m, wd);
        hv = m * hv + g + wd * hp;
        hp -= lr * hv;
        EXPECT_EQ(p[0], hp);
        EXPECT_EQ(v[0], hv);
    }
}

TEST(Sgd, WeightDecayAloneShrinksTowardZero) {
    std::vector<double> p{2.0, -3.0}, g{0, 0}, v{0, 0};
    sgd_step(p, g, v, 0.1, 0.0, 0.5);
    EXPECT_LT(std::abs(p[0]), 2.0);
    EXPECT_LT(std::abs(p[1]), 3.0);
    EXPECT_GT(p[0], 0.0);
}

// --- concat / gather ---------------------------------------------------------------------------

TEST(Concat, StacksChannelsPerSample) {
    Tensor a({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor b({2, 2, 1, 2}, std::vector<double>{5, 6, 7, 8, 9, 10, 11, 12});
    EXPECT_EQ(values(concat_channels({a, b})), (std::vector<double>{1, 2, 5, 6, 7, 8, 3, 4, 9, 10, 11, 12}));
}

TEST(GatherMean, MeanOfSelectedAndEmptyIsZero) {
    Tensor x({4}, std::vector<double>{1, 2, 3, 10});
    EXPECT_DOUBLE_EQ(gather_mean(x, {0, 3}).item(), 5.5);
    EXPECT_EQ(gather_mean(x, {}).item(), 0.0);
}

// --- gradient checks ---------------------------------------------------------------------------

TEST(Gradients, EveryOpPassesFiniteDifferences) {
    for (const auto& r : gradcheck_suite(5, 99)) {
        EXPECT_TRUE(r.passed()) << r.name << " max error " << r.max_error;
        EXPECT_GE(r.instances, 5u);
    }
}
