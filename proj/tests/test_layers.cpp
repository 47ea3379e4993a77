#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "voxseg/layers.hpp"
#include "voxseg/rng.hpp"

using namespace voxseg;

namespace {

Tensor<double> random_tensor(std::vector<int64_t> shape, uint64_t seed, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    std::mt19937_64 rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform_range(rng, -scale, scale);
    return t;
}

// Scalar loss L = sum_i y_i * w_i with fixed random weights; its gradient
// w.r.t. y is just w, which gives every layer a well-conditioned upstream.
struct ProbeLoss {
    Tensor<double> w;
    explicit ProbeLoss(const Tensor<double>& y) : w(random_tensor(y.shape(), 0xFEED)) {}
    double value(const Tensor<double>& y) const {
        double acc = 0.0;
        for (int64_t i = 0; i < y.numel(); ++i) acc += y[i] * w[i];
        return acc;
    }
};

// Central finite difference through `forward` w.r.t. tensor `x`, compared to
// `analytic` at `probes` sampled positions.
void check_grad(Tensor<double>& x, const std::function<Tensor<double>()>& forward,
                const Tensor<double>& analytic, const ProbeLoss& loss, int probes,
                uint64_t seed, double tol = 1e-7) {
    std::mt19937_64 rng(seed);
    const double h = 1e-6;
    for (int p = 0; p < probes; ++p) {
        const int64_t i = uniform_below(rng, x.numel());
        const double saved = x[i];
        x[i] = saved + h;
        const double lp = loss.value(forward());
        x[i] = saved - h;
        const double lm = loss.value(forward());
        x[i] = saved;
        const double fd = (lp - lm) / (2 * h);
        const double rel = std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
        CHECK(rel < tol);
    }
}

}  // namespace

TEST_CASE("1x1x1 identity kernel reproduces the input") {
    const Tensor<double> x = random_tensor({1, 1, 2, 3, 4}, 1);
    Tensor<double> k({1, 1, 1, 1, 1});
    k[0] = 1.0;
    const Tensor<double> y = conv3d_forward(x, k, {}, {1, 1, 1}, {0, 0, 0});
    CHECK(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]));
}

TEST_CASE("1x3x3 ones kernel on a 4x4 ones slice gives 9/6/4 pattern") {
    Tensor<double> x({1, 1, 1, 4, 4});
    x.fill(1.0);
    Tensor<double> k({1, 1, 1, 3, 3});
    k.fill(1.0);
    const Tensor<double> y = conv3d_forward(x, k, {}, {1, 1, 1}, {0, 1, 1});
    CHECK(y.shape() == x.shape());
    for (int64_t h = 0; h < 4; ++h)
        for (int64_t w = 0; w < 4; ++w) {
            const bool eh = h == 0 || h == 3, ew = w == 0 || w == 3;
            const double expect = (eh && ew) ? 4.0 : (eh || ew) ? 6.0 : 9.0;
            CHECK(y.at5(0, 0, 0, h, w) == doctest::Approx(expect));
        }
}

TEST_CASE("3x1x1 centered delta kernel is the identity along depth") {
    const Tensor<double> x = random_tensor({1, 1, 5, 2, 2}, 2);
    Tensor<double> k({1, 1, 3, 1, 1});
    k[0] = 0.0;
    k[1] = 1.0;
    k[2] = 0.0;
    const Tensor<double> y = conv3d_forward(x, k, {}, {1, 1, 1}, {1, 0, 0});
    CHECK(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]));
}

TEST_CASE("channel mismatch errors") {
    const Tensor<double> x = random_tensor({1, 2, 2, 4, 4}, 3);
    const Tensor<double> k = random_tensor({1, 3, 1, 3, 3}, 4);
    CHECK_THROWS_AS((void)conv3d_forward(x, k, {}, {1, 1, 1}, {0, 1, 1}), std::invalid_argument);
}

TEST_CASE("conv backward matches finite differences (stride 1 and 2)") {
    for (int stride : {1, 2}) {
        Tensor<double> x = random_tensor({2, 3, 2, 6, 6}, 10 + uint64_t(stride));
        Tensor<double> k = random_tensor({4, 3, 1, 3, 3}, 20 + uint64_t(stride), 0.5);
        const Stride3 s{1, stride, stride};
        const Pad3 pad{0, 1, 1};
        auto fwd = [&]() { return conv3d_forward(x, k, {}, s, pad); };
        const Tensor<double> y = fwd();
        const ProbeLoss loss(y);
        const ConvGrads<double> g = conv3d_backward(x, k, loss.w, s, pad, false);
        check_grad(x, fwd, g.input, loss, 24, 100 + uint64_t(stride));
        check_grad(k, fwd, g.kernel, loss, 24, 200 + uint64_t(stride));
    }
}

TEST_CASE("conv bias gradient matches finite differences") {
    Tensor<double> x = random_tensor({1, 2, 1, 4, 4}, 31);
    Tensor<double> k = random_tensor({3, 2, 1, 1, 1}, 32, 0.5);
    std::vector<double> bias{0.1, -0.2, 0.3};
    auto fwd = [&]() { return conv3d_forward(x, k, bias, {1, 1, 1}, {0, 0, 0}); };
    const ProbeLoss loss(fwd());
    const ConvGrads<double> g = conv3d_backward(x, k, loss.w, {1, 1, 1}, {0, 0, 0}, true);
    const double h = 1e-6;
    for (size_t c = 0; c < bias.size(); ++c) {
        bias[c] += h;
        const double lp = loss.value(fwd());
        bias[c] -= 2 * h;
        const double lm = loss.value(fwd());
        bias[c] += h;
        CHECK(std::abs((lp - lm) / (2 * h) - g.bias[c]) < 1e-7);
    }
}

TEST_CASE("transpose conv doubles H and W with the decoder geometry") {
    const Tensor<double> x = random_tensor({1, 4, 3, 5, 6}, 40);
    const Tensor<double> k = random_tensor({4, 2, 1, 4, 4}, 41, 0.5);
    const Tensor<double> y = conv_transpose3d_forward(x, k, {1, 2, 2}, {0, 1, 1});
    CHECK(y.shape() == std::vector<int64_t>{1, 2, 3, 10, 12});
}

TEST_CASE("transpose conv backward matches finite differences") {
    Tensor<double> x = random_tensor({1, 3, 2, 4, 4}, 50);
    Tensor<double> k = random_tensor({3, 2, 1, 4, 4}, 51, 0.5);
    const Stride3 s{1, 2, 2};
    const Pad3 pad{0, 1, 1};
    auto fwd = [&]() { return conv_transpose3d_forward(x, k, s, pad); };
    const ProbeLoss loss(fwd());
    const ConvGrads<double> g = conv_transpose3d_backward(x, k, loss.w, s, pad);
    check_grad(x, fwd, g.input, loss, 24, 501);
    check_grad(k, fwd, g.kernel, loss, 24, 502);
}

TEST_CASE("batchnorm train output is standardized") {
    const Tensor<double> x = random_tensor({3, 4, 2, 4, 4}, 60, 3.0);
    std::vector<double> scale(4, 1.0), shift(4, 0.0), rmean(4, 0.0), rvar(4, 1.0);
    const Tensor<double> y =
        batchnorm_forward_train<double>(x, scale, shift, rmean, rvar, nullptr, true);
    const int64_t S = 2 * 4 * 4;
    for (int64_t c = 0; c < 4; ++c) {
        double mean = 0.0, var = 0.0;
        for (int64_t n = 0; n < 3; ++n)
            for (int64_t i = 0; i < S; ++i) mean += y[(n * 4 + c) * S + i];
        mean /= 3 * S;
        for (int64_t n = 0; n < 3; ++n)
            for (int64_t i = 0; i < S; ++i) {
                const double d = y[(n * 4 + c) * S + i] - mean;
                var += d * d;
            }
        var /= 3 * S;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps shrinks it slightly
        // momentum-0.1 running update
        CHECK(rmean[size_t(c)] != 0.0);
        CHECK(rvar[size_t(c)] != 1.0);
    }
}

TEST_CASE("batchnorm backward matches finite differences") {
    Tensor<double> x = random_tensor({2, 3, 2, 3, 3}, 70, 2.0);
    std::vector<double> scale{1.2, 0.8, 1.5}, shift{0.1, -0.3, 0.0};
    auto fwd = [&]() {
        std::vector<double> rm(3, 0.0), rv(3, 1.0);
        return batchnorm_forward_train<double>(x, scale, shift, rm, rv, nullptr, false);
    };
    const ProbeLoss loss(fwd());
    std::vector<double> rm(3, 0.0), rv(3, 1.0);
    BatchNormCache<double> cache;
    batchnorm_forward_train<double>(x, scale, shift, rm, rv, &cache, false);
    const BatchNormGrads<double> g = batchnorm_backward(loss.w, scale, cache);
    check_grad(x, fwd, g.input, loss, 30, 701, 1e-5);

    const double h = 1e-6;
    for (size_t c = 0; c < 3; ++c) {
        scale[c] += h;
        const double lp = loss.value(fwd());
        scale[c] -= 2 * h;
        const double lm = loss.value(fwd());
        scale[c] += h;
        CHECK(std::abs((lp - lm) / (2 * h) - g.scale[c]) < 1e-5);
        shift[c] += h;
        const double lp2 = loss.value(fwd());
        shift[c] -= 2 * h;
        const double lm2 = loss.value(fwd());
        shift[c] += h;
        CHECK(std::abs((lp2 - lm2) / (2 * h) - g.shift[c]) < 1e-5);
    }
}

TEST_CASE("batchnorm eval uses running statistics") {
    const Tensor<double> x = random_tensor({1, 2, 1, 2, 2}, 80);
    std::vector<double> scale{2.0, 1.0}, shift{1.0, 0.0}, rmean{0.5, -0.5}, rvar{4.0, 1.0};
    const Tensor<double> y = batchnorm_forward_eval(x, scale, shift, rmean, rvar);
    for (int64_t i = 0; i < 4; ++i) {
        const double expect = 2.0 * (x[i] - 0.5) / std::sqrt(4.0 + kBatchNormEps) + 1.0;
        CHECK(y[i] == doctest::Approx(expect));
    }
}

TEST_CASE("maxpool picks the window max and routes gradients to it") {
    Tensor<double> x({1, 1, 1, 2, 4});
    const double vals[8] = {1, 5, 2, 3, 4, 0, 9, 8};
    for (int i = 0; i < 8; ++i) x[i] = vals[i];
    std::vector<uint8_t> argmax;
    const Tensor<double> y = maxpool_hw2_forward(x, &argmax);
    CHECK(y.shape() == std::vector<int64_t>{1, 1, 1, 1, 2});
    CHECK(y[0] == 5.0);
    CHECK(y[1] == 9.0);

    Tensor<double> g({1, 1, 1, 1, 2});
    g[0] = 1.5;
    g[1] = -2.0;
    const Tensor<double> gx = maxpool_hw2_backward(g, argmax, x.shape());
    CHECK(gx[1] == 1.5);   // position of the 5
    CHECK(gx[6] == -2.0);  // position of the 9
    double total = 0;
    for (int64_t i = 0; i < gx.numel(); ++i) total += std::abs(gx[i]);
    CHECK(total == doctest::Approx(3.5));
}

TEST_CASE("softmax normalizes and its backward matches finite differences") {
    Tensor<double> x = random_tensor({2, 4, 1, 2, 2}, 90, 2.0);
    auto fwd = [&]() { return softmax_channels(x); };
    const Tensor<double> p = fwd();
    const int64_t S = 4;
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t i = 0; i < S; ++i) {
            double sum = 0.0;
            for (int64_t c = 0; c < 4; ++c) sum += p[n * 4 * S + c * S + i];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    const ProbeLoss loss(p);
    const Tensor<double> g = softmax_channels_backward(loss.w, p);
    check_grad(x, fwd, g, loss, 30, 901, 1e-5);
}

TEST_CASE("relu masks negatives in both directions") {
    Tensor<double> x({1, 1, 1, 1, 4});
    x[0] = -1.0;
    x[1] = 2.0;
    x[2] = 0.0;
    x[3] = 3.0;
    std::vector<uint8_t> mask;
    const Tensor<double> y = relu_forward(x, &mask);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 2.0);
    CHECK(y[2] == 0.0);
    CHECK(y[3] == 3.0);
    Tensor<double> g({1, 1, 1, 1, 4});
    g.fill(1.0);
    const Tensor<double> gx = relu_backward(g, mask);
    CHECK(gx[0] == 0.0);
    CHECK(gx[1] == 1.0);
    CHECK(gx[2] == 0.0);
    CHECK(gx[3] == 1.0);
}

TEST_CASE("shortcut subsamples, zero-pads channels, and inverts in backward") {
    Tensor<double> x = random_tensor({1, 2, 2, 4, 4}, 95);
    const Tensor<double> y = shortcut_forward(x, 4, 2);
    CHECK(y.shape() == std::vector<int64_t>{1, 4, 2, 2, 2});
    CHECK(y.at5(0, 0, 1, 1, 1) == x.at5(0, 0, 1, 2, 2));
    CHECK(y.at5(0, 3, 0, 0, 0) == 0.0);

    auto fwd = [&]() { return shortcut_forward(x, 4, 2); };
    const ProbeLoss loss(y);
    const Tensor<double> gx = shortcut_backward(loss.w, 2, 2, x.shape());
    check_grad(x, fwd, gx, loss, 20, 951);
}

TEST_CASE("concat and split are inverse") {
    const Tensor<double> a = random_tensor({2, 3, 1, 2, 2}, 97);
    const Tensor<double> b = random_tensor({2, 2, 1, 2, 2}, 98);
    const Tensor<double> c = concat_channels(a, b);
    CHECK(c.shape() == std::vector<int64_t>{2, 5, 1, 2, 2});
    Tensor<double> ga, gb;
    split_channels(c, 3, ga, gb);
    CHECK(ga.values() == a.values());
    CHECK(gb.values() == b.values());
}
