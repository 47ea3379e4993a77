#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "voxseg/rng.hpp"
#include "voxseg/synth.hpp"
#include "voxseg/training.hpp"

using namespace voxseg;

namespace {

// One-hot reference with the given class index at every voxel.
Tensor<uint8_t> uniform_ref(std::vector<int64_t> shape, int cls) {
    Tensor<uint8_t> ref(std::move(shape));
    const int64_t n = ref.dim(2) * ref.dim(3) * ref.dim(4);
    for (int64_t b = 0; b < ref.dim(0); ++b)
        for (int64_t i = 0; i < n; ++i) ref[(b * 4 + cls) * n + i] = 1;
    return ref;
}

Tensor<float> hard_probs(const Tensor<uint8_t>& one_hot_grid) {
    Tensor<float> p(one_hot_grid.shape());
    for (int64_t i = 0; i < p.numel(); ++i) p[i] = float(one_hot_grid[i]);
    return p;
}

ParamSet<float> scalar_params(int64_t n) {
    return ParamSet<float>(std::vector<TensorSpec>{{"w", {n}}});
}

}  // namespace

TEST_CASE("perfect prediction has zero loss") {
    std::mt19937_64 rng(1);
    Tensor<uint8_t> ref({2, 4, 2, 3, 3});
    const int64_t n = 2 * 3 * 3;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < n; ++i) ref[(b * 4 + uniform_below(rng, 4)) * n + i] = 1;
    const DiceLossResult<float> r = multiple_dice_loss(hard_probs(ref), ref);
    CHECK(std::abs(r.loss) < 1e-9);
    for (double d : r.per_class_dsc) CHECK(d == doctest::Approx(1.0));
}

TEST_CASE("fully disjoint prediction has loss 1") {
    // every foreground class present on both sides, zero overlap: each voxel
    // is predicted as the class after its reference class (cycling 1,2,4)
    Tensor<uint8_t> ref({1, 4, 1, 4, 4});
    Tensor<uint8_t> pred({1, 4, 1, 4, 4});
    const int64_t n = 16;
    for (int64_t v = 0; v < 12; ++v) {
        ref[(1 + v % 3) * n + v] = 1;
        pred[(1 + (v + 1) % 3) * n + v] = 1;
    }
    for (int64_t v = 12; v < 16; ++v) {  // background on both sides
        ref[v] = 1;
        pred[v] = 1;
    }
    const DiceLossResult<float> r = multiple_dice_loss(hard_probs(pred), ref);
    CHECK(r.loss == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("hand case: DSC 0.6 on one class, others perfect") {
    // grid of 16 voxels: class1 ref = 4 voxels; prediction covers 3 of them
    // plus 3 others; classes 2 and 4 get one perfectly predicted voxel each
    Tensor<uint8_t> ref({1, 4, 1, 4, 4});
    Tensor<float> probs({1, 4, 1, 4, 4});
    const int64_t n = 16;
    auto set_ref = [&](int64_t voxel, int cls) { ref[cls * n + voxel] = 1; };
    auto set_pred = [&](int64_t voxel, int cls) { probs[cls * n + voxel] = 1.0f; };
    for (int64_t v = 0; v < 4; ++v) set_ref(v, 1);           // |r| = 4
    for (int64_t v = 1; v < 4; ++v) set_pred(v, 1);          // overlap 3
    for (int64_t v = 8; v < 11; ++v) set_pred(v, 1);         // 3 false positives
    set_ref(12, 2);
    set_pred(12, 2);
    set_ref(13, 3);
    set_pred(13, 3);
    for (int64_t v = 0; v < n; ++v) {  // everything else: background both sides
        bool has_ref = false, has_pred = false;
        for (int c = 1; c < 4; ++c) {
            has_ref |= ref[c * n + v] != 0;
            has_pred |= probs[c * n + v] != 0.0f;
        }
        if (!has_ref) set_ref(v, 0);
        if (!has_pred) set_pred(v, 0);
    }
    const DiceLossResult<float> r = multiple_dice_loss(probs, ref);
    CHECK(r.per_class_dsc[0] == doctest::Approx(0.6).epsilon(1e-4));
    CHECK(r.per_class_dsc[1] == doctest::Approx(1.0));
    CHECK(r.per_class_dsc[2] == doctest::Approx(1.0));
    CHECK(r.loss == doctest::Approx(1.0 - 2.6 / 3.0).epsilon(1e-4));
}

TEST_CASE("loss is symmetric in r and p for hard predictions") {
    std::mt19937_64 rng(5);
    Tensor<uint8_t> a({1, 4, 1, 4, 4}), b({1, 4, 1, 4, 4});
    const int64_t n = 16;
    for (int64_t i = 0; i < n; ++i) {
        a[uniform_below(rng, 4) * n + i] = 1;
        b[uniform_below(rng, 4) * n + i] = 1;
    }
    const double l_ab = multiple_dice_loss(hard_probs(a), b).loss;
    const double l_ba = multiple_dice_loss(hard_probs(b), a).loss;
    CHECK(l_ab == doctest::Approx(l_ba).epsilon(1e-9));
}

TEST_CASE("dice loss gradient matches finite differences") {
    std::mt19937_64 rng(6);
    Tensor<double> probs({1, 4, 1, 4, 4});
    for (int64_t i = 0; i < probs.numel(); ++i) probs[i] = uniform_range(rng, 0.05, 0.95);
    Tensor<uint8_t> ref({1, 4, 1, 4, 4});
    const int64_t n = 16;
    for (int64_t i = 0; i < n; ++i) ref[uniform_below(rng, 4) * n + i] = 1;

    const DiceLossResult<double> base = multiple_dice_loss(probs, ref);
    const double h = 1e-7;
    for (int probe = 0; probe < 40; ++probe) {
        const int64_t i = uniform_below(rng, probs.numel());
        const double saved = probs[i];
        probs[i] = saved + h;
        const double lp = multiple_dice_loss(probs, ref).loss;
        probs[i] = saved - h;
        const double lm = multiple_dice_loss(probs, ref).loss;
        probs[i] = saved;
        const double fd = (lp - lm) / (2 * h);
        const double an = base.grad_probs[i];
        if (std::max(std::abs(fd), std::abs(an)) < 1e-6)
            CHECK(std::abs(fd - an) < 1e-8);  // below FD noise: compare absolutely
        else
            CHECK(std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)) < 1e-4);
    }
}

TEST_CASE("loss stays within [0, 1+eps] and shape mismatches error") {
    const Tensor<uint8_t> ref = uniform_ref({1, 4, 1, 4, 4}, 1);
    CHECK_THROWS_AS((void)multiple_dice_loss(Tensor<float>({1, 4, 1, 4, 8}), ref),
                    std::invalid_argument);
}

TEST_CASE("first Adam step moves by about lr against the gradient sign") {
    ParamSet<float> params = scalar_params(2);
    params.at("w")[0] = 1.0f;
    params.at("w")[1] = -2.0f;
    ParamSet<float> grads = scalar_params(2);
    grads.at("w")[0] = 0.37f;   // |g| >> eps
    grads.at("w")[1] = -5.0f;
    AdamState state(params);
    adam_step(params, grads, state, 1e-3);
    CHECK(std::abs(params.at("w")[0] - (1.0f - 1e-3f)) < 1e-6);
    CHECK(std::abs(params.at("w")[1] - (-2.0f + 1e-3f)) < 1e-6);
    CHECK(state.t == 1);
}

TEST_CASE("zero gradient leaves parameters unchanged but advances t") {
    ParamSet<float> params = scalar_params(3);
    for (int i = 0; i < 3; ++i) params.at("w")[i] = float(i);
    ParamSet<float> grads = scalar_params(3);
    AdamState state(params);
    adam_step(params, grads, state, 1e-3);
    for (int i = 0; i < 3; ++i) CHECK(params.at("w")[i] == float(i));
    CHECK(state.t == 1);
}

TEST_CASE("non-finite gradients are rejected naming the tensor") {
    ParamSet<float> params = scalar_params(1);
    ParamSet<float> grads = scalar_params(1);
    grads.at("w")[0] = std::numeric_limits<float>::quiet_NaN();
    AdamState state(params);
    CHECK_THROWS_WITH_AS(adam_step(params, grads, state, 1e-3),
                         "non-finite gradient in tensor w", std::runtime_error);
}

namespace {

MultiModalScan constant_scan(Dims3 dims, float value) {
    MultiModalScan s;
    s.patient_id = "c";
    for (int c = 0; c < 3; ++c) {
        s.channels[size_t(c)] = Volume3D(dims, {1.0, 1.0, 1.0});
        std::fill(s.channels[size_t(c)].data.begin(), s.channels[size_t(c)].data.end(), value);
    }
    return s;
}

}  // namespace

TEST_CASE("patch of an exactly patch-sized volume is the whole volume") {
    std::mt19937_64 rng(9);
    MultiModalScan s = constant_scan({8, 32, 32}, 0.0f);
    for (int c = 0; c < 3; ++c)
        for (auto& v : s.channels[size_t(c)].data) v = float(uniform01(rng));
    SegmentationMap seg({8, 32, 32}, {1.0, 1.0, 1.0});
    const PatchPair pp = sample_patch(s, &seg, {8, 32, 32}, rng);
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 8 * 32 * 32; ++i)
            CHECK(pp.input[c * 8 * 32 * 32 + i] == s.channels[size_t(c)].data[size_t(i)]);
}

TEST_CASE("patch origins are uniform over the valid positions") {
    // volume 30x160x160, patch 24x128x128 -> origins over 7x33x33
    MultiModalScan s = constant_scan({30, 160, 160}, 1.0f);
    std::mt19937_64 rng(123);
    const int draws = 10000;
    std::vector<int> hz(7, 0), hy(33, 0), hx(33, 0);
    for (int d = 0; d < draws; ++d) {
        Dims3 origin;
        sample_patch_origin(s.dims(), {24, 128, 128}, rng, origin);
        ++hz[size_t(origin[0])];
        ++hy[size_t(origin[1])];
        ++hx[size_t(origin[2])];
    }
    // chi-square at alpha = 0.01
    auto chi2 = [&](const std::vector<int>& h) {
        const double expect = double(draws) / double(h.size());
        double acc = 0;
        for (int c : h) acc += (c - expect) * (c - expect) / expect;
        return acc;
    };
    CHECK(chi2(hz) < 16.812);   // df = 6
    CHECK(chi2(hy) < 53.486);   // df = 32
    CHECK(chi2(hx) < 53.486);
}

TEST_CASE("short axes are zero-padded symmetrically") {
    std::mt19937_64 rng(10);
    MultiModalScan s = constant_scan({10, 128, 128}, 2.0f);
    SegmentationMap seg({10, 128, 128}, {1.0, 1.0, 1.0});
    std::fill(seg.labels.begin(), seg.labels.end(), uint8_t(2));
    const PatchPair pp = sample_patch(s, &seg, {24, 128, 128}, rng);
    CHECK(pp.input.shape() == std::vector<int64_t>{3, 24, 128, 128});
    const int64_t hw = 128 * 128;
    for (int64_t z = 0; z < 24; ++z) {
        const bool in_data = z >= 7 && z < 17;  // pad_lo = (24-10)/2 = 7
        CHECK(pp.input[z * hw] == (in_data ? 2.0f : 0.0f));
        CHECK(pp.labels.at(z, 0, 0) == (in_data ? 2 : 0));
    }
}

TEST_CASE("augment with all toggles off is the identity") {
    std::mt19937_64 rng(11);
    Tensor<float> input({3, 4, 8, 8});
    for (int64_t i = 0; i < input.numel(); ++i) input[i] = float(uniform01(rng));
    SegmentationMap labels({4, 8, 8}, {1.0, 1.0, 1.0});
    for (auto& v : labels.labels) v = kLabelCodes[size_t(uniform_below(rng, 4))];
    const Tensor<float> before = input;
    const std::vector<uint8_t> labels_before = labels.labels;
    augment_patch(input, labels, AugmentConfig::none(), rng);
    CHECK(input.values() == before.values());
    CHECK(labels.labels == labels_before);
}

TEST_CASE("reflecting twice along one axis is the identity") {
    std::mt19937_64 rng(12);
    Tensor<float> input({3, 3, 4, 5});
    for (int64_t i = 0; i < input.numel(); ++i) input[i] = float(uniform01(rng));
    SegmentationMap labels({3, 4, 5}, {1.0, 1.0, 1.0});
    for (auto& v : labels.labels) v = kLabelCodes[size_t(uniform_below(rng, 4))];
    const Tensor<float> before = input;
    const std::vector<uint8_t> labels_before = labels.labels;
    for (int axis = 0; axis < 3; ++axis) {
        reflect_patch(input, &labels, axis);
        reflect_patch(input, &labels, axis);
        CHECK(input.values() == before.values());
        CHECK(labels.labels == labels_before);
    }
}

TEST_CASE("augmented labels stay in the codebook") {
    AugmentConfig cfg;  // everything enabled
    for (uint64_t seed = 0; seed < 8; ++seed) {
        std::mt19937_64 rng(900 + seed);
        Tensor<float> input({3, 6, 16, 16});
        for (int64_t i = 0; i < input.numel(); ++i) input[i] = float(uniform01(rng));
        SegmentationMap labels({6, 16, 16}, {1.0, 1.0, 1.0});
        for (auto& v : labels.labels) v = kLabelCodes[size_t(uniform_below(rng, 4))];
        augment_patch(input, labels, cfg, rng);
        CHECK_NOTHROW(labels.validate());
    }
}

TEST_CASE("augmentation is deterministic given the seed") {
    AugmentConfig cfg;
    auto run = [&](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<float> input({3, 4, 16, 16});
        std::mt19937_64 fill(42);
        for (int64_t i = 0; i < input.numel(); ++i) input[i] = float(uniform01(fill));
        SegmentationMap labels({4, 16, 16}, {1.0, 1.0, 1.0});
        augment_patch(input, labels, cfg, rng);
        return input;
    };
    CHECK(run(5).values() == run(5).values());
    CHECK(run(5).values() != run(6).values());
}

TEST_CASE("train with zero epochs leaves parameters untouched") {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.count = 2;
    spec.seed = 3;
    const auto cases = generate(spec);
    std::vector<TrainCase> dataset;
    for (const auto& c : cases) dataset.push_back({c.scan, c.seg});

    const NetworkConfig net = NetworkConfig::tiny();
    ParamSet<float> params = build_network<float>(net, 1);
    const ParamSet<float> before = params;
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.patch_shape = {8, 32, 32};
    cfg.batch_size = 1;
    const TrainRun run = train(cfg, net, params, dataset, 0);
    CHECK(run.epochs.empty());
    for (const auto& spec2 : parameter_specs(net))
        CHECK(params.at(spec2.name).values() == before.at(spec2.name).values());
}

TEST_CASE("training is deterministic given the seed") {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.count = 3;
    spec.seed = 4;
    const auto cases = generate(spec);
    std::vector<TrainCase> dataset;
    for (const auto& c : cases) dataset.push_back({c.scan, c.seg});

    const NetworkConfig net = NetworkConfig::tiny();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batches_per_epoch = 2;
    cfg.batch_size = 2;
    cfg.patch_shape = {8, 32, 32};
    cfg.seed = 99;

    auto run_once = [&]() {
        ParamSet<float> params = build_network<float>(net, 17);
        const TrainRun run = train(cfg, net, params, dataset, 1);
        return std::make_pair(std::move(params), run);
    };
    auto [p1, r1] = run_once();
    auto [p2, r2] = run_once();
    for (const auto& spec2 : parameter_specs(net))
        CHECK(p1.at(spec2.name).values() == p2.at(spec2.name).values());
    REQUIRE(r1.epochs.size() == r2.epochs.size());
    for (size_t e = 0; e < r1.epochs.size(); ++e) {
        CHECK(r1.epochs[e].mean_loss == r2.epochs[e].mean_loss);
        CHECK(r1.epochs[e].dice_tc == r2.epochs[e].dice_tc);
    }
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.count = 2;
    spec.seed = 5;
    const auto cases = generate(spec);
    std::vector<TrainCase> dataset;
    for (const auto& c : cases) dataset.push_back({c.scan, c.seg});

    const NetworkConfig net = NetworkConfig::tiny();
    ParamSet<float> params = build_network<float>(net, 1);
    params.at("head.bias")[0] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batches_per_epoch = 1;
    cfg.batch_size = 1;
    cfg.patch_shape = {8, 32, 32};
    CHECK_THROWS_AS((void)train(cfg, net, params, dataset, 0), TrainingDiverged);
}

TEST_CASE("pretraining reduces the classification loss and exports a strict-loadable store") {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.count = 4;
    spec.seed = 6;
    const auto examples = generate_pretrain_2d(spec);
    REQUIRE(examples.size() > 8);

    const NetworkConfig net = NetworkConfig::tiny();
    PretrainConfig pcfg;
    pcfg.steps = 60;
    pcfg.batch_size = 8;
    pcfg.seed = 7;
    const PretrainResult result = pretrain_encoder_2d(net, examples, pcfg);

    const double first = result.losses.front();
    double tail = 0;
    for (size_t i = result.losses.size() - 10; i < result.losses.size(); ++i)
        tail += result.losses[i];
    tail /= 10;
    CHECK(tail < first);

    ParamSet<float> params = build_network<float>(net, 50);
    load_pretrained(params, result.store, true);  // strict load must succeed
}

TEST_CASE("pretraining is deterministic") {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.count = 2;
    spec.seed = 8;
    const auto examples = generate_pretrain_2d(spec);
    const NetworkConfig net = NetworkConfig::tiny();
    PretrainConfig pcfg;
    pcfg.steps = 5;
    pcfg.batch_size = 4;
    pcfg.seed = 11;
    const PretrainResult a = pretrain_encoder_2d(net, examples, pcfg);
    const PretrainResult b = pretrain_encoder_2d(net, examples, pcfg);
    REQUIRE(a.store.size() == b.store.size());
    for (const auto& e : a.store.entries())
        CHECK(a.store.tensor(e.name).values() == b.store.tensor(e.name).values());
}
