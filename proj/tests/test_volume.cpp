#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

using namespace voxseg;

namespace {

Volume3D make_volume(Dims3 dims, std::vector<float> values) {
    Volume3D v(dims, {1.0, 1.0, 1.0});
    v.data = std::move(values);
    return v;
}

MultiModalScan scan_of(const Volume3D& a, const Volume3D& b, const Volume3D& c) {
    MultiModalScan s;
    s.channels = {a, b, c};
    s.patient_id = "t";
    return s;
}

SegmentationMap random_labels(Dims3 dims, uint64_t seed) {
    SegmentationMap seg(dims, {1.0, 1.0, 1.0});
    std::mt19937_64 rng(seed);
    for (auto& v : seg.labels) v = kLabelCodes[size_t(uniform_below(rng, 4))];
    return seg;
}

}  // namespace

TEST_CASE("zscore constant volume maps to zeros") {
    Volume3D v = make_volume({2, 2, 2}, std::vector<float>(8, 5.0f));
    const Volume3D out = zscore_normalize(v, NormRegion::kAll);
    for (float x : out.data) CHECK(x == 0.0f);
}

TEST_CASE("zscore 1x1x3 example") {
    Volume3D v = make_volume({1, 1, 3}, {1.0f, 2.0f, 3.0f});
    const Volume3D out = zscore_normalize(v, NormRegion::kAll);
    CHECK(out.data[0] == doctest::Approx(-1.2247448).epsilon(1e-5));
    CHECK(out.data[1] == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(out.data[2] == doctest::Approx(1.2247448).epsilon(1e-5));

    double mean = 0, sq = 0;
    for (float x : out.data) mean += x;
    mean /= 3;
    for (float x : out.data) sq += (x - mean) * (x - mean);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(sq / 3) - 1.0) < 1e-5);
}

TEST_CASE("zscore nonzero region keeps zeros and maps {4,6} to {-1,+1}") {
    Volume3D v = make_volume({1, 2, 2}, {0.0f, 0.0f, 4.0f, 6.0f});
    const Volume3D out = zscore_normalize(v, NormRegion::kNonzero);
    CHECK(out.data[0] == 0.0f);
    CHECK(out.data[1] == 0.0f);
    CHECK(out.data[2] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(out.data[3] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("zscore empty region errors") {
    Volume3D v = make_volume({1, 1, 2}, {0.0f, 0.0f});
    CHECK_THROWS_WITH_AS(zscore_normalize(v, NormRegion::kNonzero), "no voxels to normalize",
                         std::invalid_argument);
}

TEST_CASE("zscore is idempotent within 1e-5") {
    std::mt19937_64 rng(7);
    Volume3D v({3, 5, 4}, {1.0, 1.0, 1.0});
    for (auto& x : v.data) x = float(uniform_range(rng, 0.5, 9.0));
    const Volume3D once = zscore_normalize(v, NormRegion::kAll);
    const Volume3D twice = zscore_normalize(once, NormRegion::kAll);
    for (size_t i = 0; i < once.data.size(); ++i)
        CHECK(std::abs(once.data[i] - twice.data[i]) < 1e-5);
}

TEST_CASE("nonzero box of a single voxel") {
    Volume3D z({8, 8, 8}, {1.0, 1.0, 1.0});
    Volume3D a = z;
    a.at(2, 3, 4) = 1.0f;
    const BoundingBox box = nonzero_bounding_box(scan_of(a, z, z));
    CHECK(box == BoundingBox{2, 3, 3, 4, 4, 5});
}

TEST_CASE("nonzero box of a fully nonzero scan is the full extent") {
    Volume3D a({8, 8, 8}, {1.0, 1.0, 1.0});
    std::fill(a.data.begin(), a.data.end(), 2.0f);
    const BoundingBox box = nonzero_bounding_box(scan_of(a, a, a));
    CHECK(box == BoundingBox{0, 8, 0, 8, 0, 8});
}

TEST_CASE("nonzero box is the union over channels") {
    Volume3D z({8, 8, 8}, {1.0, 1.0, 1.0});
    Volume3D c0 = z, c2 = z;
    c0.at(1, 4, 4) = 1.0f;
    c2.at(5, 4, 4) = 1.0f;
    const BoundingBox box = nonzero_bounding_box(scan_of(c0, z, c2));

    // brute-force union oracle
    int64_t z0 = 8, z1 = 0;
    for (const auto& ch : {c0, z, c2})
        for (int64_t zz = 0; zz < 8; ++zz)
            for (int64_t yy = 0; yy < 8; ++yy)
                for (int64_t xx = 0; xx < 8; ++xx)
                    if (ch.at(zz, yy, xx) != 0.0f) {
                        z0 = std::min(z0, zz);
                        z1 = std::max(z1, zz + 1);
                    }
    CHECK(box.z0 == z0);
    CHECK(box.z1 == z1);
    CHECK(box.z0 == 1);
    CHECK(box.z1 == 6);
}

TEST_CASE("all-zero scan errors") {
    Volume3D z({4, 4, 4}, {1.0, 1.0, 1.0});
    CHECK_THROWS_WITH_AS(nonzero_bounding_box(scan_of(z, z, z)), "empty scan",
                         std::invalid_argument);
}

TEST_CASE("full-extent crop is the identity") {
    std::mt19937_64 rng(3);
    Volume3D a({3, 4, 5}, {1.0, 2.0, 3.0});
    for (auto& x : a.data) x = float(uniform01(rng));
    const Volume3D out = crop(a, BoundingBox{0, 3, 0, 4, 0, 5});
    CHECK(out.data == a.data);
    CHECK(out.spacing == a.spacing);
}

TEST_CASE("unit crop keeps voxel (0,0,0)") {
    Volume3D a({2, 2, 2}, {1.0, 1.0, 1.0});
    a.at(0, 0, 0) = 42.0f;
    const Volume3D out = crop(a, BoundingBox{0, 1, 0, 1, 0, 1});
    CHECK(out.dims == Dims3{1, 1, 1});
    CHECK(out.data[0] == 42.0f);
}

TEST_CASE("crop to the tight box leaves a box-filling scan") {
    Volume3D z({8, 8, 8}, {1.0, 1.0, 1.0});
    Volume3D a = z;
    for (int64_t zz = 2; zz < 5; ++zz)
        for (int64_t yy = 1; yy < 7; ++yy)
            for (int64_t xx = 3; xx < 6; ++xx) a.at(zz, yy, xx) = 1.0f;
    MultiModalScan s = scan_of(a, a, a);
    const BoundingBox box = nonzero_bounding_box(s);
    const MultiModalScan cropped = crop(s, box);
    const BoundingBox inner = nonzero_bounding_box(cropped);
    CHECK(inner == BoundingBox{0, box.z1 - box.z0, 0, box.y1 - box.y0, 0, box.x1 - box.x0});
}

TEST_CASE("nested crops compose") {
    std::mt19937_64 rng(11);
    Volume3D a({6, 7, 8}, {1.0, 1.0, 1.0});
    for (auto& x : a.data) x = float(uniform01(rng));
    const BoundingBox outer{1, 5, 2, 7, 0, 6};
    const BoundingBox inner{1, 3, 0, 4, 2, 5};  // within the cropped frame
    const Volume3D two_step = crop(crop(a, outer), inner);
    const BoundingBox composed{outer.z0 + inner.z0, outer.z0 + inner.z1, outer.y0 + inner.y0,
                               outer.y0 + inner.y1, outer.x0 + inner.x0, outer.x0 + inner.x1};
    const Volume3D one_step = crop(a, composed);
    CHECK(two_step.dims == one_step.dims);
    CHECK(two_step.data == one_step.data);
}

TEST_CASE("crop box exceeding dims errors") {
    Volume3D a({2, 2, 2}, {1.0, 1.0, 1.0});
    CHECK_THROWS_AS((void)crop(a, BoundingBox{0, 3, 0, 2, 0, 2}), std::invalid_argument);
}

TEST_CASE("one_hot of all-background fills channel 0") {
    SegmentationMap seg({2, 2, 2}, {1.0, 1.0, 1.0});
    const Tensor<uint8_t> oh = one_hot(seg);
    CHECK(oh.shape() == std::vector<int64_t>{4, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) CHECK(oh[i] == 1);
    for (int64_t i = 8; i < 32; ++i) CHECK(oh[i] == 0);
}

TEST_CASE("one_hot puts label 4 in the last channel") {
    SegmentationMap seg({1, 1, 1}, {1.0, 1.0, 1.0});
    seg.labels[0] = 4;
    const Tensor<uint8_t> oh = one_hot(seg);
    CHECK(oh[0] == 0);
    CHECK(oh[1] == 0);
    CHECK(oh[2] == 0);
    CHECK(oh[3] == 1);
}

TEST_CASE("one_hot class-axis sums to one and argmax round-trips") {
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        const SegmentationMap seg = random_labels({3, 4, 5}, seed);
        const Tensor<uint8_t> oh = one_hot(seg);
        const int64_t n = seg.voxel_count();
        for (int64_t i = 0; i < n; ++i) {
            int sum = 0, arg = 0;
            for (int c = 0; c < 4; ++c) {
                sum += oh[c * n + i];
                if (oh[c * n + i]) arg = c;
            }
            CHECK(sum == 1);
            CHECK(kLabelCodes[size_t(arg)] == seg.labels[size_t(i)]);
        }
    }
}

TEST_CASE("one_hot names the offending voxel") {
    SegmentationMap seg({1, 1, 2}, {1.0, 1.0, 1.0});
    seg.labels[1] = 3;
    CHECK_THROWS_WITH_AS((void)one_hot(seg), "unknown label value 3 at voxel 1",
                         std::invalid_argument);
}

TEST_CASE("regions of an all-enhancing map are all ones") {
    SegmentationMap seg({2, 2, 2}, {1.0, 1.0, 1.0});
    std::fill(seg.labels.begin(), seg.labels.end(), uint8_t(4));
    const RegionMasks m = regions_from_labels(seg);
    for (size_t i = 0; i < m.wt.size(); ++i) {
        CHECK(m.wt[i] == 1);
        CHECK(m.tc[i] == 1);
        CHECK(m.et[i] == 1);
    }
}

TEST_CASE("edema is whole-tumor only") {
    SegmentationMap seg({2, 2, 2}, {1.0, 1.0, 1.0});
    std::fill(seg.labels.begin(), seg.labels.end(), uint8_t(2));
    const RegionMasks m = regions_from_labels(seg);
    for (size_t i = 0; i < m.wt.size(); ++i) {
        CHECK(m.wt[i] == 1);
        CHECK(m.tc[i] == 0);
        CHECK(m.et[i] == 0);
    }
}

TEST_CASE("regions nest ET <= TC <= WT") {
    for (uint64_t seed : {10u, 20u, 30u}) {
        const SegmentationMap seg = random_labels({4, 5, 6}, seed);
        const RegionMasks m = regions_from_labels(seg);
        for (size_t i = 0; i < m.wt.size(); ++i) {
            CHECK(m.et[i] <= m.tc[i]);
            CHECK(m.tc[i] <= m.wt[i]);
        }
    }
}

TEST_CASE("probability argmax breaks ties toward the lowest class") {
    ClassProbabilityMap p;
    p.dims = {1, 1, 1};
    p.probs = {0.25f, 0.25f, 0.25f, 0.25f};
    const SegmentationMap seg = labels_from_probabilities(p, {1.0, 1.0, 1.0});
    CHECK(seg.labels[0] == 0);
}
