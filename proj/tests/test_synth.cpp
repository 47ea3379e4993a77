#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "voxseg/synth.hpp"

using namespace voxseg;
namespace fs = std::filesystem;

TEST_CASE("generation is deterministic given the seed") {
    PhantomSpec spec;
    spec.dims = {32, 48, 48};
    spec.count = 3;
    spec.seed = 5;
    const auto a = generate(spec);
    const auto b = generate(spec);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        for (int c = 0; c < 3; ++c)
            CHECK(a[i].scan.channels[size_t(c)].data == b[i].scan.channels[size_t(c)].data);
        CHECK(a[i].seg.labels == b[i].seg.labels);
    }
    spec.seed = 6;
    const auto c = generate(spec);
    CHECK(a[0].scan.channels[0].data != c[0].scan.channels[0].data);
}

TEST_CASE("every case nests ET <= TC <= WT with at least 32 voxels per region") {
    PhantomSpec spec;
    spec.dims = {36, 56, 56};
    spec.count = 6;
    spec.seed = 1;
    for (const auto& c : generate(spec)) {
        CHECK_NOTHROW(c.seg.validate());
        const RegionMasks m = regions_from_labels(c.seg);
        int64_t net = 0, ntc = 0, nwt = 0;
        for (size_t i = 0; i < m.wt.size(); ++i) {
            CHECK(m.et[i] <= m.tc[i]);
            CHECK(m.tc[i] <= m.wt[i]);
            net += m.et[i];
            ntc += m.tc[i];
            nwt += m.wt[i];
        }
        CHECK(net >= 32);
        CHECK(ntc >= 32);
        CHECK(nwt >= 32);
    }
}

TEST_CASE("channels differ by region contrast") {
    PhantomSpec spec;
    spec.dims = {32, 48, 48};
    spec.count = 1;
    spec.seed = 2;
    const auto cases = generate(spec);
    const auto& c = cases[0];
    // FLAIR mean over WT voxels clearly above its mean over plain brain
    double wt_sum = 0, brain_sum = 0;
    int64_t wt_n = 0, brain_n = 0;
    const auto& flair = c.scan.channels[MultiModalScan::kFlair];
    for (int64_t i = 0; i < c.seg.voxel_count(); ++i) {
        const float v = flair.data[size_t(i)];
        if (v == 0.0f) continue;
        if (c.seg.labels[size_t(i)] != 0) {
            wt_sum += v;
            ++wt_n;
        } else {
            brain_sum += v;
            ++brain_n;
        }
    }
    CHECK(wt_n > 0);
    CHECK(wt_sum / double(wt_n) > brain_sum / double(brain_n) + 0.2);
}

TEST_CASE("small dims and oversized tumors are rejected") {
    PhantomSpec spec;
    spec.dims = {20, 48, 48};
    CHECK_THROWS_AS((void)generate(spec), std::invalid_argument);
    spec.dims = {32, 48, 48};
    spec.tumor_scale = 10.0;
    CHECK_THROWS_WITH_AS((void)generate(spec), "tumor radii exceed volume extent",
                         std::invalid_argument);
}

TEST_CASE("pretraining slices stay in range and carry all classes") {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.count = 6;
    spec.seed = 3;
    const auto examples = generate_pretrain_2d(spec);
    REQUIRE(!examples.empty());
    std::array<int, 4> histogram{0, 0, 0, 0};
    for (const auto& ex : examples) {
        REQUIRE(ex.label >= 0);
        REQUIRE(ex.label < 4);
        ++histogram[size_t(ex.label)];
        CHECK(ex.image.shape() == std::vector<int64_t>{3, 1, 64, 64});
    }
    // the slicing rule yields all four classes on a healthy dataset
    for (int cls = 0; cls < 4; ++cls) CHECK(histogram[size_t(cls)] > 0);

    // per-slice nonzero z-scoring: mean over nonzero approximately 0
    const auto& img = examples[0].image;
    const int64_t hw = 64 * 64;
    double mean = 0;
    int64_t n = 0;
    for (int64_t i = 0; i < hw; ++i)
        if (img[i] != 0.0f) {
            mean += img[i];
            ++n;
        }
    CHECK(n > 0);
    CHECK(std::abs(mean / double(n)) < 1e-4);
}

TEST_CASE("datasets survive the save/load round trip") {
    PhantomSpec spec;
    spec.dims = {32, 48, 48};
    spec.count = 2;
    spec.seed = 4;
    const auto cases = generate(spec);
    const std::string dir =
        (fs::temp_directory_path() / "voxseg_synth_roundtrip").string();
    fs::remove_all(dir);
    save_dataset(cases, dir);
    CHECK(fs::exists(fs::path(dir) / "phantom_000" / "flair.nii"));
    CHECK(fs::exists(fs::path(dir) / "phantom_001" / "seg.nii"));

    const std::vector<TrainCase> loaded = load_dataset(dir);
    REQUIRE(loaded.size() == cases.size());
    for (size_t i = 0; i < cases.size(); ++i) {
        CHECK(loaded[i].scan.patient_id == cases[i].scan.patient_id);
        for (int c = 0; c < 3; ++c)
            CHECK(loaded[i].scan.channels[size_t(c)].data ==
                  cases[i].scan.channels[size_t(c)].data);
        CHECK(loaded[i].seg.labels == cases[i].seg.labels);
    }
}

TEST_CASE("missing segmentation is an error unless waived") {
    PhantomSpec spec;
    spec.dims = {32, 48, 48};
    spec.count = 1;
    spec.seed = 9;
    const auto cases = generate(spec);
    const std::string dir = (fs::temp_directory_path() / "voxseg_synth_noseg").string();
    fs::remove_all(dir);
    save_dataset(cases, dir);
    fs::remove(fs::path(dir) / "phantom_000" / "seg.nii");
    CHECK_THROWS_AS((void)load_dataset(dir), std::runtime_error);
    const auto loaded = load_dataset(dir, false);
    CHECK(loaded.size() == 1);
    CHECK(loaded[0].seg.labels.empty());
}
