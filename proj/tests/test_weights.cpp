#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "voxseg/rng.hpp"
#include "voxseg/weights.hpp"

using namespace voxseg;
namespace fs = std::filesystem;

namespace {

std::string tmp_prefix(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "voxseg_weight_tests";
    fs::create_directories(dir);
    return (dir / name).string();
}

std::vector<float> random_values(int64_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<float> v(static_cast<size_t>(n), 0.0f);
    for (auto& x : v) x = float(uniform_range(rng, -2.0, 2.0));
    return v;
}

}  // namespace

TEST_CASE("empty store round-trips") {
    WeightStore store;
    const std::string prefix = tmp_prefix("empty");
    store.save(prefix);
    const WeightStore loaded = WeightStore::load(prefix);
    CHECK(loaded.size() == 0);
}

TEST_CASE("single tensor has the product-of-shape payload") {
    WeightStore store;
    store.add("enc.conv1.weight", {4, 3, 3, 3}, random_values(108, 1));
    CHECK(store.entry("enc.conv1.weight").byte_offset == 0);
    const std::string prefix = tmp_prefix("single");
    store.save(prefix);
    CHECK(fs::file_size(prefix + ".blob") == 108 * 4);

    const WeightStore loaded = WeightStore::load(prefix);
    const Tensor<float> t = loaded.tensor("enc.conv1.weight");
    CHECK(t.shape() == std::vector<int64_t>{4, 3, 3, 3});
    CHECK(t.values() == store.tensor("enc.conv1.weight").values());
}

TEST_CASE("multiple tensors round-trip with ascending offsets") {
    WeightStore store;
    store.add("a", {2, 3}, random_values(6, 2));
    store.add("b", {5}, random_values(5, 3));
    store.add("c", {1, 1, 4}, random_values(4, 4));
    const std::string prefix = tmp_prefix("multi");
    store.save(prefix);
    const WeightStore loaded = WeightStore::load(prefix);
    REQUIRE(loaded.size() == 3);
    CHECK(loaded.entry("a").byte_offset == 0);
    CHECK(loaded.entry("b").byte_offset == 24);
    CHECK(loaded.entry("c").byte_offset == 44);
    for (const char* name : {"a", "b", "c"})
        CHECK(loaded.tensor(name).values() == store.tensor(name).values());
}

TEST_CASE("duplicate names are rejected") {
    WeightStore store;
    store.add("w", {2}, {1.0f, 2.0f});
    CHECK_THROWS_AS(store.add("w", {2}, {3.0f, 4.0f}), std::invalid_argument);
}

TEST_CASE("unknown lookup fails loudly") {
    WeightStore store;
    CHECK_THROWS_AS((void)store.tensor("missing"), std::out_of_range);
}

TEST_CASE("a flipped blob byte fails the checksum") {
    WeightStore store;
    store.add("w", {3}, {1.0f, 2.0f, 3.0f});
    const std::string prefix = tmp_prefix("corrupt");
    store.save(prefix);

    std::fstream blob(prefix + ".blob", std::ios::binary | std::ios::in | std::ios::out);
    blob.seekp(5);
    char byte;
    blob.seekg(5);
    blob.get(byte);
    byte = char(byte ^ 0x40);
    blob.seekp(5);
    blob.put(byte);
    blob.close();

    CHECK_THROWS_WITH_AS((void)WeightStore::load(prefix), "checksum mismatch for tensor w",
                         std::runtime_error);
}

TEST_CASE("offset inconsistent with shapes is rejected") {
    WeightStore store;
    store.add("a", {2}, {1.0f, 2.0f});
    store.add("b", {2}, {3.0f, 4.0f});
    const std::string prefix = tmp_prefix("offsets");
    store.save(prefix);

    // rewrite the manifest with a bogus offset for b
    std::ifstream in(prefix + ".manifest");
    std::string line1, line2;
    std::getline(in, line1);
    std::getline(in, line2);
    in.close();
    line2.replace(line2.find(" 8 "), 3, " 4 ");
    std::ofstream out(prefix + ".manifest", std::ios::trunc);
    out << line1 << "\n" << line2 << "\n";
    out.close();

    CHECK_THROWS_AS((void)WeightStore::load(prefix), std::runtime_error);
}

TEST_CASE("shape/value-count mismatch is rejected at add time") {
    WeightStore store;
    CHECK_THROWS_AS(store.add("w", {4}, {1.0f, 2.0f}), std::invalid_argument);
}

TEST_CASE("blob shorter than the manifest total is rejected") {
    WeightStore store;
    store.add("w", {4}, random_values(4, 5));
    const std::string prefix = tmp_prefix("shortblob");
    store.save(prefix);
    fs::resize_file(prefix + ".blob", 12);
    CHECK_THROWS_AS((void)WeightStore::load(prefix), std::runtime_error);
}
