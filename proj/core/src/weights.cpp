#include "voxseg/weights.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace voxseg {

uint64_t fnv1a64(const uint8_t* bytes, size_t count) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < count; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

std::vector<uint8_t> to_le_bytes(const std::vector<float>& values) {
    std::vector<uint8_t> out(values.size() * 4);
    for (size_t i = 0; i < values.size(); ++i) {
        uint32_t u;
        std::memcpy(&u, &values[i], 4);
        out[4 * i + 0] = uint8_t(u);
        out[4 * i + 1] = uint8_t(u >> 8);
        out[4 * i + 2] = uint8_t(u >> 16);
        out[4 * i + 3] = uint8_t(u >> 24);
    }
    return out;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    if (shape.empty()) return "1";
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s;
}

std::vector<int64_t> parse_shape(const std::string& s) {
    std::vector<int64_t> shape;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) throw std::runtime_error("malformed shape in manifest: " + s);
        shape.push_back(std::stoll(tok));
    }
    if (shape.empty()) throw std::runtime_error("malformed shape in manifest: " + s);
    return shape;
}

}  // namespace

void WeightStore::add(const std::string& name, std::vector<int64_t> shape,
                      const std::vector<float>& values) {
    if (index_.count(name)) throw std::invalid_argument("duplicate tensor name: " + name);
    if (numel_of(shape) != int64_t(values.size()))
        throw std::invalid_argument("tensor " + name + " shape/value-count mismatch");
    Entry e;
    e.name = name;
    e.shape = std::move(shape);
    e.byte_offset = int64_t(blob_.size());
    const std::vector<uint8_t> bytes = to_le_bytes(values);
    e.checksum = fnv1a64(bytes.data(), bytes.size());
    blob_.insert(blob_.end(), bytes.begin(), bytes.end());
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
}

void WeightStore::add(const std::string& name, const Tensor<float>& tensor) {
    add(name, tensor.shape(), tensor.values());
}

bool WeightStore::contains(const std::string& name) const { return index_.count(name) != 0; }

const WeightStore::Entry& WeightStore::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("tensor not in weight store: " + name);
    return entries_[it->second];
}

Tensor<float> WeightStore::tensor(const std::string& name) const {
    const Entry& e = entry(name);
    const int64_t n = numel_of(e.shape);
    std::vector<float> values(static_cast<size_t>(n), 0.0f);
    const uint8_t* p = blob_.data() + e.byte_offset;
    for (int64_t i = 0; i < n; ++i) {
        uint32_t u = uint32_t(p[4 * i]) | uint32_t(p[4 * i + 1]) << 8 |
                     uint32_t(p[4 * i + 2]) << 16 | uint32_t(p[4 * i + 3]) << 24;
        std::memcpy(&values[size_t(i)], &u, 4);
    }
    return Tensor<float>(e.shape, std::move(values));
}

void WeightStore::save(const std::string& prefix) const {
    std::ofstream manifest(prefix + ".manifest", std::ios::trunc);
    if (!manifest) throw std::runtime_error("cannot write manifest: " + prefix + ".manifest");
    for (const Entry& e : entries_) {
        char checksum[17];
        std::snprintf(checksum, sizeof(checksum), "%016llx", static_cast<unsigned long long>(e.checksum));
        manifest << e.name << " float32 " << shape_to_string(e.shape) << " " << e.byte_offset
                 << " " << checksum << "\n";
    }
    if (!manifest) throw std::runtime_error("manifest write failed: " + prefix);
    std::ofstream blob(prefix + ".blob", std::ios::binary | std::ios::trunc);
    if (!blob) throw std::runtime_error("cannot write blob: " + prefix + ".blob");
    blob.write(reinterpret_cast<const char*>(blob_.data()), std::streamsize(blob_.size()));
    if (!blob) throw std::runtime_error("blob write failed: " + prefix);
}

WeightStore WeightStore::load(const std::string& prefix) {
    std::ifstream manifest(prefix + ".manifest");
    if (!manifest) throw std::runtime_error("cannot open manifest: " + prefix + ".manifest");
    std::ifstream blob_in(prefix + ".blob", std::ios::binary);
    if (!blob_in) throw std::runtime_error("cannot open blob: " + prefix + ".blob");

    WeightStore store;
    store.blob_.assign((std::istreambuf_iterator<char>(blob_in)), std::istreambuf_iterator<char>());

    std::string line;
    int64_t expected_offset = 0;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string name, dtype, shape_str, offset_str, checksum_str;
        if (!(ss >> name >> dtype >> shape_str >> offset_str >> checksum_str))
            throw std::runtime_error("malformed manifest line: " + line);
        if (dtype != "float32") throw std::runtime_error("unsupported dtype in manifest: " + dtype);
        if (store.index_.count(name)) throw std::runtime_error("duplicate tensor name: " + name);

        Entry e;
        e.name = name;
        e.shape = parse_shape(shape_str);
        e.byte_offset = std::stoll(offset_str);
        e.checksum = std::stoull(checksum_str, nullptr, 16);

        if (e.byte_offset != expected_offset)
            throw std::runtime_error("tensor " + name + " offset " + std::to_string(e.byte_offset) +
                                     " inconsistent with preceding shapes (expected " +
                                     std::to_string(expected_offset) + ")");
        const int64_t bytes = numel_of(e.shape) * 4;
        expected_offset += bytes;
        if (expected_offset > int64_t(store.blob_.size()))
            throw std::runtime_error("tensor " + name + " extends past end of blob");
        const uint64_t sum = fnv1a64(store.blob_.data() + e.byte_offset, size_t(bytes));
        if (sum != e.checksum)
            throw std::runtime_error("checksum mismatch for tensor " + name);

        store.index_[name] = store.entries_.size();
        store.entries_.push_back(std::move(e));
    }
    if (expected_offset != int64_t(store.blob_.size()))
        throw std::runtime_error("blob size " + std::to_string(store.blob_.size()) +
                                 " does not match manifest total " + std::to_string(expected_offset));
    return store;
}

}  // namespace voxseg
