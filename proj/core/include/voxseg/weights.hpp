#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

// Named float32 tensor store backed by a text manifest plus one contiguous
// little-endian blob. The manifest carries one line per tensor:
//   <name> float32 <d0,d1,...> <byte_offset> <fnv1a64-checksum>
// Offsets are ascending, non-overlapping and consistent with the shapes.
class WeightStore {
public:
    struct Entry {
        std::string name;
        std::vector<int64_t> shape;
        int64_t byte_offset = 0;
        uint64_t checksum = 0;
    };

    void add(const std::string& name, std::vector<int64_t> shape, const std::vector<float>& values);
    void add(const std::string& name, const Tensor<float>& tensor);

    bool contains(const std::string& name) const;
    const Entry& entry(const std::string& name) const;  // throws on unknown name
    Tensor<float> tensor(const std::string& name) const;
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    // Writes <prefix>.manifest and <prefix>.blob.
    void save(const std::string& prefix) const;
    static WeightStore load(const std::string& prefix);

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
    std::vector<uint8_t> blob_;
};

uint64_t fnv1a64(const uint8_t* bytes, size_t count);

}  // namespace voxseg
