#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

using Dims3 = std::array<int64_t, 3>;     // (D, H, W)
using Spacing3 = std::array<double, 3>;   // (sz, sy, sx) in mm

// Single-channel scalar grid indexed (z, y, x), x fastest.
struct Volume3D {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<float> data;

    Volume3D() = default;
    Volume3D(Dims3 d, Spacing3 s) : dims(d), spacing(s), data(static_cast<size_t>(d[0] * d[1] * d[2]), 0.0f) {}

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    float& at(int64_t z, int64_t y, int64_t x) {
        return data[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    float at(int64_t z, int64_t y, int64_t x) const {
        return data[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    void validate() const;  // throws on dim/size/spacing violations
};

// Co-registered FLAIR / T1c / T2 channels of one patient.
// Channel order is fixed: 0 = FLAIR, 1 = T1c, 2 = T2 (network R, G, B).
struct MultiModalScan {
    std::array<Volume3D, 3> channels;
    std::string patient_id;

    static constexpr int kFlair = 0;
    static constexpr int kT1c = 1;
    static constexpr int kT2 = 2;

    const Dims3& dims() const { return channels[0].dims; }
    const Spacing3& spacing() const { return channels[0].spacing; }
    void validate() const;  // all channels share dims and spacing
};

// Integer label grid. Codebook: 0 background, 1 necrotic/non-enhancing core,
// 2 edema, 4 enhancing tumor.
struct SegmentationMap {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<uint8_t> labels;

    SegmentationMap() = default;
    SegmentationMap(Dims3 d, Spacing3 s)
        : dims(d), spacing(s), labels(static_cast<size_t>(d[0] * d[1] * d[2]), 0) {}

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    uint8_t& at(int64_t z, int64_t y, int64_t x) {
        return labels[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    uint8_t at(int64_t z, int64_t y, int64_t x) const {
        return labels[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    void validate() const;  // every voxel in {0,1,2,4}
};

// Label codes, ascending; also the class-axis order of one-hot and
// probability grids: channel 0 <-> 0, 1 <-> 1, 2 <-> 2, 3 <-> 4.
inline constexpr std::array<uint8_t, 4> kLabelCodes = {0, 1, 2, 4};
inline constexpr int kNumClasses = 4;

int class_index_of_label(uint8_t label);  // throws on unknown code

// Per-voxel class probabilities, shape (4, D, H, W), class axis in
// kLabelCodes order. Each voxel's 4 values are >= 0 and sum to 1.
struct ClassProbabilityMap {
    Dims3 dims{0, 0, 0};
    std::vector<float> probs;

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    float at(int cls, int64_t z, int64_t y, int64_t x) const {
        return probs[static_cast<size_t>(((cls * dims[0] + z) * dims[1] + y) * dims[2] + x)];
    }
};

// Binary region views in the BraTS nesting ET <= TC <= WT.
struct RegionMasks {
    Dims3 dims{0, 0, 0};
    std::vector<uint8_t> wt;  // labels {1,2,4}
    std::vector<uint8_t> tc;  // labels {1,4}
    std::vector<uint8_t> et;  // label  {4}
};

enum class NormRegion { kAll, kNonzero };

// z-score normalization over the chosen region: mean 0, population std 1.
// Voxels outside a `nonzero` region are set to 0. A region with std < 1e-8
// normalizes to all zeros. Throws "no voxels to normalize" on empty region.
Volume3D zscore_normalize(const Volume3D& vol, NormRegion region = NormRegion::kNonzero);

struct BoundingBox {
    // half-open ranges [z0,z1) x [y0,y1) x [x0,x1)
    int64_t z0 = 0, z1 = 0, y0 = 0, y1 = 0, x0 = 0, x1 = 0;
    Dims3 extents() const { return {z1 - z0, y1 - y0, x1 - x0}; }
    bool operator==(const BoundingBox&) const = default;
};

// Tightest box containing every voxel nonzero in ANY channel.
// Throws "empty scan" when all channels are identically zero.
BoundingBox nonzero_bounding_box(const MultiModalScan& scan);

Volume3D crop(const Volume3D& vol, const BoundingBox& box);
SegmentationMap crop(const SegmentationMap& seg, const BoundingBox& box);
MultiModalScan crop(const MultiModalScan& scan, const BoundingBox& box);

// One-hot encoding, shape (4, D, H, W), class axis in kLabelCodes order.
Tensor<uint8_t> one_hot(const SegmentationMap& seg);

// Inverse of one_hot for probability grids: per-voxel argmax over the class
// axis mapped through kLabelCodes. Ties break toward the lowest class index.
SegmentationMap labels_from_probabilities(const ClassProbabilityMap& probs, const Spacing3& spacing);

RegionMasks regions_from_labels(const SegmentationMap& seg);

}  // namespace voxseg
