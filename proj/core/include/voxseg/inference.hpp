#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxseg/network.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// Sliding-window tiling: patch 24x128x128 with steps 24 along depth and 32
// along height/width, overlapping windows averaged per voxel.
struct SlidingWindowPlan {
    Dims3 patch_shape{24, 128, 128};
    Dims3 steps{24, 32, 32};
};

// Origins 0, step, 2*step, ... plus a final flush origin extent-patch,
// deduplicated; every coordinate of [0, extent) is covered.
std::vector<int64_t> window_positions(int64_t extent, int64_t patch, int64_t step);

// The per-volume window layout: symmetric zero-padding up to the patch size
// and per-axis origin lists, sorted ascending (accumulation order is the
// lexicographic product z-major).
struct WindowLayout {
    Dims3 padded_dims{0, 0, 0};
    Dims3 pad_lo{0, 0, 0};
    std::array<std::vector<int64_t>, 3> origins;  // per axis (z, y, x)
};

WindowLayout plan_windows(const Dims3& vol_dims, const SlidingWindowPlan& plan);

struct PredictionResult {
    ClassProbabilityMap probs;
    SegmentationMap labels;
};

// Full-volume prediction: eval-mode forward per window, per-voxel arithmetic
// mean of the softmax outputs over every covering window (sum/count buffers,
// accumulated in plan order), argmax through the label codebook, padding
// removed. The scan is expected normalized and cropped as in training.
PredictionResult predict_volume(const ParamSet<float>& params, const NetworkConfig& cfg,
                                const MultiModalScan& scan, const SlidingWindowPlan& plan);

// Stacks the three modality channels of a scan into a (1,3,D,H,W) batch.
Tensor<float> scan_to_batch(const MultiModalScan& scan);

}  // namespace voxseg
