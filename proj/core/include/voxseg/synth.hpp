#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/training.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// Synthetic phantom model: a brain-like blob with smooth texture holding
// three nested ellipsoids (outer = edema-like, middle = core-like, inner =
// enhancing-like), with per-channel intensity offsets emulating the contrast
// differences between FLAIR, T1c and T2.
struct PhantomSpec {
    Dims3 dims{48, 64, 64};  // every axis must be >= 32
    int count = 10;
    uint64_t seed = 0;
    Spacing3 spacing{1.0, 1.0, 1.0};
    double tumor_scale = 1.0;  // scales outer radii; oversized radii error out

    void validate() const;
};

struct PhantomCase {
    MultiModalScan scan;
    SegmentationMap seg;
};

// Deterministic given the seed; every case has >= 32 voxels in each of
// ET, TC and WT, nested ET <= TC <= WT by construction.
std::vector<PhantomCase> generate(const PhantomSpec& spec);

// 2D slice-classification set cut from the same phantom model. Classes:
// 0 = no lesion, 1 = edema only, 2 = tumor core without enhancing,
// 3 = enhancing present. Channels are per-slice z-score normalized, matching
// the network's training-time input statistics.
std::vector<PretrainExample> generate_pretrain_2d(const PhantomSpec& spec);

// One directory per patient: flair.nii, t1c.nii, t2.nii, seg.nii.
void save_dataset(const std::vector<PhantomCase>& cases, const std::string& dir);
std::vector<TrainCase> load_dataset(const std::string& dir, bool require_seg = true);

}  // namespace voxseg
