#include "voxseg/volume.hpp"

#include <cmath>
#include <stdexcept>

namespace voxseg {

namespace {

void check_box(const BoundingBox& box, const Dims3& dims) {
    const bool ok = box.z0 >= 0 && box.z0 < box.z1 && box.z1 <= dims[0] &&
                    box.y0 >= 0 && box.y0 < box.y1 && box.y1 <= dims[1] &&
                    box.x0 >= 0 && box.x0 < box.x1 && box.x1 <= dims[2];
    if (!ok) throw std::invalid_argument("crop box exceeds volume dims");
}

}  // namespace

void Volume3D::validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        throw std::invalid_argument("volume dims must be positive");
    if (static_cast<int64_t>(data.size()) != voxel_count())
        throw std::invalid_argument("volume data length does not equal D*H*W");
    for (double s : spacing)
        if (!(s > 0.0) || !std::isfinite(s))
            throw std::invalid_argument("volume spacing must be finite and positive");
}

void MultiModalScan::validate() const {
    for (const auto& c : channels) c.validate();
    for (int i = 1; i < 3; ++i) {
        if (channels[i].dims != channels[0].dims)
            throw std::invalid_argument("scan channels differ in dims");
        if (channels[i].spacing != channels[0].spacing)
            throw std::invalid_argument("scan channels differ in spacing");
    }
}

void SegmentationMap::validate() const {
    if (static_cast<int64_t>(labels.size()) != voxel_count())
        throw std::invalid_argument("label data length does not equal D*H*W");
    for (size_t i = 0; i < labels.size(); ++i) {
        const uint8_t v = labels[i];
        if (v != 0 && v != 1 && v != 2 && v != 4)
            throw std::invalid_argument("label value " + std::to_string(int(v)) +
                                        " outside codebook {0,1,2,4} at voxel " + std::to_string(i));
    }
}

int class_index_of_label(uint8_t label) {
    switch (label) {
        case 0: return 0;
        case 1: return 1;
        case 2: return 2;
        case 4: return 3;
        default:
            throw std::invalid_argument("unknown label value " + std::to_string(int(label)));
    }
}

Volume3D zscore_normalize(const Volume3D& vol, NormRegion region) {
    vol.validate();
    const int64_t n = vol.voxel_count();

    double sum = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < n; ++i) {
        const float v = vol.data[static_cast<size_t>(i)];
        if (region == NormRegion::kNonzero && v == 0.0f) continue;
        sum += v;
        ++count;
    }
    if (count == 0) throw std::invalid_argument("no voxels to normalize");
    const double mean = sum / static_cast<double>(count);

    double sq = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float v = vol.data[static_cast<size_t>(i)];
        if (region == NormRegion::kNonzero && v == 0.0f) continue;
        const double d = v - mean;
        sq += d * d;
    }
    const double std_pop = std::sqrt(sq / static_cast<double>(count));

    Volume3D out(vol.dims, vol.spacing);
    if (std_pop < 1e-8) return out;  // degenerate region -> all zeros

    for (int64_t i = 0; i < n; ++i) {
        const float v = vol.data[static_cast<size_t>(i)];
        if (region == NormRegion::kNonzero && v == 0.0f) continue;
        out.data[static_cast<size_t>(i)] = static_cast<float>((v - mean) / std_pop);
    }
    return out;
}

BoundingBox nonzero_bounding_box(const MultiModalScan& scan) {
    scan.validate();
    const Dims3 dims = scan.dims();
    BoundingBox box{dims[0], 0, dims[1], 0, dims[2], 0};
    bool any = false;
    for (const auto& ch : scan.channels) {
        for (int64_t z = 0; z < dims[0]; ++z)
            for (int64_t y = 0; y < dims[1]; ++y)
                for (int64_t x = 0; x < dims[2]; ++x) {
                    if (ch.at(z, y, x) == 0.0f) continue;
                    any = true;
                    box.z0 = std::min(box.z0, z);
                    box.z1 = std::max(box.z1, z + 1);
                    box.y0 = std::min(box.y0, y);
                    box.y1 = std::max(box.y1, y + 1);
                    box.x0 = std::min(box.x0, x);
                    box.x1 = std::max(box.x1, x + 1);
                }
    }
    if (!any) throw std::invalid_argument("empty scan");
    return box;
}

Volume3D crop(const Volume3D& vol, const BoundingBox& box) {
    check_box(box, vol.dims);
    Volume3D out(box.extents(), vol.spacing);
    for (int64_t z = box.z0; z < box.z1; ++z)
        for (int64_t y = box.y0; y < box.y1; ++y)
            for (int64_t x = box.x0; x < box.x1; ++x)
                out.at(z - box.z0, y - box.y0, x - box.x0) = vol.at(z, y, x);
    return out;
}

SegmentationMap crop(const SegmentationMap& seg, const BoundingBox& box) {
    check_box(box, seg.dims);
    SegmentationMap out(box.extents(), seg.spacing);
    for (int64_t z = box.z0; z < box.z1; ++z)
        for (int64_t y = box.y0; y < box.y1; ++y)
            for (int64_t x = box.x0; x < box.x1; ++x)
                out.at(z - box.z0, y - box.y0, x - box.x0) = seg.at(z, y, x);
    return out;
}

MultiModalScan crop(const MultiModalScan& scan, const BoundingBox& box) {
    MultiModalScan out;
    out.patient_id = scan.patient_id;
    for (int c = 0; c < 3; ++c) out.channels[static_cast<size_t>(c)] = crop(scan.channels[static_cast<size_t>(c)], box);
    return out;
}

Tensor<uint8_t> one_hot(const SegmentationMap& seg) {
    const int64_t n = seg.voxel_count();
    Tensor<uint8_t> out({kNumClasses, seg.dims[0], seg.dims[1], seg.dims[2]});
    uint8_t* p = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t v = seg.labels[static_cast<size_t>(i)];
        int cls;
        switch (v) {
            case 0: cls = 0; break;
            case 1: cls = 1; break;
            case 2: cls = 2; break;
            case 4: cls = 3; break;
            default:
                throw std::invalid_argument("unknown label value " + std::to_string(int(v)) +
                                            " at voxel " + std::to_string(i));
        }
        p[cls * n + i] = 1;
    }
    return out;
}

SegmentationMap labels_from_probabilities(const ClassProbabilityMap& probs, const Spacing3& spacing) {
    const int64_t n = probs.voxel_count();
    if (static_cast<int64_t>(probs.probs.size()) != kNumClasses * n)
        throw std::invalid_argument("probability grid size does not match dims");
    SegmentationMap out(probs.dims, spacing);
    for (int64_t i = 0; i < n; ++i) {
        int best = 0;
        float best_p = probs.probs[static_cast<size_t>(i)];
        for (int c = 1; c < kNumClasses; ++c) {
            const float p = probs.probs[static_cast<size_t>(c * n + i)];
            if (p > best_p) {  // ties keep the lowest class index
                best_p = p;
                best = c;
            }
        }
        out.labels[static_cast<size_t>(i)] = kLabelCodes[static_cast<size_t>(best)];
    }
    return out;
}

RegionMasks regions_from_labels(const SegmentationMap& seg) {
    seg.validate();
    const int64_t n = seg.voxel_count();
    RegionMasks m;
    m.dims = seg.dims;
    m.wt.assign(static_cast<size_t>(n), 0);
    m.tc.assign(static_cast<size_t>(n), 0);
    m.et.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t v = seg.labels[static_cast<size_t>(i)];
        if (v == 0) continue;
        m.wt[static_cast<size_t>(i)] = 1;                    // {1,2,4}
        if (v == 1 || v == 4) m.tc[static_cast<size_t>(i)] = 1;  // {1,4}
        if (v == 4) m.et[static_cast<size_t>(i)] = 1;        // {4}
    }
    return m;
}

}  // namespace voxseg
