#include "voxseg/inference.hpp"

#include <algorithm>
#include <stdexcept>

namespace voxseg {

std::vector<int64_t> window_positions(int64_t extent, int64_t patch, int64_t step) {
    if (extent < 1 || patch < 1 || step < 1)
        throw std::invalid_argument("window_positions extents must be >= 1");
    if (patch > extent)
        throw std::invalid_argument("patch exceeds extent; pad the volume first");
    std::vector<int64_t> origins;
    for (int64_t o = 0; o + patch <= extent; o += step) origins.push_back(o);
    const int64_t flush = extent - patch;
    if (origins.empty() || origins.back() != flush) origins.push_back(flush);
    return origins;
}

WindowLayout plan_windows(const Dims3& vol_dims, const SlidingWindowPlan& plan) {
    WindowLayout layout;
    for (int a = 0; a < 3; ++a) {
        const int64_t pad_total = std::max<int64_t>(0, plan.patch_shape[size_t(a)] - vol_dims[size_t(a)]);
        layout.pad_lo[size_t(a)] = pad_total / 2;
        layout.padded_dims[size_t(a)] = vol_dims[size_t(a)] + pad_total;
        layout.origins[size_t(a)] = window_positions(layout.padded_dims[size_t(a)],
                                                     plan.patch_shape[size_t(a)], plan.steps[size_t(a)]);
    }
    return layout;
}

Tensor<float> scan_to_batch(const MultiModalScan& scan) {
    scan.validate();
    const Dims3 d = scan.dims();
    Tensor<float> batch({1, 3, d[0], d[1], d[2]});
    const int64_t n = d[0] * d[1] * d[2];
    for (int c = 0; c < 3; ++c)
        std::copy(scan.channels[size_t(c)].data.begin(), scan.channels[size_t(c)].data.end(),
                  batch.data() + c * n);
    return batch;
}

namespace {

// Copies one zero-padded patch of every channel into a (1,3,pd,ph,pw) batch.
Tensor<float> extract_window(const MultiModalScan& scan, const WindowLayout& layout,
                             const Dims3& patch, int64_t oz, int64_t oy, int64_t ox) {
    const Dims3 dims = scan.dims();
    Tensor<float> batch({1, 3, patch[0], patch[1], patch[2]});
    float* out = batch.data();
    for (int c = 0; c < 3; ++c) {
        const Volume3D& vol = scan.channels[size_t(c)];
        for (int64_t pz = 0; pz < patch[0]; ++pz) {
            const int64_t z = oz + pz - layout.pad_lo[0];
            for (int64_t py = 0; py < patch[1]; ++py) {
                const int64_t y = oy + py - layout.pad_lo[1];
                float* row = out + ((c * patch[0] + pz) * patch[1] + py) * patch[2];
                if (z < 0 || z >= dims[0] || y < 0 || y >= dims[1]) {
                    std::fill(row, row + patch[2], 0.0f);
                    continue;
                }
                for (int64_t px = 0; px < patch[2]; ++px) {
                    const int64_t x = ox + px - layout.pad_lo[2];
                    row[px] = (x < 0 || x >= dims[2]) ? 0.0f : vol.at(z, y, x);
                }
            }
        }
    }
    return batch;
}

}  // namespace

PredictionResult predict_volume(const ParamSet<float>& params, const NetworkConfig& cfg,
                                const MultiModalScan& scan, const SlidingWindowPlan& plan) {
    scan.validate();
    if (plan.patch_shape[1] % 32 != 0 || plan.patch_shape[2] % 32 != 0)
        throw std::invalid_argument("patch H and W must be divisible by 32");
    const Dims3 dims = scan.dims();
    const WindowLayout layout = plan_windows(dims, plan);
    const Dims3& patch = plan.patch_shape;

    const int64_t n_padded =
        layout.padded_dims[0] * layout.padded_dims[1] * layout.padded_dims[2];
    std::vector<float> sum(size_t(kNumClasses) * size_t(n_padded), 0.0f);
    std::vector<int32_t> count(size_t(n_padded), 0);

    const int64_t patch_vox = patch[0] * patch[1] * patch[2];
    for (int64_t oz : layout.origins[0])
        for (int64_t oy : layout.origins[1])
            for (int64_t ox : layout.origins[2]) {
                Tensor<float> batch = extract_window(scan, layout, patch, oz, oy, ox);
                Tensor<float> probs = network_forward_eval(params, cfg, batch);
                const float* pp = probs.data();
                for (int cls = 0; cls < kNumClasses; ++cls)
                    for (int64_t pz = 0; pz < patch[0]; ++pz)
                        for (int64_t py = 0; py < patch[1]; ++py) {
                            float* dst =
                                sum.data() + cls * n_padded +
                                ((oz + pz) * layout.padded_dims[1] + (oy + py)) * layout.padded_dims[2] +
                                ox;
                            const float* src = pp + ((cls * patch[0] + pz) * patch[1] + py) * patch[2];
                            for (int64_t px = 0; px < patch[2]; ++px) dst[px] += src[px];
                        }
                for (int64_t pz = 0; pz < patch[0]; ++pz)
                    for (int64_t py = 0; py < patch[1]; ++py) {
                        int32_t* dst =
                            count.data() +
                            ((oz + pz) * layout.padded_dims[1] + (oy + py)) * layout.padded_dims[2] + ox;
                        for (int64_t px = 0; px < patch[2]; ++px) dst[px] += 1;
                    }
                (void)patch_vox;
            }

    PredictionResult result;
    result.probs.dims = dims;
    const int64_t n = dims[0] * dims[1] * dims[2];
    result.probs.probs.resize(size_t(kNumClasses) * size_t(n));
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (int64_t z = 0; z < dims[0]; ++z)
            for (int64_t y = 0; y < dims[1]; ++y)
                for (int64_t x = 0; x < dims[2]; ++x) {
                    const int64_t padded_idx =
                        ((z + layout.pad_lo[0]) * layout.padded_dims[1] + (y + layout.pad_lo[1])) *
                            layout.padded_dims[2] +
                        (x + layout.pad_lo[2]);
                    const int64_t out_idx = ((cls * dims[0] + z) * dims[1] + y) * dims[2] + x;
                    result.probs.probs[size_t(out_idx)] =
                        sum[size_t(cls * n_padded + padded_idx)] / float(count[size_t(padded_idx)]);
                }

    result.labels = labels_from_probabilities(result.probs, scan.spacing());
    return result;
}

}  // namespace voxseg
