#include "voxseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "voxseg/nifti.hpp"
#include "voxseg/rng.hpp"

namespace fs = std::filesystem;

namespace voxseg {

void PhantomSpec::validate() const {
    for (int64_t d : dims)
        if (d < 32) throw std::invalid_argument("phantom dims must be >= 32 per axis");
    if (count < 1) throw std::invalid_argument("phantom count must be >= 1");
    for (double s : spacing)
        if (!(s > 0.0)) throw std::invalid_argument("phantom spacing must be positive");
    if (!(tumor_scale > 0.0)) throw std::invalid_argument("tumor_scale must be positive");
}

namespace {

struct Ellipsoid {
    std::array<double, 3> center;  // voxel coords (z,y,x)
    std::array<double, 3> radii;   // voxels

    bool contains(double z, double y, double x) const {
        const double dz = (z - center[0]) / radii[0];
        const double dy = (y - center[1]) / radii[1];
        const double dx = (x - center[2]) / radii[2];
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
};

// Low-frequency texture from a few random cosine waves, roughly in [-1,1].
struct SmoothTexture {
    static constexpr int kWaves = 6;
    std::array<std::array<double, 3>, kWaves> freq;
    std::array<double, kWaves> phase;

    explicit SmoothTexture(std::mt19937_64& rng) {
        for (int w = 0; w < kWaves; ++w) {
            for (int a = 0; a < 3; ++a) freq[size_t(w)][size_t(a)] = uniform_range(rng, 1.0, 3.5);
            phase[size_t(w)] = uniform_range(rng, 0.0, 2.0 * 3.14159265358979323846);
        }
    }

    double at(double fz, double fy, double fx) const {
        double acc = 0.0;
        for (int w = 0; w < kWaves; ++w)
            acc += std::cos(freq[size_t(w)][0] * fz + freq[size_t(w)][1] * fy +
                            freq[size_t(w)][2] * fx + phase[size_t(w)]);
        return acc / double(kWaves);
    }
};

struct TumorModel {
    Ellipsoid outer, middle, inner;
};

TumorModel draw_tumor(const PhantomSpec& spec, std::mt19937_64& rng) {
    const Dims3& d = spec.dims;
    TumorModel t;
    for (int a = 0; a < 3; ++a) {
        const double half = double(d[size_t(a)]) / 2.0;
        t.outer.center[size_t(a)] = half + uniform_range(rng, -0.15, 0.15) * double(d[size_t(a)]);
        const double lo = std::max(6.0, 0.16 * double(d[size_t(a)]));
        const double hi = std::max(7.5, 0.24 * double(d[size_t(a)]));
        t.outer.radii[size_t(a)] = uniform_range(rng, lo, hi) * spec.tumor_scale;
        if (t.outer.center[size_t(a)] + t.outer.radii[size_t(a)] > double(d[size_t(a)]) ||
            t.outer.center[size_t(a)] - t.outer.radii[size_t(a)] < 0.0)
            throw std::invalid_argument("tumor radii exceed volume extent");
    }
    t.middle.center = t.outer.center;
    t.inner.center = t.outer.center;
    for (int a = 0; a < 3; ++a) {
        const double m = uniform_range(rng, 0.55, 0.75) * t.outer.radii[size_t(a)];
        t.middle.radii[size_t(a)] = std::clamp(m, 4.0, t.outer.radii[size_t(a)] - 1.0);
        const double i = uniform_range(rng, 0.5, 0.7) * t.middle.radii[size_t(a)];
        t.inner.radii[size_t(a)] = std::clamp(i, 2.5, t.middle.radii[size_t(a)] - 1.0);
    }
    return t;
}

PhantomCase make_case(const PhantomSpec& spec, uint64_t case_seed, const std::string& patient_id) {
    std::mt19937_64 rng(case_seed);
    const Dims3& d = spec.dims;

    Ellipsoid brain;
    for (int a = 0; a < 3; ++a) {
        brain.center[size_t(a)] = double(d[size_t(a)]) / 2.0;
        brain.radii[size_t(a)] = uniform_range(rng, 0.42, 0.46) * double(d[size_t(a)]);
    }
    const SmoothTexture texture(rng);

    TumorModel tumor = draw_tumor(spec, rng);
    // redraw until each region rasterizes to >= 32 voxels
    for (int attempt = 0; attempt < 20; ++attempt) {
        int64_t n_et = 0, n_tc = 0, n_wt = 0;
        for (int64_t z = 0; z < d[0]; ++z)
            for (int64_t y = 0; y < d[1]; ++y)
                for (int64_t x = 0; x < d[2]; ++x) {
                    const double fz = double(z), fy = double(y), fx = double(x);
                    if (tumor.inner.contains(fz, fy, fx)) ++n_et;
                    if (tumor.middle.contains(fz, fy, fx)) ++n_tc;
                    if (tumor.outer.contains(fz, fy, fx)) ++n_wt;
                }
        if (n_et >= 32 && n_tc >= 32 && n_wt >= 32) break;
        tumor = draw_tumor(spec, rng);
    }

    PhantomCase c;
    c.scan.patient_id = patient_id;
    for (int ch = 0; ch < 3; ++ch) c.scan.channels[size_t(ch)] = Volume3D(d, spec.spacing);
    c.seg = SegmentationMap(d, spec.spacing);

    for (int64_t z = 0; z < d[0]; ++z)
        for (int64_t y = 0; y < d[1]; ++y)
            for (int64_t x = 0; x < d[2]; ++x) {
                const double fz = double(z), fy = double(y), fx = double(x);
                if (!brain.contains(fz, fy, fx)) continue;  // skull-stripped: exact zeros

                uint8_t label = 0;
                if (tumor.inner.contains(fz, fy, fx)) label = 4;
                else if (tumor.middle.contains(fz, fy, fx)) label = 1;
                else if (tumor.outer.contains(fz, fy, fx)) label = 2;
                c.seg.at(z, y, x) = label;

                const bool wt = label != 0;
                const bool tc = label == 1 || label == 4;
                const bool et = label == 4;
                const double nz = fz / double(d[0]), ny = fy / double(d[1]), nx = fx / double(d[2]);
                const double base = 0.45 + 0.18 * texture.at(nz * 6.0, ny * 6.0, nx * 6.0);

                std::array<double, 3> v{base, base, base};
                if (wt) v[MultiModalScan::kFlair] += 0.45;
                if (tc) v[MultiModalScan::kT1c] += 0.22;
                if (et) v[MultiModalScan::kT1c] += 0.45;
                if (wt) v[MultiModalScan::kT2] += 0.35;
                if (tc) v[MultiModalScan::kT2] += 0.15;
                for (int ch = 0; ch < 3; ++ch) {
                    const double noisy = v[size_t(ch)] + normal01(rng) * 0.03;
                    c.scan.channels[size_t(ch)].at(z, y, x) = float(std::max(noisy, 0.02));
                }
            }
    return c;
}

}  // namespace

std::vector<PhantomCase> generate(const PhantomSpec& spec) {
    spec.validate();
    std::vector<PhantomCase> cases;
    cases.reserve(size_t(spec.count));
    for (int i = 0; i < spec.count; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "phantom_%03d", i);
        cases.push_back(make_case(spec, mix_seed(spec.seed, uint64_t(i)), id));
    }
    return cases;
}

std::vector<PretrainExample> generate_pretrain_2d(const PhantomSpec& spec) {
    const std::vector<PhantomCase> cases = generate(spec);
    const int64_t H = spec.dims[1], W = spec.dims[2];

    std::vector<PretrainExample> with_lesion;
    std::vector<PretrainExample> background;
    for (const auto& c : cases) {
        const Dims3& d = c.seg.dims;
        for (int64_t z = 0; z < d[0]; ++z) {
            bool any_wt = false, any_tc = false, any_et = false, any_brain = false;
            for (int64_t y = 0; y < d[1]; ++y)
                for (int64_t x = 0; x < d[2]; ++x) {
                    const uint8_t v = c.seg.at(z, y, x);
                    if (v != 0) any_wt = true;
                    if (v == 1 || v == 4) any_tc = true;
                    if (v == 4) any_et = true;
                    if (c.scan.channels[0].at(z, y, x) != 0.0f) any_brain = true;
                }
            if (!any_brain) continue;

            PretrainExample ex;
            ex.label = any_et ? 3 : (any_tc ? 2 : (any_wt ? 1 : 0));
            ex.image = Tensor<float>({3, 1, H, W});
            bool degenerate = false;
            for (int ch = 0; ch < 3; ++ch) {
                Volume3D slice({1, H, W}, spec.spacing);
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W; ++x)
                        slice.at(0, y, x) = c.scan.channels[size_t(ch)].at(z, y, x);
                try {
                    slice = zscore_normalize(slice, NormRegion::kNonzero);
                } catch (const std::invalid_argument&) {
                    degenerate = true;
                    break;
                }
                std::copy(slice.data.begin(), slice.data.end(), ex.image.data() + ch * H * W);
            }
            if (degenerate) continue;
            (ex.label == 0 ? background : with_lesion).push_back(std::move(ex));
        }
    }

    // keep the background class roughly in proportion to the lesion classes
    const size_t keep = std::max<size_t>(1, with_lesion.size() / 3);
    if (background.size() > keep) background.resize(keep);
    std::vector<PretrainExample> all = std::move(with_lesion);
    all.insert(all.end(), std::make_move_iterator(background.begin()),
               std::make_move_iterator(background.end()));
    return all;
}

void save_dataset(const std::vector<PhantomCase>& cases, const std::string& dir) {
    fs::create_directories(dir);
    for (const auto& c : cases) {
        const fs::path pdir = fs::path(dir) / c.scan.patient_id;
        fs::create_directories(pdir);
        write_nifti(c.scan.channels[MultiModalScan::kFlair], (pdir / "flair.nii").string());
        write_nifti(c.scan.channels[MultiModalScan::kT1c], (pdir / "t1c.nii").string());
        write_nifti(c.scan.channels[MultiModalScan::kT2], (pdir / "t2.nii").string());
        write_nifti(c.seg, (pdir / "seg.nii").string());
    }
}

std::vector<TrainCase> load_dataset(const std::string& dir, bool require_seg) {
    if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir);
    std::vector<std::string> patients;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) patients.push_back(entry.path().filename().string());
    std::sort(patients.begin(), patients.end());
    if (patients.empty()) throw std::runtime_error("dataset directory has no patient dirs: " + dir);

    std::vector<TrainCase> cases;
    for (const auto& p : patients) {
        const fs::path pdir = fs::path(dir) / p;
        TrainCase c;
        c.scan.patient_id = p;
        c.scan.channels[MultiModalScan::kFlair] = read_volume((pdir / "flair.nii").string());
        c.scan.channels[MultiModalScan::kT1c] = read_volume((pdir / "t1c.nii").string());
        c.scan.channels[MultiModalScan::kT2] = read_volume((pdir / "t2.nii").string());
        c.scan.validate();
        const fs::path seg = pdir / "seg.nii";
        if (fs::exists(seg)) {
            c.seg = read_labels(seg.string());
        } else if (require_seg) {
            throw std::runtime_error("missing seg.nii for patient " + p);
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

}  // namespace voxseg
