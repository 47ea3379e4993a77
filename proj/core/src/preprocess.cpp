#include "voxseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace voxseg {

AxisSpec AxisSpec::parse(const std::string& text) {
    AxisSpec spec;
    std::stringstream ss(text);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',')) {
        if (i >= 3) throw std::invalid_argument("axis spec has more than three components: " + text);
        bool flip = false;
        std::string t = tok;
        if (!t.empty() && (t[0] == '-' || t[0] == '+')) {
            flip = t[0] == '-';
            t = t.substr(1);
        }
        int axis;
        if (t == "z") axis = 0;
        else if (t == "y") axis = 1;
        else if (t == "x") axis = 2;
        else throw std::invalid_argument("bad axis token '" + tok + "' in spec: " + text);
        spec.perm[size_t(i)] = axis;
        spec.flip[size_t(i)] = flip;
        ++i;
    }
    if (i != 3) throw std::invalid_argument("axis spec needs three components: " + text);
    spec.validate();
    return spec;
}

void AxisSpec::validate() const {
    std::array<bool, 3> seen{false, false, false};
    for (int a : perm) {
        if (a < 0 || a > 2 || seen[size_t(a)])
            throw std::invalid_argument("axis spec is not a permutation of (z,y,x)");
        seen[size_t(a)] = true;
    }
}

AxisSpec AxisSpec::inverse() const {
    validate();
    AxisSpec inv;
    for (int i = 0; i < 3; ++i) {
        inv.perm[size_t(perm[size_t(i)])] = i;
        inv.flip[size_t(perm[size_t(i)])] = flip[size_t(i)];
    }
    return inv;
}

namespace {

// For output index v, the source index u with u[perm[i]] = v[i] (reversed
// when flipped). Writes sequentially through dst.
template <typename SrcT, typename DstT>
void permute_copy(const SrcT* src, DstT* dst, const Dims3& in_dims, const Dims3& out_dims,
                  const AxisSpec& spec) {
    std::array<int64_t, 3> v;
    int64_t w = 0;
    for (v[0] = 0; v[0] < out_dims[0]; ++v[0])
        for (v[1] = 0; v[1] < out_dims[1]; ++v[1])
            for (v[2] = 0; v[2] < out_dims[2]; ++v[2], ++w) {
                std::array<int64_t, 3> u;
                for (int i = 0; i < 3; ++i) {
                    int64_t c = v[size_t(i)];
                    if (spec.flip[size_t(i)]) c = out_dims[size_t(i)] - 1 - c;
                    u[size_t(spec.perm[size_t(i)])] = c;
                }
                dst[w] = src[(u[0] * in_dims[1] + u[1]) * in_dims[2] + u[2]];
            }
}

void reoriented_geometry(const Dims3& dims, const Spacing3& spacing, const AxisSpec& spec,
                         Dims3& out_dims, Spacing3& out_spacing) {
    spec.validate();
    for (int i = 0; i < 3; ++i) {
        out_dims[size_t(i)] = dims[size_t(spec.perm[size_t(i)])];
        out_spacing[size_t(i)] = spacing[size_t(spec.perm[size_t(i)])];
    }
}

}  // namespace

Volume3D reorient(const Volume3D& vol, const AxisSpec& spec) {
    vol.validate();
    Dims3 out_dims;
    Spacing3 out_spacing;
    reoriented_geometry(vol.dims, vol.spacing, spec, out_dims, out_spacing);
    Volume3D out(out_dims, out_spacing);
    permute_copy(vol.data.data(), out.data.data(), vol.dims, out_dims, spec);
    return out;
}

SegmentationMap reorient(const SegmentationMap& seg, const AxisSpec& spec) {
    Dims3 out_dims;
    Spacing3 out_spacing;
    reoriented_geometry(seg.dims, seg.spacing, spec, out_dims, out_spacing);
    SegmentationMap out(out_dims, out_spacing);
    permute_copy(seg.labels.data(), out.labels.data(), seg.dims, out_dims, spec);
    return out;
}

Volume3D apply_mask(const Volume3D& vol, const Volume3D& mask) {
    vol.validate();
    mask.validate();
    if (vol.dims != mask.dims) throw std::invalid_argument("mask dims do not match volume");
    Volume3D out = vol;
    for (size_t i = 0; i < out.data.size(); ++i)
        if (mask.data[i] == 0.0f) out.data[i] = 0.0f;
    return out;
}

namespace {

Dims3 resampled_dims(const Dims3& dims, const Spacing3& spacing, const Spacing3& target) {
    Dims3 out;
    for (int a = 0; a < 3; ++a) {
        if (!(target[size_t(a)] > 0.0))
            throw std::invalid_argument("target spacing must be positive");
        const double extent_mm = double(dims[size_t(a)]) * spacing[size_t(a)];
        out[size_t(a)] = std::max<int64_t>(1, int64_t(std::llround(extent_mm / target[size_t(a)])));
    }
    return out;
}

// Nearest input voxel center for a cell-centered output grid.
inline int64_t nearest_index(int64_t i, double t, double s, int64_t n) {
    const int64_t j = int64_t(std::llround((double(i) + 0.5) * t / s - 0.5));
    return std::clamp<int64_t>(j, 0, n - 1);
}

}  // namespace

Volume3D resample_nn(const Volume3D& vol, const Spacing3& target) {
    vol.validate();
    const Dims3 out_dims = resampled_dims(vol.dims, vol.spacing, target);
    Volume3D out(out_dims, target);
    for (int64_t z = 0; z < out_dims[0]; ++z) {
        const int64_t sz = nearest_index(z, target[0], vol.spacing[0], vol.dims[0]);
        for (int64_t y = 0; y < out_dims[1]; ++y) {
            const int64_t sy = nearest_index(y, target[1], vol.spacing[1], vol.dims[1]);
            for (int64_t x = 0; x < out_dims[2]; ++x) {
                const int64_t sx = nearest_index(x, target[2], vol.spacing[2], vol.dims[2]);
                out.at(z, y, x) = vol.at(sz, sy, sx);
            }
        }
    }
    return out;
}

SegmentationMap resample_nn(const SegmentationMap& seg, const Spacing3& target) {
    const Dims3 out_dims = resampled_dims(seg.dims, seg.spacing, target);
    SegmentationMap out(out_dims, target);
    for (int64_t z = 0; z < out_dims[0]; ++z) {
        const int64_t sz = nearest_index(z, target[0], seg.spacing[0], seg.dims[0]);
        for (int64_t y = 0; y < out_dims[1]; ++y) {
            const int64_t sy = nearest_index(y, target[1], seg.spacing[1], seg.dims[1]);
            for (int64_t x = 0; x < out_dims[2]; ++x) {
                const int64_t sx = nearest_index(x, target[2], seg.spacing[2], seg.dims[2]);
                out.at(z, y, x) = seg.at(sz, sy, sx);
            }
        }
    }
    return out;
}

std::array<std::array<double, 3>, 3> RigidTransform::matrix() const {
    // coordinates are (z,y,x); rotations applied z, then y, then x
    const double cz = std::cos(rotation[0]), sz = std::sin(rotation[0]);
    const double cy = std::cos(rotation[1]), sy = std::sin(rotation[1]);
    const double cx = std::cos(rotation[2]), sx = std::sin(rotation[2]);
    // about z: acts on (y,x)
    const std::array<std::array<double, 3>, 3> Rz{{{1, 0, 0}, {0, cz, -sz}, {0, sz, cz}}};
    // about y: acts on (z,x)
    const std::array<std::array<double, 3>, 3> Ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
    // about x: acts on (z,y)
    const std::array<std::array<double, 3>, 3> Rx{{{cx, -sx, 0}, {sx, cx, 0}, {0, 0, 1}}};
    auto mul = [](const auto& A, const auto& B) {
        std::array<std::array<double, 3>, 3> C{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) C[size_t(i)][size_t(j)] += A[size_t(i)][size_t(k)] * B[size_t(k)][size_t(j)];
        return C;
    };
    return mul(Rx, mul(Ry, Rz));
}

Volume3D apply_rigid(const Volume3D& vol, const RigidTransform& t) {
    vol.validate();
    const auto R = t.matrix();  // inverse = transpose
    const Dims3& dims = vol.dims;
    const Spacing3& sp = vol.spacing;
    const std::array<double, 3> center{(double(dims[0]) - 1.0) / 2.0 * sp[0],
                                       (double(dims[1]) - 1.0) / 2.0 * sp[1],
                                       (double(dims[2]) - 1.0) / 2.0 * sp[2]};
    Volume3D out(dims, sp);
    for (int64_t z = 0; z < dims[0]; ++z)
        for (int64_t y = 0; y < dims[1]; ++y)
            for (int64_t x = 0; x < dims[2]; ++x) {
                const std::array<double, 3> p{double(z) * sp[0] - center[0] - t.translation[0],
                                              double(y) * sp[1] - center[1] - t.translation[1],
                                              double(x) * sp[2] - center[2] - t.translation[2]};
                std::array<double, 3> q{};
                for (int i = 0; i < 3; ++i)  // R^T p
                    q[size_t(i)] = R[0][size_t(i)] * p[0] + R[1][size_t(i)] * p[1] + R[2][size_t(i)] * p[2];
                const int64_t iz = int64_t(std::llround((q[0] + center[0]) / sp[0]));
                const int64_t iy = int64_t(std::llround((q[1] + center[1]) / sp[1]));
                const int64_t ix = int64_t(std::llround((q[2] + center[2]) / sp[2]));
                if (iz < 0 || iz >= dims[0] || iy < 0 || iy >= dims[1] || ix < 0 || ix >= dims[2])
                    continue;  // out of field -> stays 0
                out.at(z, y, x) = vol.at(iz, iy, ix);
            }
    return out;
}

double normalized_cross_correlation(const Volume3D& a, const Volume3D& b) {
    if (a.dims != b.dims) throw std::invalid_argument("NCC dims mismatch");
    double sa = 0.0, sb = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] == 0.0f || b.data[i] == 0.0f) continue;
        sa += a.data[i];
        sb += b.data[i];
        ++n;
    }
    if (n < 8) return -1.0;  // no usable overlap
    const double ma = sa / double(n), mb = sb / double(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] == 0.0f || b.data[i] == 0.0f) continue;
        const double da = a.data[i] - ma, db = b.data[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va <= 0.0 || vb <= 0.0) return -1.0;
    return cov / std::sqrt(va * vb);
}

namespace {

bool is_constant(const Volume3D& v) {
    for (size_t i = 1; i < v.data.size(); ++i)
        if (v.data[i] != v.data[0]) return false;
    return true;
}

Volume3D downsample2(const Volume3D& v) {
    const Dims3 od{std::max<int64_t>(1, v.dims[0] / 2), std::max<int64_t>(1, v.dims[1] / 2),
                   std::max<int64_t>(1, v.dims[2] / 2)};
    Volume3D out(od, {v.spacing[0] * double(v.dims[0]) / double(od[0]),
                      v.spacing[1] * double(v.dims[1]) / double(od[1]),
                      v.spacing[2] * double(v.dims[2]) / double(od[2])});
    for (int64_t z = 0; z < od[0]; ++z)
        for (int64_t y = 0; y < od[1]; ++y)
            for (int64_t x = 0; x < od[2]; ++x) {
                double acc = 0.0;
                int cnt = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int64_t sz = 2 * z + dz, sy = 2 * y + dy, sx = 2 * x + dx;
                            if (sz >= v.dims[0] || sy >= v.dims[1] || sx >= v.dims[2]) continue;
                            acc += v.at(sz, sy, sx);
                            ++cnt;
                        }
                out.at(z, y, x) = float(acc / double(cnt));
            }
    return out;
}

}  // namespace

RegistrationResult rigid_register(const Volume3D& moving, const Volume3D& reference) {
    moving.validate();
    reference.validate();
    if (is_constant(moving) || is_constant(reference))
        throw std::invalid_argument("degenerate intensity");

    // coarse-to-fine pyramid, factor 2
    std::vector<Volume3D> mov_pyr{moving}, ref_pyr{reference};
    for (int level = 1; level < 3; ++level) {
        const Volume3D& prev = mov_pyr.back();
        if (prev.dims[0] < 8 && prev.dims[1] < 8 && prev.dims[2] < 8) break;
        mov_pyr.push_back(downsample2(mov_pyr.back()));
        ref_pyr.push_back(downsample2(ref_pyr.back()));
    }

    RigidTransform t;
    RegistrationResult result;
    result.converged = true;

    for (int level = int(mov_pyr.size()) - 1; level >= 0; --level) {
        const Volume3D& mov = mov_pyr[size_t(level)];
        const Volume3D& ref = ref_pyr[size_t(level)];

        auto objective = [&](const RigidTransform& cand) {
            return normalized_cross_correlation(apply_rigid(mov, cand), ref);
        };

        std::array<double, 3> trans_step{4.0 * mov.spacing[0], 4.0 * mov.spacing[1],
                                         4.0 * mov.spacing[2]};
        std::array<double, 3> rot_step{0.1, 0.1, 0.1};
        const std::array<double, 3> trans_tol{0.25 * mov.spacing[0], 0.25 * mov.spacing[1],
                                              0.25 * mov.spacing[2]};
        const double rot_tol = 0.005;

        double best = objective(t);
        int sweep = 0;
        for (; sweep < 200; ++sweep) {
            const bool steps_done =
                trans_step[0] < trans_tol[0] && trans_step[1] < trans_tol[1] &&
                trans_step[2] < trans_tol[2] && rot_step[0] < rot_tol && rot_step[1] < rot_tol &&
                rot_step[2] < rot_tol;
            if (steps_done) break;

            bool improved = false;
            for (int p = 0; p < 6; ++p) {
                double* value = p < 3 ? &t.translation[size_t(p)] : &t.rotation[size_t(p - 3)];
                const double step = p < 3 ? trans_step[size_t(p)] : rot_step[size_t(p - 3)];
                const double saved = *value;
                for (const double cand : {saved + step, saved - step}) {
                    *value = cand;
                    const double score = objective(t);
                    if (score > best) {
                        best = score;
                        improved = true;
                        break;
                    }
                    *value = saved;
                }
            }
            if (!improved)
                for (int a = 0; a < 3; ++a) {
                    trans_step[size_t(a)] /= 2.0;
                    rot_step[size_t(a)] /= 2.0;
                }
        }
        if (level == 0) {
            result.converged = sweep < 200;
            result.ncc = best;
        }
    }

    result.transform = t;
    return result;
}

}  // namespace voxseg
