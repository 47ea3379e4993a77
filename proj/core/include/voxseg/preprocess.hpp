#pragma once

#include <array>
#include <string>

#include "voxseg/volume.hpp"

namespace voxseg {

// Signed axis permutation: output axis i takes input axis perm[i], reversed
// when flip[i] is set. Axes are 0=z, 1=y, 2=x.
struct AxisSpec {
    std::array<int, 3> perm{0, 1, 2};
    std::array<bool, 3> flip{false, false, false};

    static AxisSpec identity() { return {}; }
    // "z,y,x" order with optional '-' prefix, e.g. "-y,x,z"
    static AxisSpec parse(const std::string& text);
    AxisSpec inverse() const;
    void validate() const;  // throws unless perm is a permutation of {0,1,2}
};

// Permutes/flips the data axes; spacing is permuted accordingly. The voxel
// value multiset is preserved exactly.
Volume3D reorient(const Volume3D& vol, const AxisSpec& spec);
SegmentationMap reorient(const SegmentationMap& seg, const AxisSpec& spec);

// Keep voxels where mask is nonzero, zero elsewhere. Dims must match.
Volume3D apply_mask(const Volume3D& vol, const Volume3D& mask);

// Nearest-neighbor resampling onto the target spacing (default 1mm
// isotropic). Output dims = round(extent_mm / target). Cell-centered grids;
// equidistant ties resolve toward the higher index.
Volume3D resample_nn(const Volume3D& vol, const Spacing3& target_spacing = {1.0, 1.0, 1.0});
SegmentationMap resample_nn(const SegmentationMap& seg, const Spacing3& target_spacing = {1.0, 1.0, 1.0});

// 6-DOF rigid motion: rotation Euler angles (rz, ry, rx) in radians applied
// z-y-x order about the volume center (physical coordinates), then
// translation (tz, ty, tx) in mm.
struct RigidTransform {
    std::array<double, 3> rotation{0.0, 0.0, 0.0};
    std::array<double, 3> translation{0.0, 0.0, 0.0};

    static RigidTransform identity() { return {}; }
    // 3x3 rotation matrix in (z,y,x) coordinates
    std::array<std::array<double, 3>, 3> matrix() const;
};

// Output voxel at physical point x takes the nearest-neighbor sample of the
// input at t^-1(x); out-of-field voxels are 0. Grid and spacing preserved.
Volume3D apply_rigid(const Volume3D& vol, const RigidTransform& t);

struct RegistrationResult {
    RigidTransform transform;
    double ncc = 0.0;       // objective at the optimum
    bool converged = true;  // false when the finest level hit the sweep cap
};

// Normalized cross-correlation over mutually nonzero voxels, maximized by
// 3-level multi-resolution coordinate descent with step halving (initial
// steps 4 voxels / 0.1 rad; stop below 0.25 voxel / 0.005 rad or 200 sweeps
// per level). Deterministic. Throws "degenerate intensity" on constant input.
RegistrationResult rigid_register(const Volume3D& moving, const Volume3D& reference);

// NCC between two equally shaped volumes over mutually nonzero voxels.
double normalized_cross_correlation(const Volume3D& a, const Volume3D& b);

}  // namespace voxseg
