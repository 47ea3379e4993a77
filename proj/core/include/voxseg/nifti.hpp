#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/volume.hpp"

namespace voxseg {

// Supported NIfTI-1 datatype codes (little-endian single-file ".nii" only).
enum class NiftiDatatype : int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kFloat32 = 16,
};

inline constexpr int kNiftiHeaderSize = 348;
inline constexpr int kNiftiVoxOffset = 352;

// Decoded image plus the original header bytes. Orientation metadata
// (quaternions/affines) rides along opaquely and is re-emitted on write;
// it is never interpreted here.
struct NiftiImage {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    NiftiDatatype dtype = NiftiDatatype::kFloat32;
    std::vector<float> data;          // values, (z,y,x) with x fastest
    std::vector<uint8_t> raw_header;  // the file's 348 header bytes
};

NiftiImage read_nifti(const std::string& path);

Volume3D volume_from_nifti(const NiftiImage& img);
SegmentationMap labels_from_nifti(const NiftiImage& img);  // validates the codebook

Volume3D read_volume(const std::string& path);
SegmentationMap read_labels(const std::string& path);

// Writes a single-file ".nii" re-readable with identical dims, spacing and
// values. float32 payloads round-trip bit-exactly. When raw_header is given
// its bytes seed the header and only the fields this subset owns (sizeof_hdr,
// dim, datatype, bitpix, pixdim[0..3], vox_offset, magic) are overwritten.
void write_nifti(const Volume3D& vol, const std::string& path,
                 NiftiDatatype dtype = NiftiDatatype::kFloat32,
                 const std::vector<uint8_t>* raw_header = nullptr);
void write_nifti(const SegmentationMap& seg, const std::string& path,
                 const std::vector<uint8_t>* raw_header = nullptr);  // uint8 payload

}  // namespace voxseg
