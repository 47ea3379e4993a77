#include "voxseg/nifti.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace voxseg {

namespace {

// Field offsets within the 348-byte NIfTI-1 header.
constexpr int kOffSizeofHdr = 0;
constexpr int kOffDim = 40;
constexpr int kOffDatatype = 70;
constexpr int kOffBitpix = 72;
constexpr int kOffPixdim = 76;
constexpr int kOffVoxOffset = 108;
constexpr int kOffMagic = 344;

int32_t get_i32(const uint8_t* p) {
    return int32_t(p[0]) | int32_t(p[1]) << 8 | int32_t(p[2]) << 16 | int32_t(p[3]) << 24;
}
int16_t get_i16(const uint8_t* p) { return int16_t(uint16_t(p[0]) | uint16_t(p[1]) << 8); }
float get_f32(const uint8_t* p) {
    uint32_t u = uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}
void put_i32(uint8_t* p, int32_t v) {
    p[0] = uint8_t(v); p[1] = uint8_t(v >> 8); p[2] = uint8_t(v >> 16); p[3] = uint8_t(v >> 24);
}
void put_i16(uint8_t* p, int16_t v) { p[0] = uint8_t(v); p[1] = uint8_t(uint16_t(v) >> 8); }
void put_f32(uint8_t* p, float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    p[0] = uint8_t(u); p[1] = uint8_t(u >> 8); p[2] = uint8_t(u >> 16); p[3] = uint8_t(u >> 24);
}

int bytes_per_voxel(NiftiDatatype dt) {
    switch (dt) {
        case NiftiDatatype::kUint8: return 1;
        case NiftiDatatype::kInt16: return 2;
        case NiftiDatatype::kFloat32: return 4;
    }
    throw std::logic_error("unreachable datatype");
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_image(const Dims3& dims, const Spacing3& spacing, NiftiDatatype dtype,
                 const std::vector<uint8_t>& payload, const std::string& path,
                 const std::vector<uint8_t>* raw_header) {
    for (int64_t d : {dims[0], dims[1], dims[2]})
        if (d < 1 || d > 32767) throw std::invalid_argument("volume dims must fit 16-bit NIfTI header fields");

    std::vector<uint8_t> hdr(kNiftiHeaderSize, 0);
    if (raw_header) {
        if (raw_header->size() != size_t(kNiftiHeaderSize))
            throw std::invalid_argument("raw header must be exactly 348 bytes");
        hdr = *raw_header;
    }
    put_i32(hdr.data() + kOffSizeofHdr, kNiftiHeaderSize);
    // dim[0]=3; dim[1]=W (fastest), dim[2]=H, dim[3]=D; trailing dims 1
    put_i16(hdr.data() + kOffDim + 0, 3);
    put_i16(hdr.data() + kOffDim + 2, int16_t(dims[2]));
    put_i16(hdr.data() + kOffDim + 4, int16_t(dims[1]));
    put_i16(hdr.data() + kOffDim + 6, int16_t(dims[0]));
    for (int i = 4; i < 8; ++i) put_i16(hdr.data() + kOffDim + 2 * i, 1);
    put_i16(hdr.data() + kOffDatatype, int16_t(dtype));
    put_i16(hdr.data() + kOffBitpix, int16_t(8 * bytes_per_voxel(dtype)));
    if (!raw_header) put_f32(hdr.data() + kOffPixdim + 0, 1.0f);
    put_f32(hdr.data() + kOffPixdim + 4, float(spacing[2]));
    put_f32(hdr.data() + kOffPixdim + 8, float(spacing[1]));
    put_f32(hdr.data() + kOffPixdim + 12, float(spacing[0]));
    put_f32(hdr.data() + kOffVoxOffset, float(kNiftiVoxOffset));
    std::memcpy(hdr.data() + kOffMagic, "n+1\0", 4);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(hdr.data()), hdr.size());
    const uint8_t extender[4] = {0, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(extender), 4);
    out.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

NiftiImage read_nifti(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file(path);
    if (bytes.size() < size_t(kNiftiHeaderSize)) throw std::runtime_error("not a NIfTI-1 file");

    if (std::memcmp(bytes.data() + kOffMagic, "n+1\0", 4) != 0)
        throw std::runtime_error("not a NIfTI-1 file");
    if (get_i32(bytes.data() + kOffSizeofHdr) != kNiftiHeaderSize)
        throw std::runtime_error("not a NIfTI-1 file");

    const int16_t ndim = get_i16(bytes.data() + kOffDim);
    if (ndim != 3) throw std::runtime_error("unsupported dim[0]=" + std::to_string(ndim) + " (expected 3)");

    NiftiImage img;
    const int64_t w = get_i16(bytes.data() + kOffDim + 2);
    const int64_t h = get_i16(bytes.data() + kOffDim + 4);
    const int64_t d = get_i16(bytes.data() + kOffDim + 6);
    if (w < 1 || h < 1 || d < 1) throw std::runtime_error("non-positive dim in header");
    img.dims = {d, h, w};

    const float sx = get_f32(bytes.data() + kOffPixdim + 4);
    const float sy = get_f32(bytes.data() + kOffPixdim + 8);
    const float sz = get_f32(bytes.data() + kOffPixdim + 12);
    if (!(sx > 0.0f) || !(sy > 0.0f) || !(sz > 0.0f))
        throw std::runtime_error("non-positive pixdim in header");
    img.spacing = {sz, sy, sx};

    const int16_t dt = get_i16(bytes.data() + kOffDatatype);
    if (dt != 2 && dt != 4 && dt != 16)
        throw std::runtime_error("unsupported NIfTI datatype code " + std::to_string(dt));
    img.dtype = NiftiDatatype(dt);

    const float vox_offset = get_f32(bytes.data() + kOffVoxOffset);
    if (vox_offset != float(kNiftiVoxOffset))
        throw std::runtime_error("unsupported vox_offset " + std::to_string(vox_offset) +
                                 " (expected 352)");

    const int64_t n = d * h * w;
    const int64_t expected = n * bytes_per_voxel(img.dtype);
    const int64_t actual = int64_t(bytes.size()) - kNiftiVoxOffset;
    if (actual != expected)
        throw std::runtime_error("truncated payload: expected " + std::to_string(expected) +
                                 " bytes, got " + std::to_string(actual));

    img.raw_header.assign(bytes.begin(), bytes.begin() + kNiftiHeaderSize);
    img.data.resize(size_t(n));
    const uint8_t* p = bytes.data() + kNiftiVoxOffset;
    switch (img.dtype) {
        case NiftiDatatype::kUint8:
            for (int64_t i = 0; i < n; ++i) img.data[size_t(i)] = float(p[i]);
            break;
        case NiftiDatatype::kInt16:
            for (int64_t i = 0; i < n; ++i) img.data[size_t(i)] = float(get_i16(p + 2 * i));
            break;
        case NiftiDatatype::kFloat32:
            for (int64_t i = 0; i < n; ++i) img.data[size_t(i)] = get_f32(p + 4 * i);
            break;
    }
    return img;
}

Volume3D volume_from_nifti(const NiftiImage& img) {
    Volume3D vol(img.dims, img.spacing);
    vol.data = img.data;
    vol.validate();
    return vol;
}

SegmentationMap labels_from_nifti(const NiftiImage& img) {
    SegmentationMap seg(img.dims, img.spacing);
    for (size_t i = 0; i < img.data.size(); ++i) {
        const float v = img.data[i];
        if (v != std::floor(v) || v < 0.0f || v > 255.0f)
            throw std::runtime_error("non-integral label value at voxel " + std::to_string(i));
        seg.labels[i] = uint8_t(v);
    }
    seg.validate();
    return seg;
}

Volume3D read_volume(const std::string& path) { return volume_from_nifti(read_nifti(path)); }

SegmentationMap read_labels(const std::string& path) { return labels_from_nifti(read_nifti(path)); }

void write_nifti(const Volume3D& vol, const std::string& path, NiftiDatatype dtype,
                 const std::vector<uint8_t>* raw_header) {
    vol.validate();
    const int64_t n = vol.voxel_count();
    std::vector<uint8_t> payload(size_t(n) * size_t(bytes_per_voxel(dtype)));
    switch (dtype) {
        case NiftiDatatype::kUint8:
            for (int64_t i = 0; i < n; ++i) {
                const float v = std::round(vol.data[size_t(i)]);
                payload[size_t(i)] = uint8_t(std::clamp(v, 0.0f, 255.0f));
            }
            break;
        case NiftiDatatype::kInt16:
            for (int64_t i = 0; i < n; ++i) {
                const float v = std::round(vol.data[size_t(i)]);
                put_i16(payload.data() + 2 * i, int16_t(std::clamp(v, -32768.0f, 32767.0f)));
            }
            break;
        case NiftiDatatype::kFloat32:
            for (int64_t i = 0; i < n; ++i) put_f32(payload.data() + 4 * i, vol.data[size_t(i)]);
            break;
    }
    write_image(vol.dims, vol.spacing, dtype, payload, path, raw_header);
}

void write_nifti(const SegmentationMap& seg, const std::string& path,
                 const std::vector<uint8_t>* raw_header) {
    seg.validate();
    std::vector<uint8_t> payload(seg.labels.begin(), seg.labels.end());
    write_image(seg.dims, seg.spacing, NiftiDatatype::kUint8, payload, path, raw_header);
}

}  // namespace voxseg
