#include "voxrep/nifti.hpp"

#include <zlib.h>

#include <cstddef>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace voxrep {

namespace {

struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");
static_assert(offsetof(Nifti1Header, dim) == 40);
static_assert(offsetof(Nifti1Header, pixdim) == 76);
static_assert(offsetof(Nifti1Header, vox_offset) == 108);
static_assert(offsetof(Nifti1Header, magic) == 344);

// NIfTI datatype codes.
constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_INT32 = 8;
constexpr int16_t DT_FLOAT32 = 16;
constexpr int16_t DT_FLOAT64 = 64;
constexpr int16_t DT_INT8 = 256;
constexpr int16_t DT_UINT16 = 512;

// xyzt_units time codes.
constexpr char UNITS_SEC = 8;
constexpr char UNITS_MSEC = 16;
constexpr char UNITS_USEC = 24;

void swap2(void* p) {
    auto* b = static_cast<unsigned char*>(p);
    std::swap(b[0], b[1]);
}
void swap4(void* p) {
    auto* b = static_cast<unsigned char*>(p);
    std::swap(b[0], b[3]);
    std::swap(b[1], b[2]);
}
void swap8(void* p) {
    auto* b = static_cast<unsigned char*>(p);
    std::swap(b[0], b[7]);
    std::swap(b[1], b[6]);
    std::swap(b[2], b[5]);
    std::swap(b[3], b[4]);
}

void swap_header(Nifti1Header& h) {
    swap4(&h.sizeof_hdr);
    swap4(&h.extents);
    swap2(&h.session_error);
    for (auto& d : h.dim) swap2(&d);
    swap4(&h.intent_p1);
    swap4(&h.intent_p2);
    swap4(&h.intent_p3);
    swap2(&h.intent_code);
    swap2(&h.datatype);
    swap2(&h.bitpix);
    swap2(&h.slice_start);
    for (auto& d : h.pixdim) swap4(&d);
    swap4(&h.vox_offset);
    swap4(&h.scl_slope);
    swap4(&h.scl_inter);
    swap2(&h.slice_end);
    swap4(&h.cal_max);
    swap4(&h.cal_min);
    swap4(&h.slice_duration);
    swap4(&h.toffset);
    swap4(&h.glmax);
    swap4(&h.glmin);
    swap2(&h.qform_code);
    swap2(&h.sform_code);
    swap4(&h.quatern_b);
    swap4(&h.quatern_c);
    swap4(&h.quatern_d);
    swap4(&h.qoffset_x);
    swap4(&h.qoffset_y);
    swap4(&h.qoffset_z);
    for (auto& v : h.srow_x) swap4(&v);
    for (auto& v : h.srow_y) swap4(&v);
    for (auto& v : h.srow_z) swap4(&v);
}

// gzread handles plain files transparently, so everything goes through it.
std::vector<char> slurp(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw IoError("read_nifti: cannot open " + path);
    std::vector<char> bytes;
    char buf[1 << 16];
    int got = 0;
    while ((got = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + got);
    const bool bad = got < 0;
    gzclose(f);
    if (bad) throw IoError("read_nifti: decompression failed for " + path);
    return bytes;
}

template <class T>
float fetch(const char* base, int64_t idx, bool swap) {
    T raw;
    std::memcpy(&raw, base + idx * sizeof(T), sizeof(T));
    if (swap) {
        if constexpr (sizeof(T) == 2) swap2(&raw);
        if constexpr (sizeof(T) == 4) swap4(&raw);
        if constexpr (sizeof(T) == 8) swap8(&raw);
    }
    return static_cast<float>(raw);
}

}  // namespace

NiftiVolume read_nifti(const std::string& path) {
    std::vector<char> bytes = slurp(path);
    if (bytes.size() < 348) throw FormatError("read_nifti: file shorter than a NIfTI-1 header");

    Nifti1Header h;
    std::memcpy(&h, bytes.data(), sizeof(h));
    const bool single_file = std::memcmp(h.magic, "n+1", 4) == 0;
    const bool header_pair = std::memcmp(h.magic, "ni1", 4) == 0;
    if (!single_file && !header_pair)
        throw FormatError("read_nifti: bad magic in " + path + " (expected \"n+1\" or \"ni1\")");

    bool swap = false;
    if (h.dim[0] < 1 || h.dim[0] > 7) {
        swap = true;
        swap_header(h);
    }
    if (h.sizeof_hdr != 348)
        throw FormatError("read_nifti: sizeof_hdr is not 348 in " + path);
    if (h.dim[0] > 4)
        throw FormatError("read_nifti: unsupported dim count " + std::to_string(h.dim[0]) +
                          " (only 3-d or 4-d volumes)");

    int64_t nx = std::max<int16_t>(h.dim[1], 1);
    int64_t ny = h.dim[0] >= 2 ? std::max<int16_t>(h.dim[2], 1) : 1;
    int64_t nz = h.dim[0] >= 3 ? std::max<int16_t>(h.dim[3], 1) : 1;
    int64_t nt = h.dim[0] >= 4 ? std::max<int16_t>(h.dim[4], 1) : 1;

    int item = 0;
    switch (h.datatype) {
        case DT_UINT8:
        case DT_INT8: item = 1; break;
        case DT_INT16:
        case DT_UINT16: item = 2; break;
        case DT_INT32:
        case DT_FLOAT32: item = 4; break;
        case DT_FLOAT64: item = 8; break;
        default:
            throw FormatError("read_nifti: unsupported datatype code " +
                              std::to_string(h.datatype) + " in " + path);
    }

    std::vector<char> payload;
    const char* raw = nullptr;
    const int64_t count = nx * ny * nz * nt;
    if (single_file) {
        int64_t offset = static_cast<int64_t>(h.vox_offset);
        if (offset < 348) offset = 352;
        if (static_cast<int64_t>(bytes.size()) < offset + count * item)
            throw FormatError("read_nifti: truncated data in " + path);
        raw = bytes.data() + offset;
    } else {
        // "ni1" pair: the payload lives in the sibling .img.
        std::filesystem::path img(path);
        img.replace_extension(".img");
        payload = slurp(img.string());
        if (static_cast<int64_t>(payload.size()) < count * item)
            throw FormatError("read_nifti: truncated .img payload for " + path);
        raw = payload.data();
    }

    const bool scale = h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);

    NiftiVolume out;
    out.data = TensorF({nt, nx, ny, nz});
    // Disk order: x fastest, then y, z, t.
    for (int64_t t = 0; t < nt; ++t)
        for (int64_t z = 0; z < nz; ++z)
            for (int64_t y = 0; y < ny; ++y)
                for (int64_t x = 0; x < nx; ++x) {
                    const int64_t src = x + nx * (y + ny * (z + nz * t));
                    float v = 0;
                    switch (h.datatype) {
                        case DT_UINT8: v = fetch<uint8_t>(raw, src, false); break;
                        case DT_INT8: v = fetch<int8_t>(raw, src, false); break;
                        case DT_INT16: v = fetch<int16_t>(raw, src, swap); break;
                        case DT_UINT16: v = fetch<uint16_t>(raw, src, swap); break;
                        case DT_INT32: v = fetch<int32_t>(raw, src, swap); break;
                        case DT_FLOAT32: v = fetch<float>(raw, src, swap); break;
                        case DT_FLOAT64: v = fetch<double>(raw, src, swap); break;
                    }
                    if (scale) v = h.scl_slope * v + h.scl_inter;
                    if (std::isnan(v) || std::isinf(v))
                        throw DataError("read_nifti: non-finite voxel at (t=" +
                                        std::to_string(t) + ", x=" + std::to_string(x) + ", y=" +
                                        std::to_string(y) + ", z=" + std::to_string(z) + ") in " +
                                        path);
                    out.data.v[((t * nx + x) * ny + y) * nz + z] = v;
                }

    out.tr_seconds = h.pixdim[4];
    const char tcode = h.xyzt_units & 0x38;
    if (tcode == UNITS_MSEC) out.tr_seconds *= 1e-3f;
    if (tcode == UNITS_USEC) out.tr_seconds *= 1e-6f;
    if (!(out.tr_seconds > 0)) out.tr_seconds = 1.0f;
    return out;
}

void write_nifti(const std::string& path, const TensorF& data, float tr_seconds) {
    if (data.rank() != 4)
        throw ShapeError("write_nifti: expected [T,X,Y,Z], got " + shape_str(data.shape));
    const int64_t nt = data.shape[0], nx = data.shape[1], ny = data.shape[2],
                  nz = data.shape[3];
    if (nx > 32767 || ny > 32767 || nz > 32767 || nt > 32767)
        throw ArgumentError("write_nifti: dim exceeds int16 range");

    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = nt > 1 ? 4 : 3;
    h.dim[1] = static_cast<int16_t>(nx);
    h.dim[2] = static_cast<int16_t>(ny);
    h.dim[3] = static_cast<int16_t>(nz);
    h.dim[4] = static_cast<int16_t>(nt > 1 ? nt : 1);
    for (int i = h.dim[0] + 1; i < 8; ++i) h.dim[i] = 1;
    h.datatype = DT_FLOAT32;
    h.bitpix = 32;
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = h.pixdim[2] = h.pixdim[3] = 1.0f;
    h.pixdim[4] = tr_seconds;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2 | UNITS_SEC;  // mm, sec
    std::strncpy(h.descrip, "voxrep", sizeof(h.descrip) - 1);
    h.sform_code = 0;
    h.qform_code = 0;
    std::memcpy(h.magic, "n+1", 4);

    // Reorder [T,X,Y,Z] (z fastest) to disk order (x fastest).
    std::vector<float> disk(static_cast<size_t>(data.numel()));
    for (int64_t t = 0; t < nt; ++t)
        for (int64_t x = 0; x < nx; ++x)
            for (int64_t y = 0; y < ny; ++y)
                for (int64_t z = 0; z < nz; ++z)
                    disk[x + nx * (y + ny * (z + nz * t))] =
                        data.v[((t * nx + x) * ny + y) * nz + z];

    const char pad[4] = {0, 0, 0, 0};
    const bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
    if (gz) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw IoError("write_nifti: cannot open " + path);
        bool ok = gzwrite(f, &h, sizeof(h)) == sizeof(h) && gzwrite(f, pad, 4) == 4;
        const int64_t bytes = static_cast<int64_t>(disk.size() * sizeof(float));
        ok = ok && gzwrite(f, disk.data(), static_cast<unsigned>(bytes)) == bytes;
        gzclose(f);
        if (!ok) throw IoError("write_nifti: write failed for " + path);
    } else {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("write_nifti: cannot open " + path);
        os.write(reinterpret_cast<const char*>(&h), sizeof(h));
        os.write(pad, 4);
        os.write(reinterpret_cast<const char*>(disk.data()),
                 static_cast<std::streamsize>(disk.size() * sizeof(float)));
        if (!os) throw IoError("write_nifti: write failed for " + path);
    }
}

}  // namespace voxrep
