#include "longiseg/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <utility>
#include <vector>

#include "longiseg/error.hpp"

namespace longiseg {

static_assert(std::endian::native == std::endian::little,
              "NIfTI I/O assumes a little-endian host");

namespace {

// NIfTI-1 header, 348 bytes. Field layout is naturally aligned, so a plain
// struct reproduces the on-disk offsets exactly; the static_asserts below
// pin that down.
struct Nifti1Header {
    int32_t sizeof_hdr;     // must be 348
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];          // dim[0] = rank, dim[1..] = extents
    float intent_p1;
    float intent_p2;
    float intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];         // pixdim[1..3] = spacing (mm)
    float vox_offset;        // byte offset of voxel data
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max;
    float cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax;
    int32_t glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b;
    float quatern_c;
    float quatern_d;
    float qoffset_x;
    float qoffset_y;
    float qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];           // "n+1\0" single file, "ni1\0" hdr/img pair
};

static_assert(sizeof(Nifti1Header) == 348);
static_assert(offsetof(Nifti1Header, dim) == 40);
static_assert(offsetof(Nifti1Header, datatype) == 70);
static_assert(offsetof(Nifti1Header, bitpix) == 72);
static_assert(offsetof(Nifti1Header, pixdim) == 76);
static_assert(offsetof(Nifti1Header, vox_offset) == 108);
static_assert(offsetof(Nifti1Header, scl_slope) == 112);
static_assert(offsetof(Nifti1Header, qform_code) == 252);
static_assert(offsetof(Nifti1Header, qoffset_x) == 268);
static_assert(offsetof(Nifti1Header, srow_x) == 280);
static_assert(offsetof(Nifti1Header, magic) == 344);

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;

int bytes_per_voxel(int16_t datatype) {
    switch (datatype) {
        case kDtUint8: return 1;
        case kDtInt16: return 2;
        case kDtFloat32: return 4;
        case kDtFloat64: return 8;
        default: return 0;
    }
}

std::function<void(const std::string&)>& warning_handler() {
    static std::function<void(const std::string&)> handler =
        [](const std::string& msg) { std::fprintf(stderr, "warning: %s\n", msg.c_str()); };
    return handler;
}

void warn(const std::string& msg) { warning_handler()(msg); }

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::streamoff>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<size_t>(size));
    if (size > 0)
        in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in)
        throw IoError("read failed for " + path);
    return bytes;
}

Nifti1Header parse_header(const std::vector<unsigned char>& bytes, const std::string& path) {
    if (bytes.size() < sizeof(Nifti1Header))
        throw FormatError(path + ": file smaller than the 348-byte NIfTI-1 header");
    Nifti1Header h;
    std::memcpy(&h, bytes.data(), sizeof(h));

    if (h.sizeof_hdr != 348) {
        int32_t swapped;
        unsigned char raw[4];
        std::memcpy(raw, &h.sizeof_hdr, 4);
        std::swap(raw[0], raw[3]);
        std::swap(raw[1], raw[2]);
        std::memcpy(&swapped, raw, 4);
        if (swapped == 348)
            throw UnsupportedError(path + ": big-endian NIfTI files are not supported");
        throw FormatError(path + ": sizeof_hdr is " + std::to_string(h.sizeof_hdr) +
                          ", expected 348");
    }

    const bool single = std::memcmp(h.magic, "n+1", 4) == 0;
    const bool pair = std::memcmp(h.magic, "ni1", 4) == 0;
    if (!single && !pair)
        throw FormatError(path + ": magic is not \"n+1\" or \"ni1\"");

    if (bytes_per_voxel(h.datatype) == 0)
        throw UnsupportedError(path + ": datatype code " + std::to_string(h.datatype) +
                               " (supported: uint8, int16, float32, float64)");
    if (h.bitpix != 8 * bytes_per_voxel(h.datatype))
        throw FormatError(path + ": bitpix " + std::to_string(h.bitpix) +
                          " does not match datatype code " + std::to_string(h.datatype));

    if (h.dim[0] != 3 && h.dim[0] != 4)
        throw UnsupportedError(path + ": dim[0] is " + std::to_string(h.dim[0]) +
                               ", only 3-D (or 4-D with a singleton 4th axis) is supported");
    if (h.dim[0] == 4 && h.dim[4] != 1)
        throw UnsupportedError(path + ": dim[4] is " + std::to_string(h.dim[4]) +
                               ", only a singleton 4th axis is supported");
    for (int i = 1; i <= 3; ++i)
        if (h.dim[i] < 1)
            throw FormatError(path + ": dim[" + std::to_string(i) + "] is " +
                              std::to_string(h.dim[i]) + ", expected >= 1");
    for (int i = 1; i <= 3; ++i)
        if (!(h.pixdim[i] > 0.0f) || !std::isfinite(h.pixdim[i]))
            throw FormatError(path + ": pixdim[" + std::to_string(i) + "] is not a positive finite value");

    if (!std::isfinite(h.vox_offset) || h.vox_offset != std::floor(h.vox_offset))
        throw FormatError(path + ": vox_offset is not an integral value");
    const auto offset = static_cast<int64_t>(h.vox_offset);
    if (single && offset < 348)
        throw FormatError(path + ": vox_offset " + std::to_string(offset) +
                          " overlaps the header");
    if (!single && offset < 0)
        throw FormatError(path + ": vox_offset is negative");

    if (!std::isfinite(h.scl_slope) || !std::isfinite(h.scl_inter))
        throw FormatError(path + ": scl_slope/scl_inter are not finite");

    return h;
}

// The pipeline honors only pixdim spacing and the qoffset origin; any
// rotation in the stored affine would be silently dropped, so flag it.
void check_axis_aligned(const Nifti1Header& h, const std::string& path) {
    constexpr float kTol = 1e-5f;
    if (h.qform_code > 0 &&
        (std::fabs(h.quatern_b) > kTol || std::fabs(h.quatern_c) > kTol ||
         std::fabs(h.quatern_d) > kTol)) {
        warn(path + ": qform rotation is not axis-aligned and will be ignored");
        return;
    }
    if (h.sform_code > 0) {
        const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                if (r != c && std::fabs(rows[r][c]) > kTol) {
                    warn(path + ": sform affine is not axis-aligned and will be ignored");
                    return;
                }
    }
}

struct RawImage {
    Nifti1Header header;
    Index3 dims;
    Triple spacing;
    Triple origin;
    std::vector<double> values;  // after scl scaling, in x-fastest order
};

RawImage load_raw(const std::string& path) {
    const auto header_bytes = read_file_bytes(path);
    const Nifti1Header h = parse_header(header_bytes, path);
    check_axis_aligned(h, path);

    const bool single = std::memcmp(h.magic, "n+1", 4) == 0;
    const auto offset = static_cast<size_t>(h.vox_offset);
    const int64_t nvox = int64_t{h.dim[1]} * h.dim[2] * h.dim[3];
    const size_t payload = static_cast<size_t>(nvox) * static_cast<size_t>(bytes_per_voxel(h.datatype));

    std::vector<unsigned char> data_bytes;
    std::string data_path = path;
    if (single) {
        data_bytes = header_bytes;
    } else {
        // hdr/img pair: voxel data lives in the sibling .img file.
        data_path = std::filesystem::path(path).replace_extension(".img").string();
        data_bytes = read_file_bytes(data_path);
    }
    if (data_bytes.size() != offset + payload)
        throw FormatError(data_path + ": file size " + std::to_string(data_bytes.size()) +
                          " does not match vox_offset " + std::to_string(offset) +
                          " + data size " + std::to_string(payload));

    const unsigned char* p = data_bytes.data() + offset;
    // slope == 0 means "no scaling" by convention, and an identity transform
    // must be a true no-op: 1.0 * v + 0.0 would quietly drop the sign of a
    // negative zero and break bit-exact float round trips.
    const bool scaled = h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
    const double slope = scaled ? static_cast<double>(h.scl_slope) : 1.0;
    const double inter = scaled ? static_cast<double>(h.scl_inter) : 0.0;

    std::vector<double> values(static_cast<size_t>(nvox));
    for (int64_t i = 0; i < nvox; ++i) {
        double v = 0.0;
        switch (h.datatype) {
            case kDtUint8:
                v = static_cast<double>(p[i]);
                break;
            case kDtInt16: {
                int16_t s;
                std::memcpy(&s, p + 2 * i, 2);
                v = static_cast<double>(s);
                break;
            }
            case kDtFloat32: {
                float f;
                std::memcpy(&f, p + 4 * i, 4);
                v = static_cast<double>(f);
                break;
            }
            case kDtFloat64: {
                double d;
                std::memcpy(&d, p + 8 * i, 8);
                v = d;
                break;
            }
        }
        values[static_cast<size_t>(i)] = scaled ? slope * v + inter : v;
    }

    RawImage raw;
    raw.header = h;
    raw.dims = {int64_t{h.dim[1]}, int64_t{h.dim[2]}, int64_t{h.dim[3]}};
    raw.spacing = {static_cast<double>(h.pixdim[1]), static_cast<double>(h.pixdim[2]),
                   static_cast<double>(h.pixdim[3])};
    raw.origin = {static_cast<double>(h.qoffset_x), static_cast<double>(h.qoffset_y),
                  static_cast<double>(h.qoffset_z)};
    raw.values = std::move(values);
    return raw;
}

Volume raw_to_volume(const RawImage& raw, const std::string& path) {
    Volume v;
    v.dims = raw.dims;
    v.spacing = raw.spacing;
    v.origin = raw.origin;
    v.source_dtype = raw.header.datatype == kDtFloat64 ? Dtype::f64 : Dtype::f32;
    v.data.resize(raw.values.size());
    for (size_t i = 0; i < raw.values.size(); ++i) {
        if (!std::isfinite(raw.values[i]))
            throw DataError(path + ": non-finite voxel value at linear index " + std::to_string(i));
        v.data[i] = static_cast<float>(raw.values[i]);
    }
    return v;
}

LabelMap raw_to_labelmap(const RawImage& raw, const std::string& path) {
    LabelMap m;
    m.dims = raw.dims;
    m.spacing = raw.spacing;
    m.origin = raw.origin;
    m.data.resize(raw.values.size());
    for (size_t i = 0; i < raw.values.size(); ++i) {
        const double v = raw.values[i];
        if (v != 0.0 && v != 1.0 && v != 2.0)
            throw DataError(path + ": label value " + std::to_string(v) +
                            " at linear index " + std::to_string(i) +
                            " is outside {0, 1, 2}");
        m.data[i] = static_cast<uint8_t>(v);
    }
    return m;
}

bool is_exact_labels(const RawImage& raw) {
    for (const double v : raw.values)
        if (v != 0.0 && v != 1.0 && v != 2.0)
            return false;
    return true;
}

void write_nifti_impl(const Index3& dims, const Triple& spacing, const Triple& origin,
                      int16_t datatype, const void* data, size_t data_bytes,
                      const std::string& path) {
    for (int i = 0; i < 3; ++i)
        if (dims[static_cast<size_t>(i)] > 32767)
            throw DataError(path + ": dimension " + std::to_string(dims[static_cast<size_t>(i)]) +
                            " exceeds the NIfTI-1 int16 limit");

    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(dims[0]);
    h.dim[2] = static_cast<int16_t>(dims[1]);
    h.dim[3] = static_cast<int16_t>(dims[2]);
    for (int i = 4; i < 8; ++i)
        h.dim[i] = 1;
    h.datatype = datatype;
    h.bitpix = static_cast<int16_t>(8 * bytes_per_voxel(datatype));
    h.pixdim[0] = 1.0f;  // qfac
    h.pixdim[1] = static_cast<float>(spacing[0]);
    h.pixdim[2] = static_cast<float>(spacing[1]);
    h.pixdim[3] = static_cast<float>(spacing[2]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // millimetres
    h.qform_code = 1;  // identity quaternion, axis-aligned grid
    h.quatern_b = h.quatern_c = h.quatern_d = 0.0f;
    h.qoffset_x = static_cast<float>(origin[0]);
    h.qoffset_y = static_cast<float>(origin[1]);
    h.qoffset_z = static_cast<float>(origin[2]);
    std::memcpy(h.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char extender[4] = {0, 0, 0, 0};  // pads the header to vox_offset 352
    out.write(extender, 4);
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(data_bytes));
    out.flush();
    if (!out)
        throw IoError("write failed for " + path);
}

}  // namespace

std::variant<Volume, LabelMap> read_nifti(const std::string& path) {
    const RawImage raw = load_raw(path);
    const bool integer_typed =
        raw.header.datatype == kDtUint8 || raw.header.datatype == kDtInt16;
    if (integer_typed && is_exact_labels(raw))
        return raw_to_labelmap(raw, path);
    return raw_to_volume(raw, path);
}

Volume read_volume(const std::string& path) {
    return raw_to_volume(load_raw(path), path);
}

LabelMap read_labelmap(const std::string& path) {
    return raw_to_labelmap(load_raw(path), path);
}

void write_nifti(const Volume& v, const std::string& path) {
    v.validate();
    write_nifti_impl(v.dims, v.spacing, v.origin, kDtFloat32, v.data.data(),
                     v.data.size() * sizeof(float), path);
}

void write_nifti(const LabelMap& m, const std::string& path) {
    m.validate();
    write_nifti_impl(m.dims, m.spacing, m.origin, kDtUint8, m.data.data(), m.data.size(), path);
}

NiftiInfo read_nifti_info(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    const Nifti1Header h = parse_header(bytes, path);
    NiftiInfo info;
    info.dims = {int64_t{h.dim[1]}, int64_t{h.dim[2]}, int64_t{h.dim[3]}};
    info.spacing = {static_cast<double>(h.pixdim[1]), static_cast<double>(h.pixdim[2]),
                    static_cast<double>(h.pixdim[3])};
    info.origin = {static_cast<double>(h.qoffset_x), static_cast<double>(h.qoffset_y),
                   static_cast<double>(h.qoffset_z)};
    info.datatype = h.datatype;
    return info;
}

void set_nifti_warning_handler(std::function<void(const std::string&)> handler) {
    if (handler)
        warning_handler() = std::move(handler);
    else
        warning_handler() = [](const std::string& msg) {
            std::fprintf(stderr, "warning: %s\n", msg.c_str());
        };
}

}  // namespace longiseg
