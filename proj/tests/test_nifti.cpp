#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "longiseg/error.hpp"
#include "longiseg/nifti.hpp"
#include "longiseg/volume.hpp"
#include "testutil.hpp"

using namespace longiseg;

namespace {

// Hand-built NIfTI-1 bytes with every field placed at its offset from the
// format definition. This is deliberately independent of the production
// header struct so it cross-checks the layout.
struct HeaderBuilder {
    std::vector<unsigned char> bytes = std::vector<unsigned char>(352, 0);

    template <typename T>
    void put(size_t offset, T value) {
        std::memcpy(bytes.data() + offset, &value, sizeof(T));
    }
    void put_magic(const char* m) { std::memcpy(bytes.data() + 344, m, 4); }

    static HeaderBuilder valid(int16_t nx, int16_t ny, int16_t nz, int16_t datatype,
                               int16_t bitpix) {
        HeaderBuilder b;
        b.put<int32_t>(0, 348);                                   // sizeof_hdr
        b.put<int16_t>(40, 3);                                    // dim[0]
        b.put<int16_t>(42, nx);                                   // dim[1]
        b.put<int16_t>(44, ny);
        b.put<int16_t>(46, nz);
        for (size_t o = 48; o <= 54; o += 2) b.put<int16_t>(o, 1);  // dim[4..7]
        b.put<int16_t>(70, datatype);
        b.put<int16_t>(72, bitpix);
        b.put<float>(80, 1.0f);                                   // pixdim[1]
        b.put<float>(84, 1.0f);
        b.put<float>(88, 1.0f);
        b.put<float>(108, 352.0f);                                // vox_offset
        b.put<float>(112, 1.0f);                                  // scl_slope
        b.put_magic("n+1");
        return b;
    }

    void write(const std::string& path, const std::vector<unsigned char>& payload) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        out.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
    }
};

std::vector<unsigned char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

std::vector<unsigned char> f32_payload(const std::vector<float>& values) {
    std::vector<unsigned char> raw(values.size() * 4);
    std::memcpy(raw.data(), values.data(), raw.size());
    return raw;
}

}  // namespace

TEST_CASE("hand-built zero volume reads back with its geometry") {
    testutil::TempDir tmp("nifti_golden");
    auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
    b.put<float>(80, 1.0f);
    b.put<float>(268, 10.0f);  // qoffset_x
    b.put<float>(272, -5.0f);
    b.put<float>(276, 2.5f);
    const auto path = tmp.file("zero.nii");
    b.write(path, std::vector<unsigned char>(4 * 4 * 4 * 4, 0));

    Volume v = read_volume(path);
    CHECK(v.dims == Index3{4, 4, 4});
    CHECK(v.spacing == Triple{1.0, 1.0, 1.0});
    CHECK(v.origin[0] == doctest::Approx(10.0));
    CHECK(v.origin[1] == doctest::Approx(-5.0));
    CHECK(v.origin[2] == doctest::Approx(2.5));
    for (float x : v.data) CHECK(x == 0.0f);

    NiftiInfo info = read_nifti_info(path);
    CHECK(info.dims == Index3{4, 4, 4});
    CHECK(info.datatype == 16);
}

TEST_CASE("write/read round-trip is bitwise for random volumes") {
    testutil::TempDir tmp("nifti_roundtrip");
    auto g = testutil::rng(7);
    for (int iter = 0; iter < 100; ++iter) {
        Volume v;
        v.dims = {int64_t(2 + iter % 5), int64_t(3 + iter % 3), int64_t(2 + iter % 4)};
        v.spacing = {0.5 + 0.25 * (iter % 4), 1.0, 2.0};
        v.origin = {-12.5, 3.25, double(iter)};
        v.data = testutil::random_floats(g, size_t(v.voxel_count()), -100.0f, 100.0f);

        const auto path = tmp.file("vol.nii");
        write_nifti(v, path);
        Volume r = read_volume(path);
        CHECK(r.dims == v.dims);
        CHECK(r.data == v.data);  // bitwise
        for (int i = 0; i < 3; ++i) {
            CHECK(float(r.spacing[i]) == float(v.spacing[i]));
            CHECK(float(r.origin[i]) == float(v.origin[i]));
        }
    }
}

TEST_CASE("volume files use datatype float32, labels uint8") {
    testutil::TempDir tmp("nifti_dtypes");

    Volume v;
    v.dims = {2, 2, 2};
    v.data.assign(8, 1.5f);
    const auto vpath = tmp.file("v.nii");
    write_nifti(v, vpath);
    auto vb = file_bytes(vpath);
    REQUIRE(vb.size() == 352 + 8 * 4);
    int16_t dtype;
    std::memcpy(&dtype, vb.data() + 70, 2);
    CHECK(dtype == 16);
    float vox_offset;
    std::memcpy(&vox_offset, vb.data() + 108, 4);
    CHECK(vox_offset == 352.0f);
    CHECK(std::memcmp(vb.data() + 344, "n+1", 4) == 0);

    LabelMap m;
    m.dims = {2, 2, 2};
    m.data = {0, 1, 2, 0, 1, 2, 2, 1};
    const auto mpath = tmp.file("m.nii");
    write_nifti(m, mpath);
    auto mb = file_bytes(mpath);
    REQUIRE(mb.size() == 352 + 8);
    std::memcpy(&dtype, mb.data() + 70, 2);
    CHECK(dtype == 2);

    // Round trip and automatic LabelMap detection for integer files.
    auto loaded = read_nifti(mpath);
    REQUIRE(std::holds_alternative<LabelMap>(loaded));
    CHECK(std::get<LabelMap>(loaded).data == m.data);

    auto vloaded = read_nifti(vpath);
    CHECK(std::holds_alternative<Volume>(vloaded));
}

TEST_CASE("scl_slope and scl_inter are applied when slope is nonzero") {
    testutil::TempDir tmp("nifti_scl");
    auto b = HeaderBuilder::valid(2, 1, 1, 4, 16);  // int16
    b.put<float>(112, 0.5f);   // scl_slope
    b.put<float>(116, 10.0f);  // scl_inter
    std::vector<unsigned char> payload(4);
    int16_t vals[2] = {4, -2};
    std::memcpy(payload.data(), vals, 4);
    const auto path = tmp.file("scaled.nii");
    b.write(path, payload);

    Volume v = read_volume(path);
    CHECK(v.data[0] == 12.0f);  // 0.5*4 + 10
    CHECK(v.data[1] == 9.0f);   // 0.5*-2 + 10

    // slope == 0 means "no scaling", not "multiply by zero".
    b.put<float>(112, 0.0f);
    b.put<float>(116, 99.0f);
    b.write(path, payload);
    v = read_volume(path);
    CHECK(v.data[0] == 4.0f);
    CHECK(v.data[1] == -2.0f);
}

TEST_CASE("identity scaling is a true no-op, signed zeros included") {
    // 1.0 * v + 0.0 would turn -0.0 into +0.0; the reader must not apply an
    // identity transform at all, or float payloads stop being bit-stable.
    testutil::TempDir tmp("nifti_negzero");
    Volume v;
    v.dims = {2, 2, 1};
    v.data = {-0.0f, 0.0f, 1e-39f, -3.0e38f};
    const auto path = tmp.file("zeros.nii");
    write_nifti(v, path);
    const Volume r = read_volume(path);
    REQUIRE(r.data.size() == v.data.size());
    for (size_t i = 0; i < v.data.size(); ++i)
        CHECK(std::bit_cast<uint32_t>(r.data[i]) == std::bit_cast<uint32_t>(v.data[i]));
}

TEST_CASE("malformed headers are rejected with the offending field named") {
    testutil::TempDir tmp("nifti_bad");
    const auto path = tmp.file("bad.nii");
    const std::vector<unsigned char> payload(4 * 4 * 4 * 4, 0);

    auto expect_throw = [&](HeaderBuilder& b, const char* substr, auto&& exc_tag) {
        using Exc = std::decay_t<decltype(exc_tag)>;
        b.write(path, payload);
        CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains(substr), Exc);
    };

    SUBCASE("corrupted magic") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put_magic("abc");
        expect_throw(b, "magic", FormatError{""});
    }
    SUBCASE("wrong sizeof_hdr") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<int32_t>(0, 340);
        expect_throw(b, "sizeof_hdr", FormatError{""});
    }
    SUBCASE("big-endian file") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<int32_t>(0, 0x5C010000);  // 348 byte-swapped
        b.write(path, payload);
        CHECK_THROWS_AS(read_volume(path), UnsupportedError);
    }
    SUBCASE("unsupported datatype") {
        auto b = HeaderBuilder::valid(4, 4, 4, 8, 32);  // int32 unsupported
        b.write(path, payload);
        CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("datatype"), UnsupportedError);
    }
    SUBCASE("bitpix disagrees with datatype") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 16);
        expect_throw(b, "bitpix", FormatError{""});
    }
    SUBCASE("unsupported rank") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<int16_t>(40, 2);
        b.write(path, payload);
        CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("dim[0]"), UnsupportedError);
    }
    SUBCASE("4d with non-singleton 4th axis") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<int16_t>(40, 4);
        b.put<int16_t>(48, 2);  // dim[4]
        b.write(path, payload);
        CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("dim[4]"), UnsupportedError);
    }
    SUBCASE("4d with singleton 4th axis is fine") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<int16_t>(40, 4);
        b.write(path, payload);
        CHECK(read_volume(path).dims == Index3{4, 4, 4});
    }
    SUBCASE("non-positive pixdim") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<float>(84, 0.0f);
        expect_throw(b, "pixdim[2]", FormatError{""});
    }
    SUBCASE("vox_offset inside the header") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        b.put<float>(108, 347.0f);
        expect_throw(b, "vox_offset", FormatError{""});
    }
    SUBCASE("zero dimension") {
        auto b = HeaderBuilder::valid(4, 0, 4, 16, 32);
        expect_throw(b, "dim[2]", FormatError{""});
    }
    SUBCASE("truncated file") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        auto short_payload = payload;
        short_payload.pop_back();
        b.write(path, short_payload);
        CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("size"), FormatError);
    }
    SUBCASE("trailing bytes") {
        auto b = HeaderBuilder::valid(4, 4, 4, 16, 32);
        auto long_payload = payload;
        long_payload.push_back(0);
        b.write(path, long_payload);
        CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("size"), FormatError);
    }
    SUBCASE("header shorter than 348 bytes") {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write("junk", 4);
        out.close();
        CHECK_THROWS_AS(read_volume(path), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(read_volume(tmp.file("nope.nii")), IoError);
    }
}

TEST_CASE("non-finite voxels surface as data errors") {
    testutil::TempDir tmp("nifti_nonfinite");
    auto b = HeaderBuilder::valid(2, 1, 1, 16, 32);
    const auto path = tmp.file("inf.nii");
    b.write(path, f32_payload({1.0f, std::numeric_limits<float>::infinity()}));
    CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("non-finite"), DataError);
}

TEST_CASE("label loading rules") {
    testutil::TempDir tmp("nifti_labels");

    SUBCASE("integer file with a value above 2 is rejected, not clamped") {
        auto b = HeaderBuilder::valid(4, 1, 1, 2, 8);  // uint8
        const auto path = tmp.file("labels3.nii");
        b.write(path, {0, 1, 2, 3});
        CHECK_THROWS_WITH_AS(read_labelmap(path), doctest::Contains("outside {0, 1, 2}"),
                             DataError);
        // read_nifti falls back to Volume for the same file.
        auto loaded = read_nifti(path);
        CHECK(std::holds_alternative<Volume>(loaded));
    }
    SUBCASE("binary mask with values {0,1} loads as labels") {
        auto b = HeaderBuilder::valid(4, 1, 1, 2, 8);
        const auto path = tmp.file("binary.nii");
        b.write(path, {0, 1, 1, 0});
        LabelMap m = read_labelmap(path);
        CHECK(m.data == std::vector<uint8_t>{0, 1, 1, 0});
        auto loaded = read_nifti(path);
        CHECK(std::holds_alternative<LabelMap>(loaded));
    }
    SUBCASE("float file with exact label values reads as labels only on request") {
        auto b = HeaderBuilder::valid(4, 1, 1, 16, 32);
        const auto path = tmp.file("float_mask.nii");
        b.write(path, f32_payload({0.0f, 1.0f, 2.0f, 1.0f}));
        auto loaded = read_nifti(path);
        CHECK(std::holds_alternative<Volume>(loaded));
        LabelMap m = read_labelmap(path);
        CHECK(m.data == std::vector<uint8_t>{0, 1, 2, 1});
    }
    SUBCASE("fractional values cannot be labels") {
        auto b = HeaderBuilder::valid(2, 1, 1, 16, 32);
        const auto path = tmp.file("frac.nii");
        b.write(path, f32_payload({0.0f, 0.5f}));
        CHECK_THROWS_AS(read_labelmap(path), DataError);
    }
}

TEST_CASE("non-axis-aligned affine warns and is otherwise ignored") {
    testutil::TempDir tmp("nifti_warn");
    std::vector<std::string> warnings;
    set_nifti_warning_handler([&](const std::string& w) { warnings.push_back(w); });

    auto b = HeaderBuilder::valid(2, 2, 2, 16, 32);
    b.put<int16_t>(252, 1);      // qform_code
    b.put<float>(256, 0.3827f);  // quatern_b: 45 degree rotation
    const auto path = tmp.file("rotated.nii");
    b.write(path, f32_payload(std::vector<float>(8, 1.0f)));

    Volume v = read_volume(path);
    CHECK(v.dims == Index3{2, 2, 2});
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("axis-aligned") != std::string::npos);

    // Axis-aligned qform does not warn.
    warnings.clear();
    b.put<float>(256, 0.0f);
    b.write(path, f32_payload(std::vector<float>(8, 1.0f)));
    read_volume(path);
    CHECK(warnings.empty());

    // Off-diagonal sform warns.
    b.put<int16_t>(254, 2);     // sform_code
    b.put<float>(280, 1.0f);    // srow_x[0]
    b.put<float>(284, 0.2f);    // srow_x[1] — shear
    b.put<float>(300, 1.0f);    // srow_y[1]
    b.put<float>(320, 1.0f);    // srow_z[2]
    b.write(path, f32_payload(std::vector<float>(8, 1.0f)));
    read_volume(path);
    CHECK(warnings.size() == 1);

    set_nifti_warning_handler(nullptr);  // restore default
}

TEST_CASE("hdr/img pairs are readable") {
    testutil::TempDir tmp("nifti_pair");
    auto b = HeaderBuilder::valid(2, 1, 1, 16, 32);
    b.put_magic("ni1");
    b.put<float>(108, 0.0f);  // data starts at offset 0 of the .img file

    const auto hdr = tmp.file("pair.hdr");
    {
        std::ofstream out(hdr, std::ios::binary);
        out.write(reinterpret_cast<const char*>(b.bytes.data()), 348);
    }
    {
        std::ofstream out(tmp.file("pair.img"), std::ios::binary);
        float vals[2] = {3.0f, -4.0f};
        out.write(reinterpret_cast<const char*>(vals), 8);
    }
    Volume v = read_volume(hdr);
    CHECK(v.data == std::vector<float>{3.0f, -4.0f});
}
