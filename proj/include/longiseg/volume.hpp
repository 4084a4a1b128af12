#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace longiseg {

using Index3 = std::array<std::int64_t, 3>;
using Triple = std::array<double, 3>;

enum class Dtype { f32, f64 };

/// Regular 3D scalar grid. Data is stored x-fastest: linear index
/// x + nx*(y + ny*z). Spacing is in millimetres; origin is the physical
/// position of voxel (0,0,0). Volumes loaded from float64 files are held in
/// f32 with the source dtype recorded in `source_dtype`.
struct Volume {
    Index3 dims{0, 0, 0};
    Triple spacing{1.0, 1.0, 1.0};
    Triple origin{0.0, 0.0, 0.0};
    std::vector<float> data;
    Dtype source_dtype = Dtype::f32;

    std::int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }
    float& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[index(x, y, z)]; }
    float at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[index(x, y, z)]; }

    /// Throws DataError/ShapeError when an invariant is broken.
    void validate() const;
};

/// Integer grid over {0: background, 1: GTVp, 2: GTVn} with Volume geometry.
/// Binary masks use the {0,1} subset.
struct LabelMap {
    Index3 dims{0, 0, 0};
    Triple spacing{1.0, 1.0, 1.0};
    Triple origin{0.0, 0.0, 0.0};
    std::vector<std::uint8_t> data;

    static constexpr std::uint8_t kBackground = 0;
    static constexpr std::uint8_t kGtvp = 1;
    static constexpr std::uint8_t kGtvn = 2;

    std::int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }
    std::uint8_t& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[index(x, y, z)]; }
    std::uint8_t at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[index(x, y, z)]; }

    void validate() const;

    /// Extract the binary mask of one class (values {0,1}, same geometry).
    LabelMap class_mask(std::uint8_t cls) const;
};

/// True when dims, spacing and origin agree (spacing/origin within 1e-6 mm).
bool same_geometry(const Volume& a, const Volume& b);
bool same_geometry(const Volume& a, const LabelMap& b);
bool same_geometry(const LabelMap& a, const LabelMap& b);

enum class Timepoint { pre_rt, mid_rt };

const char* to_string(Timepoint t);
Timepoint timepoint_from_string(const std::string& s);

/// One patient timepoint. Priors, when present, live on the image grid
/// (registration happens upstream).
struct CaseRecord {
    std::string case_id;
    std::string patient_id;
    Timepoint timepoint = Timepoint::pre_rt;
    Volume image;
    std::optional<Volume> prior_image;  // registered earlier-timepoint scan
    std::optional<LabelMap> prior_gtvp;
    std::optional<LabelMap> prior_gtvn;
    std::optional<LabelMap> ground_truth;

    void validate() const;
};

}  // namespace longiseg
