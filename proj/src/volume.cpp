#include "longiseg/volume.hpp"

#include <cmath>
#include <cstdlib>

#include "longiseg/error.hpp"

namespace longiseg {

namespace {

bool close3(const Triple& a, const Triple& b) {
    for (int i = 0; i < 3; ++i)
        if (std::abs(a[i] - b[i]) > 1e-6) return false;
    return true;
}

void check_geometry_fields(const Index3& dims, const Triple& spacing, std::size_t data_len,
                           const char* what) {
    for (int i = 0; i < 3; ++i) {
        if (dims[i] <= 0) throw ShapeError(std::string(what) + ": non-positive dimension");
        if (!(spacing[i] > 0.0) || !std::isfinite(spacing[i]))
            throw DataError(std::string(what) + ": spacing must be strictly positive and finite");
    }
    const auto expected = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    if (data_len != expected)
        throw ShapeError(std::string(what) + ": data length " + std::to_string(data_len) +
                         " does not match dims product " + std::to_string(expected));
}

}  // namespace

void Volume::validate() const {
    check_geometry_fields(dims, spacing, data.size(), "Volume");
    for (float v : data)
        if (!std::isfinite(v)) throw DataError("Volume: non-finite voxel value");
}

void LabelMap::validate() const {
    check_geometry_fields(dims, spacing, data.size(), "LabelMap");
    for (std::uint8_t v : data)
        if (v > 2) throw DataError("LabelMap: label value " + std::to_string(v) + " outside {0,1,2}");
}

LabelMap LabelMap::class_mask(std::uint8_t cls) const {
    LabelMap out;
    out.dims = dims;
    out.spacing = spacing;
    out.origin = origin;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = data[i] == cls ? 1 : 0;
    return out;
}

bool same_geometry(const Volume& a, const Volume& b) {
    return a.dims == b.dims && close3(a.spacing, b.spacing) && close3(a.origin, b.origin);
}

bool same_geometry(const Volume& a, const LabelMap& b) {
    return a.dims == b.dims && close3(a.spacing, b.spacing) && close3(a.origin, b.origin);
}

bool same_geometry(const LabelMap& a, const LabelMap& b) {
    return a.dims == b.dims && close3(a.spacing, b.spacing) && close3(a.origin, b.origin);
}

const char* to_string(Timepoint t) { return t == Timepoint::pre_rt ? "pre-RT" : "mid-RT"; }

Timepoint timepoint_from_string(const std::string& s) {
    if (s == "pre-RT" || s == "pre_rt" || s == "pre") return Timepoint::pre_rt;
    if (s == "mid-RT" || s == "mid_rt" || s == "mid") return Timepoint::mid_rt;
    throw ConfigError("unknown timepoint '" + s + "' (expected pre-RT or mid-RT)");
}

void CaseRecord::validate() const {
    image.validate();
    if (prior_image) {
        prior_image->validate();
        if (!same_geometry(image, *prior_image))
            throw UsageError("case " + case_id +
                             ": prior image geometry differs from the image grid");
    }
    auto check_prior = [&](const std::optional<LabelMap>& m, const char* name) {
        if (!m) return;
        m->validate();
        if (!same_geometry(image, *m))
            throw UsageError(std::string("case ") + case_id + ": " + name +
                             " geometry differs from the image grid");
    };
    check_prior(prior_gtvp, "prior GTVp mask");
    check_prior(prior_gtvn, "prior GTVn mask");
    check_prior(ground_truth, "ground truth");
}

}  // namespace longiseg
