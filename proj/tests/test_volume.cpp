#include <doctest.h>

#include <cmath>

#include "longiseg/error.hpp"
#include "longiseg/volume.hpp"

using namespace longiseg;

namespace {

Volume make_volume(Index3 dims) {
    Volume v;
    v.dims = dims;
    v.data.assign(size_t(v.voxel_count()), 0.0f);
    return v;
}

LabelMap make_labels(Index3 dims) {
    LabelMap m;
    m.dims = dims;
    m.data.assign(size_t(m.voxel_count()), 0);
    return m;
}

}  // namespace

TEST_CASE("volume layout is x-fastest") {
    Volume v = make_volume({3, 4, 5});
    CHECK(v.voxel_count() == 60);
    CHECK(v.index(0, 0, 0) == 0);
    CHECK(v.index(1, 0, 0) == 1);
    CHECK(v.index(0, 1, 0) == 3);
    CHECK(v.index(0, 0, 1) == 12);
    CHECK(v.index(2, 3, 4) == 59);
    v.at(2, 3, 4) = 7.0f;
    CHECK(v.data[59] == 7.0f);
}

TEST_CASE("volume validation") {
    Volume v = make_volume({2, 2, 2});
    CHECK_NOTHROW(v.validate());

    SUBCASE("non-positive dimension") {
        v.dims[1] = 0;
        CHECK_THROWS_AS(v.validate(), ShapeError);
    }
    SUBCASE("data length mismatch") {
        v.data.pop_back();
        CHECK_THROWS_AS(v.validate(), ShapeError);
    }
    SUBCASE("non-finite voxel") {
        v.data[3] = std::nanf("");
        CHECK_THROWS_AS(v.validate(), DataError);
    }
    SUBCASE("bad spacing") {
        v.spacing[0] = 0.0;
        CHECK_THROWS_AS(v.validate(), DataError);
        v.spacing[0] = -1.0;
        CHECK_THROWS_AS(v.validate(), DataError);
    }
}

TEST_CASE("labelmap validation and class_mask") {
    LabelMap m = make_labels({2, 2, 2});
    m.data = {0, 1, 2, 0, 1, 2, 0, 1};
    CHECK_NOTHROW(m.validate());

    LabelMap gtvp = m.class_mask(LabelMap::kGtvp);
    CHECK(gtvp.data == std::vector<uint8_t>{0, 1, 0, 0, 1, 0, 0, 1});
    LabelMap gtvn = m.class_mask(LabelMap::kGtvn);
    CHECK(gtvn.data == std::vector<uint8_t>{0, 0, 1, 0, 0, 1, 0, 0});
    CHECK(same_geometry(m, gtvp));

    m.data[5] = 3;
    CHECK_THROWS_AS(m.validate(), DataError);
}

TEST_CASE("same_geometry tolerance") {
    Volume a = make_volume({4, 4, 4});
    Volume b = a;
    CHECK(same_geometry(a, b));

    b.spacing[0] += 1e-9;
    CHECK(same_geometry(a, b));
    b.spacing[0] = a.spacing[0] + 1e-3;
    CHECK(!same_geometry(a, b));

    b = a;
    b.origin[2] += 1e-3;
    CHECK(!same_geometry(a, b));

    b = a;
    b.dims = {4, 4, 5};
    CHECK(!same_geometry(a, b));
}

TEST_CASE("timepoint names") {
    CHECK(std::string(to_string(Timepoint::pre_rt)) == "pre-RT");
    CHECK(std::string(to_string(Timepoint::mid_rt)) == "mid-RT");
    CHECK(timepoint_from_string("pre-RT") == Timepoint::pre_rt);
    CHECK(timepoint_from_string("mid-RT") == Timepoint::mid_rt);
    CHECK(timepoint_from_string("pre") == Timepoint::pre_rt);
    CHECK(timepoint_from_string("mid_rt") == Timepoint::mid_rt);
    CHECK_THROWS_AS(timepoint_from_string("post-RT"), ConfigError);
}

TEST_CASE("case record validation requires matching grids") {
    CaseRecord c;
    c.case_id = "caseA_mid";
    c.patient_id = "caseA";
    c.timepoint = Timepoint::mid_rt;
    c.image = make_volume({4, 4, 4});
    CHECK_NOTHROW(c.validate());

    c.prior_gtvp = make_labels({4, 4, 4});
    CHECK_NOTHROW(c.validate());

    c.prior_gtvp->spacing[1] = 2.0;
    CHECK_THROWS_AS(c.validate(), UsageError);

    c.prior_gtvp = make_labels({4, 4, 4});
    c.ground_truth = make_labels({4, 4, 5});
    CHECK_THROWS_AS(c.validate(), UsageError);
}
