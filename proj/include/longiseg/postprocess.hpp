#pragma once

#include <cstdint>
#include <vector>

#include "longiseg/volume.hpp"

namespace longiseg {

/// One maximal connected set of same-class foreground voxels.
struct Component {
    std::uint8_t class_id = 0;
    std::vector<std::int64_t> voxels;  // linear indices, ascending
    double volume_cm3 = 0.0;           // count * voxel volume / 1000

    std::int64_t count() const { return std::int64_t(voxels.size()); }
};

/// Split every foreground class (1 and 2) into maximal connected components.
/// `connectivity` is 6 (faces), 18 (faces+edges), or 26 (full neighborhood).
/// Components are ordered by their minimum linear voxel index.
std::vector<Component> connected_components(const LabelMap& labels, int connectivity = 26);

/// Relabel components smaller than `min_cm3` (strictly below; computed from
/// the map's own spacing) to background. Larger components pass untouched.
LabelMap remove_small(const LabelMap& labels, double min_cm3 = 0.5, int connectivity = 26);

/// Drop every predicted component that shares no voxel with the prior mask
/// of its own class (GTVp against `prior_gtvp`, GTVn against `prior_gtvn`);
/// one overlapping voxel is enough to keep a component whole. With
/// `match_union`, overlap with either prior keeps a component. All three
/// maps must share one grid.
LabelMap mpdr_filter(const LabelMap& pred, const LabelMap& prior_gtvp,
                     const LabelMap& prior_gtvn, bool match_union = false,
                     int connectivity = 26);

}  // namespace longiseg
