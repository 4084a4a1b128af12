#include "longiseg/postprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "longiseg/error.hpp"

namespace longiseg {

namespace {

struct Offset {
    std::int64_t dx, dy, dz;
};

std::vector<Offset> neighbor_offsets(int connectivity) {
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw ConfigError("connectivity must be 6, 18, or 26, got " +
                          std::to_string(connectivity));
    std::vector<Offset> offs;
    for (std::int64_t dz = -1; dz <= 1; ++dz)
        for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                const int manhattan = int(std::abs(dx) + std::abs(dy) + std::abs(dz));
                if (manhattan == 0)
                    continue;
                if (connectivity == 6 && manhattan > 1)
                    continue;
                if (connectivity == 18 && manhattan > 2)
                    continue;
                offs.push_back({dx, dy, dz});
            }
    return offs;
}

}  // namespace

std::vector<Component> connected_components(const LabelMap& labels, int connectivity) {
    const auto offs = neighbor_offsets(connectivity);
    labels.validate();

    const std::int64_t nx = labels.dims[0], ny = labels.dims[1], nz = labels.dims[2];
    const std::int64_t n = labels.voxel_count();
    const double voxel_cm3 =
        labels.spacing[0] * labels.spacing[1] * labels.spacing[2] / 1000.0;

    std::vector<std::uint8_t> visited(std::size_t(n), 0);
    std::vector<std::int64_t> stack;
    std::vector<Component> comps;

    // A linear scan meets each component first at its minimum linear index,
    // so the requested ordering falls out of the scan itself.
    for (std::int64_t seed = 0; seed < n; ++seed) {
        const std::uint8_t cls = labels.data[std::size_t(seed)];
        if (cls == LabelMap::kBackground || visited[std::size_t(seed)])
            continue;

        Component comp;
        comp.class_id = cls;
        visited[std::size_t(seed)] = 1;
        stack.assign(1, seed);
        while (!stack.empty()) {
            const std::int64_t i = stack.back();
            stack.pop_back();
            comp.voxels.push_back(i);
            const std::int64_t x = i % nx;
            const std::int64_t y = (i / nx) % ny;
            const std::int64_t z = i / (nx * ny);
            for (const auto& o : offs) {
                const std::int64_t qx = x + o.dx, qy = y + o.dy, qz = z + o.dz;
                if (qx < 0 || qx >= nx || qy < 0 || qy >= ny || qz < 0 || qz >= nz)
                    continue;
                const std::int64_t q = (qz * ny + qy) * nx + qx;
                if (visited[std::size_t(q)] || labels.data[std::size_t(q)] != cls)
                    continue;
                visited[std::size_t(q)] = 1;
                stack.push_back(q);
            }
        }
        std::sort(comp.voxels.begin(), comp.voxels.end());
        comp.volume_cm3 = double(comp.voxels.size()) * voxel_cm3;
        comps.push_back(std::move(comp));
    }
    return comps;
}

LabelMap remove_small(const LabelMap& labels, double min_cm3, int connectivity) {
    if (!(min_cm3 >= 0.0) || !std::isfinite(min_cm3))
        throw ConfigError("remove_small: min_cm3 must be finite and >= 0");
    LabelMap out = labels;
    for (const auto& comp : connected_components(labels, connectivity))
        if (comp.volume_cm3 < min_cm3)
            for (const std::int64_t i : comp.voxels)
                out.data[std::size_t(i)] = LabelMap::kBackground;
    return out;
}

LabelMap mpdr_filter(const LabelMap& pred, const LabelMap& prior_gtvp,
                     const LabelMap& prior_gtvn, bool match_union, int connectivity) {
    prior_gtvp.validate();
    prior_gtvn.validate();
    if (!same_geometry(pred, prior_gtvp) || !same_geometry(pred, prior_gtvn))
        throw UsageError("mpdr_filter: prediction and prior masks must share one grid");

    LabelMap out = pred;
    for (const auto& comp : connected_components(pred, connectivity)) {
        auto overlaps = [&](const LabelMap& prior) {
            for (const std::int64_t i : comp.voxels)
                if (prior.data[std::size_t(i)] != 0)
                    return true;
            return false;
        };
        bool keep;
        if (match_union)
            keep = overlaps(prior_gtvp) || overlaps(prior_gtvn);
        else
            keep = overlaps(comp.class_id == LabelMap::kGtvp ? prior_gtvp : prior_gtvn);
        if (!keep)
            for (const std::int64_t i : comp.voxels)
                out.data[std::size_t(i)] = LabelMap::kBackground;
    }
    return out;
}

}  // namespace longiseg
