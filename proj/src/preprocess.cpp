#include "longiseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "longiseg/error.hpp"
#include "longiseg/random.hpp"
#include "longiseg/threading.hpp"

namespace longiseg {

namespace {

void check_rank4(const char* who, const TensorF& t) {
    if (!t.defined() || t.shape().size() != 4)
        throw ShapeError(std::string(who) + ": expected a {C, nz, ny, nx} tensor, got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

void check_positive_spacing(const char* who, const Triple& s) {
    for (double v : s)
        if (!(v > 0.0))
            throw ConfigError(std::string(who) + ": target spacing must be strictly positive, got (" +
                              std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " +
                              std::to_string(s[2]) + ")");
}

/// Per-axis voxel-center resampling plan: output extent and, for every output
/// index, the (clamped) continuous source index it reads.
struct AxisPlan {
    std::int64_t n_out = 0;
    std::vector<double> coord;  // size n_out, in [0, n_in - 1]
};

AxisPlan plan_axis(std::int64_t n_in, double s_in, double s_out) {
    AxisPlan plan;
    plan.n_out = std::max<std::int64_t>(1, std::llround(double(n_in) * s_in / s_out));
    plan.coord.resize(std::size_t(plan.n_out));
    const double hi = double(n_in - 1);
    for (std::int64_t i = 0; i < plan.n_out; ++i) {
        const double u = (double(i) + 0.5) * s_out / s_in - 0.5;
        plan.coord[std::size_t(i)] = std::clamp(u, 0.0, hi);
    }
    return plan;
}

Triple shifted_origin(const Triple& origin, const Triple& s_in, const Triple& s_out) {
    // Voxel-center grids share the physical corner: origin moves by half the
    // spacing difference per axis.
    return {origin[0] + 0.5 * (s_out[0] - s_in[0]), origin[1] + 0.5 * (s_out[1] - s_in[1]),
            origin[2] + 0.5 * (s_out[2] - s_in[2])};
}

double sample_volume_trilinear(const Volume& v, double ux, double uy, double uz) {
    const std::int64_t x0 = std::int64_t(std::floor(ux));
    const std::int64_t y0 = std::int64_t(std::floor(uy));
    const std::int64_t z0 = std::int64_t(std::floor(uz));
    const std::int64_t x1 = std::min(x0 + 1, v.dims[0] - 1);
    const std::int64_t y1 = std::min(y0 + 1, v.dims[1] - 1);
    const std::int64_t z1 = std::min(z0 + 1, v.dims[2] - 1);
    const double fx = ux - double(x0), fy = uy - double(y0), fz = uz - double(z0);
    double acc = 0.0;
    for (int cz = 0; cz < 2; ++cz) {
        const double wz = cz ? fz : 1.0 - fz;
        if (wz == 0.0)
            continue;
        for (int cy = 0; cy < 2; ++cy) {
            const double wy = cy ? fy : 1.0 - fy;
            if (wy == 0.0)
                continue;
            for (int cx = 0; cx < 2; ++cx) {
                const double wx = cx ? fx : 1.0 - fx;
                if (wx == 0.0)
                    continue;
                acc += wz * wy * wx *
                       double(v.at(cx ? x1 : x0, cy ? y1 : y0, cz ? z1 : z0));
            }
        }
    }
    return acc;
}

}  // namespace

TensorF volume_to_tensor(const Volume& v) {
    v.validate();
    return TensorF::from_data({1, v.dims[2], v.dims[1], v.dims[0]}, v.data);
}

TensorF labels_to_tensor(const LabelMap& m) {
    m.validate();
    std::vector<float> data(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i)
        data[i] = float(m.data[i]);
    return TensorF::from_data({1, m.dims[2], m.dims[1], m.dims[0]}, std::move(data));
}

Volume tensor_to_volume(const TensorF& t, const Volume& like) {
    check_rank4("tensor_to_volume", t);
    if (t.dim(0) != 1 || t.dim(1) != like.dims[2] || t.dim(2) != like.dims[1] ||
        t.dim(3) != like.dims[0])
        throw ShapeError("tensor_to_volume: tensor " + shape_str(t.shape()) +
                         " does not match volume dims (" + std::to_string(like.dims[0]) + ", " +
                         std::to_string(like.dims[1]) + ", " + std::to_string(like.dims[2]) + ")");
    Volume out;
    out.dims = like.dims;
    out.spacing = like.spacing;
    out.origin = like.origin;
    out.data = t.data();
    return out;
}

Volume resample(const Volume& v, const Triple& target_spacing, Interp mode) {
    v.validate();
    check_positive_spacing("resample", target_spacing);

    const AxisPlan px = plan_axis(v.dims[0], v.spacing[0], target_spacing[0]);
    const AxisPlan py = plan_axis(v.dims[1], v.spacing[1], target_spacing[1]);
    const AxisPlan pz = plan_axis(v.dims[2], v.spacing[2], target_spacing[2]);

    Volume out;
    out.dims = {px.n_out, py.n_out, pz.n_out};
    out.spacing = target_spacing;
    out.origin = shifted_origin(v.origin, v.spacing, target_spacing);
    out.source_dtype = v.source_dtype;
    out.data.resize(std::size_t(out.voxel_count()));

    parallel_for(pz.n_out, [&](std::int64_t zb, std::int64_t ze) {
        for (std::int64_t z = zb; z < ze; ++z)
            for (std::int64_t y = 0; y < py.n_out; ++y)
                for (std::int64_t x = 0; x < px.n_out; ++x) {
                    const double ux = px.coord[std::size_t(x)];
                    const double uy = py.coord[std::size_t(y)];
                    const double uz = pz.coord[std::size_t(z)];
                    float val;
                    if (mode == Interp::nearest)
                        val = v.at(std::llround(ux), std::llround(uy), std::llround(uz));
                    else
                        val = float(sample_volume_trilinear(v, ux, uy, uz));
                    out.data[std::size_t(out.index(x, y, z))] = val;
                }
    });
    return out;
}

LabelMap resample(const LabelMap& m, const Triple& target_spacing) {
    m.validate();
    check_positive_spacing("resample", target_spacing);

    const AxisPlan px = plan_axis(m.dims[0], m.spacing[0], target_spacing[0]);
    const AxisPlan py = plan_axis(m.dims[1], m.spacing[1], target_spacing[1]);
    const AxisPlan pz = plan_axis(m.dims[2], m.spacing[2], target_spacing[2]);

    LabelMap out;
    out.dims = {px.n_out, py.n_out, pz.n_out};
    out.spacing = target_spacing;
    out.origin = shifted_origin(m.origin, m.spacing, target_spacing);
    out.data.resize(std::size_t(out.voxel_count()));

    parallel_for(pz.n_out, [&](std::int64_t zb, std::int64_t ze) {
        for (std::int64_t z = zb; z < ze; ++z)
            for (std::int64_t y = 0; y < py.n_out; ++y)
                for (std::int64_t x = 0; x < px.n_out; ++x)
                    out.data[std::size_t(out.index(x, y, z))] =
                        m.at(std::llround(px.coord[std::size_t(x)]),
                             std::llround(py.coord[std::size_t(y)]),
                             std::llround(pz.coord[std::size_t(z)]));
    });
    return out;
}

LabelMap resample_to_grid(const LabelMap& m, const Index3& dims, const Triple& spacing,
                          const Triple& origin) {
    m.validate();
    check_positive_spacing("resample_to_grid", spacing);
    for (std::int64_t d : dims)
        if (d < 1)
            throw ConfigError("resample_to_grid: target dims must be >= 1");

    LabelMap out;
    out.dims = dims;
    out.spacing = spacing;
    out.origin = origin;
    out.data.assign(std::size_t(out.voxel_count()), LabelMap::kBackground);

    parallel_for(dims[2], [&](std::int64_t zb, std::int64_t ze) {
        for (std::int64_t z = zb; z < ze; ++z)
            for (std::int64_t y = 0; y < dims[1]; ++y)
                for (std::int64_t x = 0; x < dims[0]; ++x) {
                    const Index3 p{x, y, z};
                    Index3 src{0, 0, 0};
                    bool inside = true;
                    for (int a = 0; a < 3; ++a) {
                        const double phys = origin[a] + double(p[std::size_t(a)]) * spacing[a];
                        const double u = (phys - m.origin[a]) / m.spacing[a];
                        // More than half a source voxel outside the grid:
                        // nothing there, leave background.
                        if (u < -0.5 || u > double(m.dims[a]) - 0.5) {
                            inside = false;
                            break;
                        }
                        src[std::size_t(a)] =
                            std::clamp<std::int64_t>(std::llround(u), 0, m.dims[a] - 1);
                    }
                    if (inside)
                        out.data[std::size_t(out.index(x, y, z))] = m.at(src[0], src[1], src[2]);
                }
    });
    return out;
}

Volume znorm(const Volume& v) {
    v.validate();
    Volume out = v;

    double sum = 0.0;
    std::int64_t count = 0;
    for (float x : v.data)
        if (x != 0.0f) {
            sum += double(x);
            ++count;
        }
    if (count == 0) {
        return out;  // empty support: nothing to normalize
    }
    const double mean = sum / double(count);
    double ssd = 0.0;
    for (float x : v.data)
        if (x != 0.0f) {
            const double d = double(x) - mean;
            ssd += d * d;
        }
    const double stddev = std::sqrt(ssd / double(count));

    if (stddev == 0.0) {
        for (float& x : out.data)
            if (x != 0.0f)
                x = 0.0f;
        return out;
    }
    for (float& x : out.data)
        if (x != 0.0f)
            x = float((double(x) - mean) / stddev);
    return out;
}

TensorF one_hot(const LabelMap& labels, int n_classes) {
    labels.validate();
    if (n_classes < 1)
        throw ConfigError("one_hot: n_classes must be >= 1, got " + std::to_string(n_classes));
    const std::int64_t n = labels.voxel_count();
    std::vector<float> data(std::size_t(n_classes) * std::size_t(n), 0.0f);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint8_t c = labels.data[std::size_t(i)];
        if (std::int64_t(c) >= n_classes)
            throw DataError("one_hot: label value " + std::to_string(int(c)) +
                            " does not fit in " + std::to_string(n_classes) + " classes");
        data[std::size_t(c) * std::size_t(n) + std::size_t(i)] = 1.0f;
    }
    return TensorF::from_data({n_classes, labels.dims[2], labels.dims[1], labels.dims[0]},
                              std::move(data));
}

void PatchSpec::validate() const {
    for (std::int64_t s : size)
        if (s < 1)
            throw ConfigError("patch size must be >= 1 per axis, got (" + std::to_string(size[0]) +
                              ", " + std::to_string(size[1]) + ", " + std::to_string(size[2]) +
                              ")");
    double total = 0.0;
    for (double p : class_probs) {
        if (p < 0.0)
            throw ConfigError("patch class probabilities must be nonnegative");
        total += p;
    }
    if (std::fabs(total - 1.0) > 1e-9)
        throw ConfigError("patch class probabilities must sum to 1, got " + std::to_string(total));
}

Index3 sample_patch_center(const LabelMap& labels, const PatchSpec& spec, std::mt19937_64& rng) {
    labels.validate();
    spec.validate();

    std::vector<std::int64_t> gtvp, gtvn;
    const std::int64_t n = labels.voxel_count();
    for (std::int64_t i = 0; i < n; ++i) {
        if (labels.data[std::size_t(i)] == LabelMap::kGtvp)
            gtvp.push_back(i);
        else if (labels.data[std::size_t(i)] == LabelMap::kGtvn)
            gtvn.push_back(i);
    }

    // Background mass is always available (a background draw may land
    // anywhere); an absent foreground class forfeits its mass.
    const double m0 = spec.class_probs[0];
    const double m1 = gtvp.empty() ? 0.0 : spec.class_probs[1];
    const double m2 = gtvn.empty() ? 0.0 : spec.class_probs[2];
    const double total = m0 + m1 + m2;

    std::int64_t linear;
    if (total <= 0.0) {
        linear = uniform_below(rng, n);  // degenerate: uniform anywhere
    } else {
        const double u = uniform_double(rng) * total;
        if (u < m0)
            linear = uniform_below(rng, n);
        else if (u < m0 + m1)
            linear = gtvp[std::size_t(uniform_below(rng, std::int64_t(gtvp.size())))];
        else
            linear = gtvn[std::size_t(uniform_below(rng, std::int64_t(gtvn.size())))];
    }
    return {linear % labels.dims[0], (linear / labels.dims[0]) % labels.dims[1],
            linear / (labels.dims[0] * labels.dims[1])};
}

TensorF crop_patch(const TensorF& t, const Index3& center, const Index3& size) {
    check_rank4("crop_patch", t);
    for (std::int64_t s : size)
        if (s < 1)
            throw ConfigError("crop_patch: size must be >= 1 per axis");

    const std::int64_t C = t.dim(0), nz = t.dim(1), ny = t.dim(2), nx = t.dim(3);
    const std::int64_t px = size[0], py = size[1], pz = size[2];
    const std::int64_t x0 = center[0] - px / 2;
    const std::int64_t y0 = center[1] - py / 2;
    const std::int64_t z0 = center[2] - pz / 2;

    std::vector<float> out(std::size_t(C * pz * py * px), 0.0f);
    const float* src = t.data().data();
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t z = 0; z < pz; ++z) {
            const std::int64_t iz = z0 + z;
            if (iz < 0 || iz >= nz)
                continue;
            for (std::int64_t y = 0; y < py; ++y) {
                const std::int64_t iy = y0 + y;
                if (iy < 0 || iy >= ny)
                    continue;
                const std::int64_t xs = std::max<std::int64_t>(0, -x0);
                const std::int64_t xe = std::min(px, nx - x0);
                for (std::int64_t x = xs; x < xe; ++x)
                    out[std::size_t(((c * pz + z) * py + y) * px + x)] =
                        src[std::size_t(((c * nz + iz) * ny + iy) * nx + (x0 + x))];
            }
        }
    return TensorF::from_data({C, pz, py, px}, std::move(out));
}

TensorF crop_patch(const Volume& v, const Index3& center, const Index3& size) {
    return crop_patch(volume_to_tensor(v), center, size);
}

void AugmentConfig::validate() const {
    auto prob = [](const char* name, double p) {
        if (p < 0.0 || p > 1.0)
            throw ConfigError(std::string("augment: ") + name + " must be in [0, 1], got " +
                              std::to_string(p));
    };
    prob("affine_prob", affine_prob);
    prob("noise_prob", noise_prob);
    prob("blur_prob", blur_prob);
    if (rotation_degrees < 0.0)
        throw ConfigError("augment: rotation_degrees must be >= 0");
    if (!(zoom_min > 0.0) || zoom_max < zoom_min)
        throw ConfigError("augment: zoom range must satisfy 0 < min <= max");
    if (noise_std_min < 0.0 || noise_std_max < noise_std_min)
        throw ConfigError("augment: noise std range must satisfy 0 <= min <= max");
    if (blur_sigma_min < 0.0 || blur_sigma_max < blur_sigma_min)
        throw ConfigError("augment: blur sigma range must satisfy 0 <= min <= max");
}

AffineParams sample_affine(const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    AffineParams p;
    const double r = cfg.rotation_degrees * std::numbers::pi / 180.0;
    for (int a = 0; a < 3; ++a)
        p.rotation_radians[std::size_t(a)] = uniform_range(rng, -r, r);
    p.zoom = uniform_range(rng, cfg.zoom_min, cfg.zoom_max);
    for (int a = 0; a < 3; ++a)
        p.flips[std::size_t(a)] = cfg.flip && uniform_double(rng) < 0.5;
    return p;
}

namespace {

struct Mat3 {
    double m[3][3];
};

Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k)
                acc += a.m[i][k] * b.m[k][j];
            r.m[i][j] = acc;
        }
    return r;
}

Mat3 rotation_about_axis(int axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    Mat3 r{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    const int i = (axis + 1) % 3, j = (axis + 2) % 3;
    r.m[i][i] = c;
    r.m[i][j] = -s;
    r.m[j][i] = s;
    r.m[j][j] = c;
    return r;
}

}  // namespace

std::pair<TensorF, TensorF> apply_affine(const TensorF& img, const TensorF& masks,
                                         const AffineParams& p) {
    check_rank4("apply_affine", img);
    check_rank4("apply_affine", masks);
    for (int a = 1; a < 4; ++a)
        if (img.dim(a) != masks.dim(a))
            throw ShapeError("apply_affine: image " + shape_str(img.shape()) + " and masks " +
                             shape_str(masks.shape()) + " must share spatial dims");
    if (!(p.zoom > 0.0))
        throw ConfigError("apply_affine: zoom must be positive");

    const std::int64_t nz = img.dim(1), ny = img.dim(2), nx = img.dim(3);
    const std::int64_t nvox = nz * ny * nx;
    const std::int64_t Ci = img.dim(0), Cm = masks.dim(0);
    const double cx = double(nx - 1) / 2.0, cy = double(ny - 1) / 2.0, cz = double(nz - 1) / 2.0;

    // Inverse map: undo flips, then rotation (forward R = Rz·Ry·Rx, so the
    // inverse composes the transposes in reverse order), then zoom.
    const Mat3 rinv =
        matmul(matmul(rotation_about_axis(0, -p.rotation_radians[0]),
                      rotation_about_axis(1, -p.rotation_radians[1])),
               rotation_about_axis(2, -p.rotation_radians[2]));
    const double inv_zoom = 1.0 / p.zoom;

    std::vector<float> img_out(std::size_t(Ci * nvox), 0.0f);
    std::vector<float> mask_out(std::size_t(Cm * nvox), 0.0f);
    const float* I = img.data().data();
    const float* M = masks.data().data();

    parallel_for(nvox, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
            const std::int64_t x = i % nx, y = (i / nx) % ny, z = i / (nx * ny);
            double v[3] = {double(x) - cx, double(y) - cy, double(z) - cz};
            for (int a = 0; a < 3; ++a)
                if (p.flips[std::size_t(a)])
                    v[a] = -v[a];
            double q[3];
            for (int a = 0; a < 3; ++a)
                q[a] = (rinv.m[a][0] * v[0] + rinv.m[a][1] * v[1] + rinv.m[a][2] * v[2]) *
                       inv_zoom;
            const double ux = q[0] + cx, uy = q[1] + cy, uz = q[2] + cz;

            // Masks: nearest neighbour, zero outside.
            {
                const std::int64_t sx = std::llround(ux), sy = std::llround(uy),
                                   sz = std::llround(uz);
                if (sx >= 0 && sx < nx && sy >= 0 && sy < ny && sz >= 0 && sz < nz) {
                    const std::int64_t s = (sz * ny + sy) * nx + sx;
                    for (std::int64_t c = 0; c < Cm; ++c)
                        mask_out[std::size_t(c * nvox + i)] = M[std::size_t(c * nvox + s)];
                }
            }

            // Image: trilinear with zero contribution from out-of-bounds taps.
            const std::int64_t x0 = std::int64_t(std::floor(ux));
            const std::int64_t y0 = std::int64_t(std::floor(uy));
            const std::int64_t z0 = std::int64_t(std::floor(uz));
            const double fx = ux - double(x0), fy = uy - double(y0), fz = uz - double(z0);
            for (std::int64_t c = 0; c < Ci; ++c) {
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz) {
                    const double wz = dz ? fz : 1.0 - fz;
                    const std::int64_t tz = z0 + dz;
                    if (wz == 0.0 || tz < 0 || tz >= nz)
                        continue;
                    for (int dy = 0; dy < 2; ++dy) {
                        const double wy = dy ? fy : 1.0 - fy;
                        const std::int64_t ty = y0 + dy;
                        if (wy == 0.0 || ty < 0 || ty >= ny)
                            continue;
                        for (int dx = 0; dx < 2; ++dx) {
                            const double wx = dx ? fx : 1.0 - fx;
                            const std::int64_t tx = x0 + dx;
                            if (wx == 0.0 || tx < 0 || tx >= nx)
                                continue;
                            acc += wz * wy * wx *
                                   double(I[std::size_t(c * nvox + (tz * ny + ty) * nx + tx)]);
                        }
                    }
                }
                img_out[std::size_t(c * nvox + i)] = float(acc);
            }
        }
    });

    return {TensorF::from_data(img.shape(), std::move(img_out)),
            TensorF::from_data(masks.shape(), std::move(mask_out))};
}

std::pair<TensorF, TensorF> random_affine(const TensorF& img, const TensorF& masks,
                                          const AugmentConfig& cfg, std::mt19937_64& rng) {
    return apply_affine(img, masks, sample_affine(cfg, rng));
}

TensorF gaussian_noise(const TensorF& img, double std, std::mt19937_64& rng) {
    if (!img.defined())
        throw ShapeError("gaussian_noise: undefined input");
    if (std < 0.0)
        throw ConfigError("gaussian_noise: std must be >= 0");
    if (std == 0.0)
        return TensorF::from_data(img.shape(), img.data());
    std::vector<float> out = img.data();
    for (float& v : out)
        v = float(double(v) + std * normal_sample(rng));
    return TensorF::from_data(img.shape(), std::move(out));
}

TensorF gaussian_blur(const TensorF& img, double sigma) {
    check_rank4("gaussian_blur", img);
    if (sigma < 0.0)
        throw ConfigError("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0)
        return TensorF::from_data(img.shape(), img.data());

    const int radius = std::max(1, int(std::lround(4.0 * sigma)));
    std::vector<double> kernel(std::size_t(2 * radius + 1));
    double total = 0.0;
    for (int j = -radius; j <= radius; ++j) {
        const double w = std::exp(-double(j) * double(j) / (2.0 * sigma * sigma));
        kernel[std::size_t(j + radius)] = w;
        total += w;
    }
    for (double& w : kernel)
        w /= total;

    const std::int64_t C = img.dim(0), nz = img.dim(1), ny = img.dim(2), nx = img.dim(3);
    const std::int64_t nvox = nz * ny * nx;
    std::vector<float> src = img.data();
    std::vector<float> dst(src.size());

    // One separable pass per axis; borders replicate the edge sample.
    const std::int64_t extent[3] = {nx, ny, nz};
    const std::int64_t stride[3] = {1, nx, nx * ny};
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t n = extent[axis], st = stride[axis];
        parallel_for(C * nvox, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t i = b; i < e; ++i) {
                const std::int64_t sp = i % nvox;
                const std::int64_t pos = (sp / st) % n;
                double acc = 0.0;
                for (int j = -radius; j <= radius; ++j) {
                    const std::int64_t t = std::clamp<std::int64_t>(pos + j, 0, n - 1);
                    acc += kernel[std::size_t(j + radius)] *
                           double(src[std::size_t(i + (t - pos) * st)]);
                }
                dst[std::size_t(i)] = float(acc);
            }
        });
        std::swap(src, dst);
    }
    return TensorF::from_data(img.shape(), std::move(src));
}

std::pair<TensorF, TensorF> augment(const TensorF& img, const TensorF& masks,
                                    const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    TensorF a = img, b = masks;
    if (uniform_double(rng) < cfg.affine_prob) {
        auto pr = apply_affine(a, b, sample_affine(cfg, rng));
        a = pr.first;
        b = pr.second;
    }
    if (uniform_double(rng) < cfg.noise_prob)
        a = gaussian_noise(a, uniform_range(rng, cfg.noise_std_min, cfg.noise_std_max), rng);
    if (uniform_double(rng) < cfg.blur_prob)
        a = gaussian_blur(a, uniform_range(rng, cfg.blur_sigma_min, cfg.blur_sigma_max));
    return {a, b};
}

}  // namespace longiseg
