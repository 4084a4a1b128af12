#include "longiseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "longiseg/error.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/preprocess.hpp"
#include "longiseg/threading.hpp"

namespace longiseg {

namespace {

/// Copy one window out of a padded x-fastest buffer into a batch slot.
template <typename Src>
void copy_window(const Src* src, const Index3& pdims, std::int64_t sx, std::int64_t sy,
                 std::int64_t sz, const Index3& patch, float* dst) {
    const std::int64_t px = patch[0], py = patch[1], pz = patch[2];
    for (std::int64_t z = 0; z < pz; ++z)
        for (std::int64_t y = 0; y < py; ++y) {
            const Src* row = src + (sz + z) * pdims[0] * pdims[1] + (sy + y) * pdims[0] + sx;
            float* out = dst + (z * py + y) * px;
            for (std::int64_t x = 0; x < px; ++x)
                out[x] = float(row[x]);
        }
}

std::vector<float> pad_volume(const std::vector<float>& data, const Index3& dims,
                              const Index3& pdims) {
    if (dims == pdims)
        return data;
    std::vector<float> out(std::size_t(pdims[0] * pdims[1] * pdims[2]), 0.0f);
    for (std::int64_t z = 0; z < dims[2]; ++z)
        for (std::int64_t y = 0; y < dims[1]; ++y)
            std::copy_n(data.begin() + z * dims[0] * dims[1] + y * dims[0], dims[0],
                        out.begin() + z * pdims[0] * pdims[1] + y * pdims[0]);
    return out;
}

std::vector<float> pad_labels(const LabelMap& m, const Index3& pdims) {
    std::vector<float> out(std::size_t(pdims[0] * pdims[1] * pdims[2]), 0.0f);
    for (std::int64_t z = 0; z < m.dims[2]; ++z)
        for (std::int64_t y = 0; y < m.dims[1]; ++y) {
            const std::uint8_t* row = m.data.data() + m.index(0, y, z);
            float* dst = out.data() + z * pdims[0] * pdims[1] + y * pdims[0];
            for (std::int64_t x = 0; x < m.dims[0]; ++x)
                dst[x] = float(row[x]);
        }
    return out;
}

}  // namespace

void SlidingWindowConfig::validate() const {
    for (const std::int64_t p : patch)
        if (p < 1)
            throw ConfigError("sliding window: patch dims must be >= 1, got " +
                              std::to_string(patch[0]) + "x" + std::to_string(patch[1]) + "x" +
                              std::to_string(patch[2]));
    if (overlap < 0.0 || overlap >= 1.0)
        throw ConfigError("sliding window: overlap must lie in [0, 1), got " +
                          std::to_string(overlap));
    if (!(sigma_scale > 0.0))
        throw ConfigError("sliding window: sigma_scale must be positive");
    if (windows_per_batch < 1)
        throw ConfigError("sliding window: windows_per_batch must be >= 1");
}

std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t patch, double overlap) {
    if (patch < 1 || extent < patch)
        throw UsageError("window_starts: need extent >= patch >= 1, got extent " +
                         std::to_string(extent) + ", patch " + std::to_string(patch));
    if (overlap < 0.0 || overlap >= 1.0)
        throw ConfigError("window_starts: overlap must lie in [0, 1)");
    const auto stride =
        std::max<std::int64_t>(1, std::int64_t(std::ceil(double(patch) * (1.0 - overlap))));
    std::vector<std::int64_t> starts;
    for (std::int64_t pos = 0;; pos += stride) {
        if (pos + patch >= extent) {
            starts.push_back(extent - patch);  // final window flush to the border
            break;
        }
        starts.push_back(pos);
    }
    return starts;
}

std::vector<double> gaussian_window(Index3 size, double sigma_scale) {
    for (const std::int64_t s : size)
        if (s < 1)
            throw ConfigError("gaussian_window: dims must be >= 1");
    if (!(sigma_scale > 0.0))
        throw ConfigError("gaussian_window: sigma_scale must be positive");

    std::array<std::vector<double>, 3> axis;
    for (int d = 0; d < 3; ++d) {
        const std::int64_t n = size[std::size_t(d)];
        const double c = double(n - 1) / 2.0;
        const double sigma = sigma_scale * double(n);
        axis[std::size_t(d)].resize(std::size_t(n));
        double peak = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double u = (double(i) - c) / sigma;
            axis[std::size_t(d)][std::size_t(i)] = std::exp(-0.5 * u * u);
            peak = std::max(peak, axis[std::size_t(d)][std::size_t(i)]);
        }
        for (auto& v : axis[std::size_t(d)])
            v /= peak;
    }

    std::vector<double> w(std::size_t(size[0] * size[1] * size[2]));
    for (std::int64_t z = 0; z < size[2]; ++z)
        for (std::int64_t y = 0; y < size[1]; ++y)
            for (std::int64_t x = 0; x < size[0]; ++x)
                w[std::size_t((z * size[1] + y) * size[0] + x)] =
                    axis[2][std::size_t(z)] * axis[1][std::size_t(y)] * axis[0][std::size_t(x)];
    return w;
}

bool network_needs_priors(const NetworkConfig& cfg) {
    return cfg.attention_enabled || cfg.in_channels == 3 || cfg.in_channels == 4;
}

bool network_needs_prior_image(const NetworkConfig& cfg) { return cfg.in_channels == 4; }

PatchPredictor network_predictor(const NetworkF& net) {
    const NetworkF* np = &net;
    return [np](const TensorF& x, const TensorF& gtvp, const TensorF& gtvn) {
        NoGradGuard ng;
        const std::int64_t want = np->config.in_channels;
        const std::int64_t have = x.shape()[1];
        TensorF input = x;
        if (want == have + 2) {
            if (!gtvp.defined() || !gtvn.defined())
                throw UsageError("network_predictor: this model takes prior channels");
            input = concat(std::vector<TensorF>{x, gtvp, gtvn}, 1);
        } else if (want != have) {
            throw ShapeError("network_predictor: model wants " + std::to_string(want) +
                             " input channels but the crop has " + std::to_string(have));
        }
        if (np->config.attention_enabled)
            return forward(*np, input, gtvp, gtvn)[0];
        return forward(*np, input)[0];
    };
}

std::array<Volume, 3> sliding_window_predict(const PatchPredictor& model, bool needs_priors,
                                             const CaseRecord& c, const SlidingWindowConfig& cfg,
                                             bool needs_prior_image) {
    cfg.validate();
    c.validate();
    if (needs_priors && (!c.prior_gtvp.has_value() || !c.prior_gtvn.has_value()))
        throw UsageError("sliding_window_predict: model needs prior masks but case '" +
                         c.case_id + "' has none; supply all-zero masks when none exist");
    if (needs_prior_image && !c.prior_image.has_value())
        throw UsageError("sliding_window_predict: model needs the registered prior image but "
                         "case '" +
                         c.case_id + "' has none; supply an all-zero volume when none exists");

    const Index3 dims = c.image.dims;
    const Index3 patch = cfg.patch;
    Index3 pdims;
    for (int d = 0; d < 3; ++d)
        pdims[std::size_t(d)] = std::max(dims[std::size_t(d)], patch[std::size_t(d)]);

    const auto img = pad_volume(c.image.data, dims, pdims);
    std::vector<float> pimg;
    if (needs_prior_image) pimg = pad_volume(c.prior_image->data, dims, pdims);
    std::vector<float> gtvp, gtvn;
    if (needs_priors) {
        gtvp = pad_labels(*c.prior_gtvp, pdims);
        gtvn = pad_labels(*c.prior_gtvn, pdims);
    }

    const auto sx = window_starts(pdims[0], patch[0], cfg.overlap);
    const auto sy = window_starts(pdims[1], patch[1], cfg.overlap);
    const auto sz = window_starts(pdims[2], patch[2], cfg.overlap);
    std::vector<Index3> windows;
    windows.reserve(sx.size() * sy.size() * sz.size());
    for (const auto z : sz)
        for (const auto y : sy)
            for (const auto x : sx)
                windows.push_back({x, y, z});

    const std::int64_t pvox = patch[0] * patch[1] * patch[2];
    const std::vector<double> weights = cfg.blend == SlidingWindowConfig::Blend::gaussian
                                            ? gaussian_window(patch, cfg.sigma_scale)
                                            : std::vector<double>(std::size_t(pvox), 1.0);

    const std::int64_t total = pdims[0] * pdims[1] * pdims[2];
    std::array<std::vector<double>, 3> acc;
    for (auto& a : acc)
        a.assign(std::size_t(total), 0.0);
    std::vector<double> wsum(std::size_t(total), 0.0);

    const std::int64_t ci = needs_prior_image ? 2 : 1;  // image channels per window
    for (std::size_t w0 = 0; w0 < windows.size(); w0 += std::size_t(cfg.windows_per_batch)) {
        const std::size_t bend = std::min(windows.size(), w0 + std::size_t(cfg.windows_per_batch));
        const std::int64_t B = std::int64_t(bend - w0);

        std::vector<float> xb(std::size_t(B * ci * pvox));
        std::vector<float> pb, nb;
        if (needs_priors) {
            pb.assign(std::size_t(B * pvox), 0.0f);
            nb.assign(std::size_t(B * pvox), 0.0f);
        }
        for (std::size_t wi = w0; wi < bend; ++wi) {
            const auto [x, y, z] = windows[wi];
            float* slot = xb.data() + std::int64_t(wi - w0) * ci * pvox;
            copy_window(img.data(), pdims, x, y, z, patch, slot);
            if (needs_prior_image)
                copy_window(pimg.data(), pdims, x, y, z, patch, slot + pvox);
            if (needs_priors) {
                copy_window(gtvp.data(), pdims, x, y, z, patch,
                            pb.data() + std::int64_t(wi - w0) * pvox);
                copy_window(gtvn.data(), pdims, x, y, z, patch,
                            nb.data() + std::int64_t(wi - w0) * pvox);
            }
        }
        TensorF xt = TensorF::from_data({B, ci, patch[2], patch[1], patch[0]}, std::move(xb));
        TensorF pt, nt;
        if (needs_priors) {
            const Shape mask_shape{B, 1, patch[2], patch[1], patch[0]};
            pt = TensorF::from_data(mask_shape, std::move(pb));
            nt = TensorF::from_data(mask_shape, std::move(nb));
        }
        TensorF probs = model(xt, pt, nt);
        const Shape want{B, 3, patch[2], patch[1], patch[0]};
        if (!probs.defined() || probs.shape() != want)
            throw ShapeError("sliding_window_predict: model returned " +
                             (probs.defined() ? shape_str(probs.shape())
                                              : std::string("undefined")) +
                             ", expected " + shape_str(want));

        // Accumulate each window in order; within a window every voxel has
        // one owner, so the blend is deterministic at any worker count.
        for (std::size_t wi = w0; wi < bend; ++wi) {
            const auto [x, y, z] = windows[wi];
            const float* p = probs.data().data() + std::int64_t(wi - w0) * 3 * pvox;
            parallel_for(pvox, [&](std::int64_t b, std::int64_t e) {
                for (std::int64_t i = b; i < e; ++i) {
                    const std::int64_t lx = i % patch[0];
                    const std::int64_t ly = (i / patch[0]) % patch[1];
                    const std::int64_t lz = i / (patch[0] * patch[1]);
                    const std::int64_t g =
                        (z + lz) * pdims[0] * pdims[1] + (y + ly) * pdims[0] + (x + lx);
                    const double wv = weights[std::size_t(i)];
                    for (int cls = 0; cls < 3; ++cls)
                        acc[std::size_t(cls)][std::size_t(g)] +=
                            wv * double(p[cls * pvox + i]);
                    wsum[std::size_t(g)] += wv;
                }
            });
        }
    }

    std::array<Volume, 3> out;
    for (int cls = 0; cls < 3; ++cls) {
        Volume v;
        v.dims = dims;
        v.spacing = c.image.spacing;
        v.origin = c.image.origin;
        v.data.resize(std::size_t(dims[0] * dims[1] * dims[2]));
        parallel_for(dims[2], [&](std::int64_t zb, std::int64_t ze) {
            for (std::int64_t z = zb; z < ze; ++z)
                for (std::int64_t y = 0; y < dims[1]; ++y)
                    for (std::int64_t x = 0; x < dims[0]; ++x) {
                        const std::int64_t g = z * pdims[0] * pdims[1] + y * pdims[0] + x;
                        v.data[std::size_t(v.index(x, y, z))] = float(
                            acc[std::size_t(cls)][std::size_t(g)] / wsum[std::size_t(g)]);
                    }
        });
        out[std::size_t(cls)] = std::move(v);
    }
    return out;
}

LabelMap argmax_labels(const std::array<Volume, 3>& probs) {
    for (int cls = 1; cls < 3; ++cls)
        if (!same_geometry(probs[0], probs[std::size_t(cls)]))
            throw ShapeError("argmax_labels: probability channels disagree on geometry");
    LabelMap m;
    m.dims = probs[0].dims;
    m.spacing = probs[0].spacing;
    m.origin = probs[0].origin;
    m.data.resize(std::size_t(m.voxel_count()));
    parallel_for(m.voxel_count(), [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
            std::uint8_t best = 0;
            float best_p = probs[0].data[std::size_t(i)];
            for (std::uint8_t cls = 1; cls < 3; ++cls)
                if (probs[cls].data[std::size_t(i)] > best_p) {  // ties keep the lower class
                    best_p = probs[cls].data[std::size_t(i)];
                    best = cls;
                }
            m.data[std::size_t(i)] = best;
        }
    });
    return m;
}

EnsembleResult ensemble_predict(const std::vector<PatchPredictor>& models, bool needs_priors,
                                const CaseRecord& c, const SlidingWindowConfig& cfg,
                                bool needs_prior_image) {
    if (models.empty())
        throw ConfigError("ensemble_predict: no models given");

    std::vector<std::array<Volume, 3>> per_model;
    per_model.reserve(models.size());
    for (const auto& m : models)
        per_model.push_back(sliding_window_predict(m, needs_priors, c, cfg, needs_prior_image));

    EnsembleResult res;
    const std::int64_t nvox = per_model[0][0].voxel_count();
    const double k = double(models.size());
    for (int cls = 0; cls < 3; ++cls) {
        Volume v = per_model[0][std::size_t(cls)];  // copies geometry
        parallel_for(nvox, [&](std::int64_t b, std::int64_t e) {
            std::vector<double> vals(models.size());
            for (std::int64_t i = b; i < e; ++i) {
                for (std::size_t mi = 0; mi < models.size(); ++mi)
                    vals[mi] = double(per_model[mi][std::size_t(cls)].data[std::size_t(i)]);
                // Canonical (sorted) order makes the mean independent of the
                // model ordering down to the last bit.
                std::sort(vals.begin(), vals.end());
                double s = 0.0;
                for (const double vv : vals)
                    s += vv;
                v.data[std::size_t(i)] = float(s / k);
            }
        });
        res.probs[std::size_t(cls)] = std::move(v);
    }
    res.labels = argmax_labels(res.probs);
    return res;
}

LabelMap resample_labels_to_original(const LabelMap& labels, Index3 dims, Triple spacing,
                                     Triple origin) {
    return resample_to_grid(labels, dims, spacing, origin);
}

}  // namespace longiseg
