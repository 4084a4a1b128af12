#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "longiseg/network.hpp"
#include "longiseg/tensor.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// Window geometry and blending policy for whole-volume prediction.
struct SlidingWindowConfig {
    Index3 patch{192, 192, 128};  // (x, y, z) voxels
    double overlap = 0.625;       // fraction of patch shared by neighboring windows
    double sigma_scale = 0.125;   // Gaussian sigma as a fraction of each patch dim
    enum class Blend { gaussian, constant };
    Blend blend = Blend::gaussian;
    int windows_per_batch = 1;  // windows stacked per model call (throughput only)

    /// Throws ConfigError on invalid settings.
    void validate() const;
};

/// Window start offsets along one axis: stride = ceil(patch*(1-overlap)),
/// with the last window clamped flush to the end so [0, extent) is covered.
std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t patch, double overlap);

/// Separable Gaussian blending weights over a patch, x-fastest layout.
/// Per-axis profiles are normalized so the peak voxel weight is exactly 1;
/// every weight is strictly positive.
std::vector<double> gaussian_window(Index3 size, double sigma_scale);

/// Batched patch model: takes an image crop {B,Ci,pz,py,px} (Ci=1, or 2 when
/// a registered prior image rides along as a second channel) plus prior mask
/// crops {B,1,pz,py,px} (undefined tensors when the model ignores priors) and
/// returns class probabilities {B,3,pz,py,px}.
using PatchPredictor =
    std::function<TensorF(const TensorF& x, const TensorF& gtvp, const TensorF& gtvn)>;

/// Wrap a built network as a PatchPredictor (runs without gradient
/// recording, assembling prior channels/arguments per the network config).
/// The network must outlive the returned callable.
PatchPredictor network_predictor(const NetworkF& net);

/// True when the model consumes prior masks (attention gating or
/// prior-concatenated input channels).
bool network_needs_priors(const NetworkConfig& cfg);

/// True when the model expects the registered earlier-timepoint scan as an
/// extra image channel (4-channel input: image, prior image, two masks).
bool network_needs_prior_image(const NetworkConfig& cfg);

/// Whole-volume prediction: zero-pad to at least the patch size, run the
/// model over overlapping windows, blend with the configured weights, crop
/// the padding away. Returns one probability Volume per class on the input
/// grid. `needs_priors` demands prior masks on the case and crops them with
/// the same windows; `needs_prior_image` does the same for the registered
/// prior scan, stacked as a second channel of the image crop.
std::array<Volume, 3> sliding_window_predict(const PatchPredictor& model, bool needs_priors,
                                             const CaseRecord& c,
                                             const SlidingWindowConfig& cfg,
                                             bool needs_prior_image = false);

/// Class with the highest probability per voxel; ties pick the lowest index.
LabelMap argmax_labels(const std::array<Volume, 3>& probs);

struct EnsembleResult {
    std::array<Volume, 3> probs;
    LabelMap labels;
};

/// Mean of per-model probability maps followed by argmax labeling. The mean
/// sorts each voxel's model values before summing, so the result is
/// bitwise-identical under any model ordering.
EnsembleResult ensemble_predict(const std::vector<PatchPredictor>& models, bool needs_priors,
                                const CaseRecord& c, const SlidingWindowConfig& cfg,
                                bool needs_prior_image = false);

/// Nearest-neighbor resample of a label map onto an arbitrary target grid
/// (typically the scan's native geometry). Values are preserved exactly.
LabelMap resample_labels_to_original(const LabelMap& labels, Index3 dims, Triple spacing,
                                     Triple origin);

}  // namespace longiseg
