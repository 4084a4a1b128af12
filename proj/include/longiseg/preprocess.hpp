#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <utility>

#include "longiseg/tensor.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

enum class Interp { trilinear, nearest };

/// Tensors carry spatial dims in (z, y, x) order: a Volume's x-fastest buffer
/// then maps one-to-one onto tensor dims {..., nz, ny, nx} with no permutation,
/// so conversions are plain copies. Coordinates handed to these functions
/// (patch centers, sizes) stay in Volume (x, y, z) order.
TensorF volume_to_tensor(const Volume& v);    // {1, nz, ny, nx}
TensorF labels_to_tensor(const LabelMap& m);  // {1, nz, ny, nx}, values {0,1,2}
/// Inverse of volume_to_tensor; geometry (spacing/origin) copied from `like`,
/// whose dims must match the tensor's spatial dims.
Volume tensor_to_volume(const TensorF& t, const Volume& like);

/// Resample onto an isotropic (or any) target grid. Output dims are
/// round(dim * spacing / target) per axis (minimum 1); sampling uses
/// voxel-center alignment, so output voxel i reads input index
/// (i + 0.5) * target / spacing - 0.5, clamped to the valid range. The
/// physical corner of the volume is preserved (origin shifts by half the
/// spacing difference).
Volume resample(const Volume& v, const Triple& target_spacing, Interp mode);
/// Label variant; always nearest-neighbour.
LabelMap resample(const LabelMap& m, const Triple& target_spacing);
/// Nearest-neighbour resample of labels onto an explicit target grid; target
/// voxels whose centers fall outside the source extent become background.
LabelMap resample_to_grid(const LabelMap& m, const Index3& dims, const Triple& spacing,
                          const Triple& origin);

/// Z-score over the non-zero support only: non-zero voxels become
/// (x - mean) / std (population std, computed in double); zero voxels stay
/// exactly zero. An empty or constant support maps the support to zero.
Volume znorm(const Volume& v);

/// One-hot encode labels as {n_classes, nz, ny, nx}; channel c is the
/// indicator of class c, so the channel sum is 1 at every voxel.
TensorF one_hot(const LabelMap& labels, int n_classes = 3);

struct PatchSpec {
    Index3 size{192, 192, 128};  // (x, y, z) voxels
    /// Probability of centering a patch on background / GTVp / GTVn.
    std::array<double, 3> class_probs{0.1, 0.45, 0.45};

    void validate() const;  // ConfigError on non-positive size or bad probs
};

/// Draw a patch center: pick a class by class_probs, then a uniformly random
/// voxel of that class. A foreground class with no voxels has its mass
/// renormalized over the remaining classes; a background draw picks a
/// uniformly random voxel anywhere in the map.
Index3 sample_patch_center(const LabelMap& labels, const PatchSpec& spec, std::mt19937_64& rng);

/// Crop a window of `size` (x, y, z) voxels centered at `center` from a
/// {C, nz, ny, nx} tensor; the window spans [center - size/2, center + size/2)
/// per axis and out-of-bounds regions are zero-filled.
TensorF crop_patch(const TensorF& t, const Index3& center, const Index3& size);
TensorF crop_patch(const Volume& v, const Index3& center, const Index3& size);

struct AugmentConfig {
    double affine_prob = 1.0;
    double rotation_degrees = 25.0;  // per-axis range [-r, +r]
    double zoom_min = 0.8;
    double zoom_max = 1.2;
    bool flip = true;  // when set, each axis is mirrored independently with p = 0.5
    double noise_prob = 0.15;
    double noise_std_min = 0.01;
    double noise_std_max = 0.1;
    double blur_prob = 0.2;
    double blur_sigma_min = 0.5;
    double blur_sigma_max = 1.0;

    void validate() const;  // ConfigError on out-of-range probabilities or ranges
};

struct AffineParams {
    std::array<double, 3> rotation_radians{0.0, 0.0, 0.0};  // about the x, y, z axes
    double zoom = 1.0;                                      // isotropic; > 1 enlarges content
    std::array<bool, 3> flips{false, false, false};         // mirror x, y, z
};

AffineParams sample_affine(const AugmentConfig& cfg, std::mt19937_64& rng);

/// Apply one affine (flips ∘ rotation ∘ zoom about the volume center) to an
/// image tensor (trilinear) and a mask tensor (nearest) identically. Both are
/// {C, nz, ny, nx} with equal spatial dims; out-of-bounds samples are zero.
/// Identity parameters reproduce the inputs bitwise.
std::pair<TensorF, TensorF> apply_affine(const TensorF& img, const TensorF& masks,
                                         const AffineParams& p);
std::pair<TensorF, TensorF> random_affine(const TensorF& img, const TensorF& masks,
                                          const AugmentConfig& cfg, std::mt19937_64& rng);

/// Add i.i.d. N(0, std^2) noise to every element.
TensorF gaussian_noise(const TensorF& img, double std, std::mt19937_64& rng);
/// Separable Gaussian blur, kernel truncated at 4*sigma and normalized to
/// sum 1; borders replicate. sigma = 0 is the identity.
TensorF gaussian_blur(const TensorF& img, double sigma);

/// Training-time augmentation: affine on image and masks together, then noise
/// and blur on the image only, each transform gated by its configured
/// probability. Parameters are drawn only for transforms that fire.
std::pair<TensorF, TensorF> augment(const TensorF& img, const TensorF& masks,
                                    const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace longiseg
