#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "longiseg/inference.hpp"
#include "longiseg/network.hpp"
#include "longiseg/preprocess.hpp"
#include "longiseg/tensor.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// Optimization schedule and sampling policy for one training run.
struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 400;
    int patches_per_sample = 2;
    int batch_size = 3;      // samples per batch; each yields patches_per_sample patches
    double grad_clip = 0.0;  // max global gradient norm; 0 disables clipping
    int repeats = 1;         // independent seeds per run; best validation score kept
    std::uint64_t seed = 0;
    PatchSpec patch;
    AugmentConfig augment;

    /// Throws ConfigError on invalid settings.
    void validate() const;
};

/// AdamW accumulators, one moment pair per parameter tensor.
template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::int64_t step = 0;

    static OptimizerState init(const std::vector<Tensor<T>>& params);
};

/// Soft Dice loss over the foreground classes. Inputs are rank-5
/// {N,C,D,H,W}; `probs` holds per-voxel class probabilities, `target_onehot`
/// a {0,1} encoding with exactly one hot channel per voxel. Sums pool over
/// batch and space, so the loss is
///   1 - mean_{c>=1} (2*sum(p_c*t_c) + s) / (sum(p_c) + sum(t_c) + s).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target_onehot,
                    double smooth = 1e-5);

/// Cross-entropy from raw logits via log-softmax (never materializes
/// probabilities, so saturated predictions stay finite). Mean over voxels of
/// -log p(target class).
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const Tensor<T>& target_onehot);

/// Nearest-neighbor downsample of a {N,1,D,H,W} label tensor by an integer
/// factor (voxel-center convention, matching the resampler). Output is a
/// graph leaf: labels carry no gradient.
template <typename T>
Tensor<T> downsample_labels(const Tensor<T>& labels, int factor);

/// Expand a {N,1,D,H,W} integer-valued label tensor into {N,C,D,H,W}
/// one-hot indicators. Values outside [0, n_classes) are a DataError.
template <typename T>
Tensor<T> one_hot_labels(const Tensor<T>& labels, int n_classes);

/// Deep-supervision objective: sum over the four prediction heads of
/// (1/2^k) * [CE + Dice] against the label map downsampled to each head's
/// grid. `head_logits` are the pre-softmax maps, highest resolution first.
template <typename T>
Tensor<T> compound_loss(const std::vector<Tensor<T>>& head_logits, const Tensor<T>& labels);

/// Cosine annealing: lr_min + 0.5*(lr0 - lr_min)*(1 + cos(pi*epoch/total)).
double cosine_lr(int epoch, int total_epochs, double lr0, double lr_min = 0.0);

/// Scale all gradients by min(1, max_norm / ||g||_2) computed over every
/// parameter jointly. Returns the pre-clip norm.
template <typename T>
double clip_gradients(std::vector<Tensor<T>>& params, double max_norm);

/// One decoupled-weight-decay Adam update: parameters first shrink by
/// lr*weight_decay, then move along the bias-corrected adaptive direction.
/// Gradients are read from each parameter's grad buffer and left untouched.
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, const TrainConfig& cfg,
                double lr);

/// Assign every case to one of n_folds folds, keeping all scans of a patient
/// together and fold sizes within one patient of each other. Deterministic in
/// (cases order, seed).
std::vector<int> crossval_split(const std::vector<CaseRecord>& cases, int n_folds,
                                std::uint64_t seed);

/// Task wiring and validation cadence for a training run.
struct TrainOptions {
    int task = 1;          // 1 scores pre-RT validation scans, 2 mid-RT only
    int val_interval = 1;  // epochs between validation passes (last always runs)
    SlidingWindowConfig val_window;

    void validate() const;  // ConfigError on bad task or interval
};

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    double lr = 0.0;
    /// Validation average DSC_agg; NaN on epochs without a validation pass.
    double val_dsc_agg = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    std::vector<EpochStats> history;
    std::vector<double> step_losses;  // one entry per optimizer step, in order
    int best_epoch = -1;
    /// Best validation score; NaN when no validation case matched the task
    /// (the final epoch's weights are kept in that event).
    double best_val = std::numeric_limits<double>::quiet_NaN();
    /// Parameter snapshot from the best epoch, in the network's named order.
    std::vector<std::vector<float>> best_weights;
};

/// Copy a parameter snapshot back into the network (sizes must match).
void assign_parameters(NetworkF& net, const std::vector<std::vector<float>>& weights);

/// Optimize `net` in place. Per epoch: shuffle the cases, draw
/// patches_per_sample patch centers from each case's ground truth, augment,
/// batch, take AdamW steps on the deep-supervision compound loss under the
/// cosine schedule; then score validation scans of the task's timepoint by
/// sliding-window prediction and keep the weights of the best average
/// DSC_agg. Single-seeded and serial over steps, so a fixed seed gives a
/// bitwise-identical loss trace.
TrainResult train(NetworkF& net, const std::vector<CaseRecord>& cases,
                  const std::vector<CaseRecord>& val_cases, const TrainConfig& cfg,
                  const TrainOptions& opt);

struct BestOfRuns {
    NetworkF net;  // winning run's best weights already restored
    TrainResult result;
    std::uint64_t seed = 0;
};

/// Run `cfg.repeats` independent trainings (seeds cfg.seed, cfg.seed+1, ...)
/// from fresh initializations and keep the run with the highest validation
/// score (ties and all-NaN fall back to the earliest seed).
BestOfRuns train_with_restarts(const NetworkConfig& net_config,
                               const std::vector<CaseRecord>& cases,
                               const std::vector<CaseRecord>& val_cases, const TrainConfig& cfg,
                               const TrainOptions& opt);

/// Sidecar metadata stored beside a weight file.
struct CheckpointMeta {
    int epoch = -1;
    double val_dsc_agg = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t seed = 0;
    std::string config_digest;
};

/// Stable 64-bit digest (hex) of every field that shapes a training run.
std::string config_digest(const NetworkConfig& net_config, const TrainConfig& cfg);

/// Write `<prefix>.weights` plus a human-readable `<prefix>.json` sidecar.
void save_checkpoint(const std::string& prefix, const NetworkF& net,
                     const CheckpointMeta& meta);

/// Load both halves back; the weight file's parameter set must match
/// `net_config` exactly.
std::pair<NetworkF, CheckpointMeta> load_checkpoint(const std::string& prefix,
                                                    const NetworkConfig& net_config);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;

}  // namespace longiseg
