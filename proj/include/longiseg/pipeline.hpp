#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "longiseg/evaluation.hpp"
#include "longiseg/inference.hpp"
#include "longiseg/network.hpp"
#include "longiseg/training.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// What the network sees per case: the scan alone, the scan plus the two
/// prior GTV masks, or additionally the registered earlier-timepoint scan.
enum class InputRecipe { image, image_priors, image_prior_image_priors };

enum class Architecture { segresnet, ma_segresnet };

/// Which timepoints contribute training samples.
enum class TrainingData { pre_rt, mid_rt, both };

const char* to_string(InputRecipe r);
const char* to_string(Architecture a);
const char* to_string(TrainingData d);
InputRecipe input_recipe_from_string(const std::string& s);
Architecture architecture_from_string(const std::string& s);
TrainingData training_data_from_string(const std::string& s);

/// Input channels implied by a recipe: 1, 3 or 4.
int recipe_channels(InputRecipe r);

/// Label cleanup applied to predictions, in declaration order.
struct PostprocessConfig {
    bool remove_small_components = false;
    double min_component_cm3 = 0.5;
    bool prior_driven_removal = false;  // drop components off the prior masks
    bool prior_match_union = false;     // match against both priors, not per class
    int connectivity = 26;

    void validate() const;  // ConfigError on bad settings
};

/// Everything one end-to-end run needs, loadable from a single JSON file.
/// Channel count and attention wiring are derived from `input_recipe` and
/// `architecture`; the network block holds only the scale knobs.
struct PipelineConfig {
    int task = 2;  // 1 segments the pre-RT scan, 2 the mid-RT scan
    Architecture architecture = Architecture::segresnet;
    InputRecipe input_recipe = InputRecipe::image;
    TrainingData training_data = TrainingData::mid_rt;
    Triple target_spacing{1.0, 1.0, 1.0};

    // Network scale.
    int init_filters = 32;
    std::vector<int> blocks_per_level{1, 2, 2, 4, 4, 4};
    int n_levels = 6;
    int deep_supervision_levels = 4;
    int mlp_reduction_ratio = 8;
    int spatial_attention_kernel = 7;

    TrainConfig train;
    int val_interval = 1;
    SlidingWindowConfig window;
    PostprocessConfig postprocess;
    std::vector<std::string> models;  // default checkpoint prefixes for infer/ensemble

    /// Cross-field invariants, e.g. a mask-aware network demands a recipe
    /// that carries prior masks, and prior-driven removal is a mid-RT-only
    /// device. Throws ConfigError.
    void validate() const;

    NetworkConfig network_config() const;
    TrainOptions train_options() const;
    /// Timepoint whose scans this task segments.
    Timepoint target_timepoint() const;
};

/// Strict JSON codec: parsing rejects unknown keys, emitting uses a fixed
/// key order, and parse(emit(c)) reproduces c exactly.
PipelineConfig parse_pipeline_config(const std::string& json_text);
std::string emit_pipeline_config(const PipelineConfig& cfg);
PipelineConfig load_pipeline_config(const std::string& path);
void save_pipeline_config(const PipelineConfig& cfg, const std::string& path);

/// One dataset row: file paths plus fold assignment. Paths are stored as
/// written in the manifest; load_manifest resolves relative ones against the
/// manifest's directory and verifies every referenced file exists.
struct ManifestEntry {
    std::string case_id;
    std::string patient_id;
    Timepoint timepoint = Timepoint::pre_rt;
    int fold = 1;
    std::string image;        // required
    std::string prior_image;  // optional fields are empty when absent
    std::string prior_gtvp;
    std::string prior_gtvn;
    std::string ground_truth;
};

struct Manifest {
    int n_folds = 1;
    std::vector<ManifestEntry> cases;
};

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

/// Read the entry's files into a CaseRecord (empty paths stay unset).
CaseRecord load_case(const ManifestEntry& e);

/// Fill in all-zero prior masks / prior image on cases that lack them but
/// whose network consumes them (e.g. pre-RT scans used as extra training
/// data have no earlier timepoint to draw priors from).
void complete_for_network(CaseRecord& c, const NetworkConfig& net);

/// Synthetic two-timepoint cohort: per patient an ellipsoidal GTVp and one
/// or two GTVn nodes, the mid-RT truth a concentric shrink of the pre-RT
/// truth (so it is always a voxelwise subset), images carrying the class
/// structure plus noise. Writes scans, masks and manifest.json to `out_dir`.
struct FixtureConfig {
    int n_patients = 4;
    Index3 dims{32, 32, 32};
    Triple spacing{1.0, 1.0, 1.0};
    int n_folds = 2;
    double noise_std = 0.15;
    std::uint64_t seed = 0;

    void validate() const;  // ConfigError on bad settings
};

Manifest generate_fixtures(const std::string& out_dir, const FixtureConfig& cfg);

/// Resample every case to the target spacing, intensity-normalize the scans
/// and write the result (plus a rewritten manifest.json) to `out_dir`.
void cmd_preprocess(const PipelineConfig& cfg, const std::string& manifest_path,
                    const std::string& out_dir);

struct TrainOutcome {
    std::string checkpoint_prefix;
    int best_epoch = -1;
    double best_val = 0.0;
    std::uint64_t seed = 0;
};

/// Train on every fold but `fold`, validate on `fold`, checkpoint the best
/// epoch under out_dir/fold<k>.
TrainOutcome cmd_train(const PipelineConfig& cfg, const std::string& manifest_path, int fold,
                       const std::string& out_dir);

/// Predict the task's target scans with an ensemble of checkpoints, apply
/// the configured label cleanup, write <case_id>.nii per case. Empty
/// `model_prefixes` falls back to cfg.models.
void cmd_infer(const PipelineConfig& cfg, const std::string& manifest_path,
               std::vector<std::string> model_prefixes, const std::string& out_dir);

/// Re-run label cleanup on existing predictions in `pred_dir`.
void cmd_postprocess(const PipelineConfig& cfg, const std::string& manifest_path,
                     const std::string& pred_dir, const std::string& out_dir);

/// Score predictions in `pred_dir` against the manifest's ground truth,
/// write the JSON report to `report_path`, and return the report text.
std::string cmd_evaluate(const PipelineConfig& cfg, const std::string& manifest_path,
                         const std::string& pred_dir, const std::string& report_path);

struct CompareOutcome {
    double win_a = 0.0;
    double win_b = 0.0;
    bool significant = false;
    std::string text;  // human-readable verdict
};

/// Paired bootstrap between two configurations, each given as one metrics
/// report per trained model (typically one per fold).
CompareOutcome cmd_compare(const std::vector<std::string>& reports_a,
                           const std::vector<std::string>& reports_b,
                           const BootstrapConfig& cfg);

}  // namespace longiseg
