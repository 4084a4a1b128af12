#include "longiseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "longiseg/error.hpp"
#include "longiseg/nifti.hpp"
#include "longiseg/postprocess.hpp"
#include "longiseg/preprocess.hpp"
#include "longiseg/random.hpp"

namespace longiseg {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    if (in.bad())
        throw IoError("failed reading '" + path + "'");
    return ss.str();
}

void spew(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    out.flush();
    if (!out)
        throw IoError("cannot write '" + path + "'");
}

/// Strict object reader: every lookup type-checks, unknown keys are
/// rejected, and all failures surface as the given error class E.
template <typename E>
class StrictObject {
public:
    StrictObject(const ojson& o, std::string where) : o_(o), where_(std::move(where)) {
        if (!o_.is_object())
            throw E(where_ + ": expected a JSON object");
    }

    template <typename T>
    T req(const char* key) const {
        if (!o_.contains(key))
            throw E(where_ + ": missing key '" + std::string(key) + "'");
        return as<T>(key);
    }

    template <typename T>
    T opt(const char* key, T fallback) const {
        if (!o_.contains(key))
            return fallback;
        return as<T>(key);
    }

    bool has(const char* key) const { return o_.contains(key); }

    const ojson& raw(const char* key) const {
        if (!o_.contains(key))
            throw E(where_ + ": missing key '" + std::string(key) + "'");
        return o_.at(key);
    }

    void finish(std::initializer_list<const char*> allowed) const {
        for (auto it = o_.begin(); it != o_.end(); ++it) {
            const bool known = std::any_of(allowed.begin(), allowed.end(),
                                           [&](const char* k) { return it.key() == k; });
            if (!known)
                throw E(where_ + ": unknown key '" + it.key() + "'");
        }
    }

private:
    template <typename T>
    T as(const char* key) const {
        try {
            return o_.at(key).get<T>();
        } catch (const ojson::exception& e) {
            throw E(where_ + ": key '" + std::string(key) + "': " + e.what());
        }
    }

    const ojson& o_;
    std::string where_;
};

template <typename E>
Index3 index3_from(const ojson& a, const std::string& where) {
    if (!a.is_array() || a.size() != 3)
        throw E(where + ": expected an array of three integers");
    Index3 r{};
    for (std::size_t i = 0; i < 3; ++i) {
        try {
            r[i] = a[i].get<std::int64_t>();
        } catch (const ojson::exception& e) {
            throw E(where + ": " + e.what());
        }
    }
    return r;
}

template <typename E>
Triple triple_from(const ojson& a, const std::string& where) {
    if (!a.is_array() || a.size() != 3)
        throw E(where + ": expected an array of three numbers");
    Triple r{};
    for (std::size_t i = 0; i < 3; ++i) {
        try {
            r[i] = a[i].get<double>();
        } catch (const ojson::exception& e) {
            throw E(where + ": " + e.what());
        }
    }
    return r;
}

ojson index3_json(const Index3& v) { return ojson::array({v[0], v[1], v[2]}); }
ojson triple_json(const Triple& v) { return ojson::array({v[0], v[1], v[2]}); }

const char* to_string(SlidingWindowConfig::Blend b) {
    return b == SlidingWindowConfig::Blend::gaussian ? "gaussian" : "constant";
}

SlidingWindowConfig::Blend blend_from_string(const std::string& s) {
    if (s == "gaussian") return SlidingWindowConfig::Blend::gaussian;
    if (s == "constant") return SlidingWindowConfig::Blend::constant;
    throw ConfigError("unknown blend '" + s + "' (expected gaussian or constant)");
}

}  // namespace

const char* to_string(InputRecipe r) {
    switch (r) {
        case InputRecipe::image: return "image";
        case InputRecipe::image_priors: return "image+priors";
        case InputRecipe::image_prior_image_priors: return "image+prior-image+priors";
    }
    throw UsageError("to_string: bad InputRecipe value");
}

const char* to_string(Architecture a) {
    return a == Architecture::segresnet ? "segresnet" : "ma-segresnet";
}

const char* to_string(TrainingData d) {
    switch (d) {
        case TrainingData::pre_rt: return "pre-rt";
        case TrainingData::mid_rt: return "mid-rt";
        case TrainingData::both: return "mid+pre";
    }
    throw UsageError("to_string: bad TrainingData value");
}

InputRecipe input_recipe_from_string(const std::string& s) {
    if (s == "image") return InputRecipe::image;
    if (s == "image+priors") return InputRecipe::image_priors;
    if (s == "image+prior-image+priors") return InputRecipe::image_prior_image_priors;
    throw ConfigError("unknown input recipe '" + s +
                      "' (expected image, image+priors or image+prior-image+priors)");
}

Architecture architecture_from_string(const std::string& s) {
    if (s == "segresnet") return Architecture::segresnet;
    if (s == "ma-segresnet") return Architecture::ma_segresnet;
    throw ConfigError("unknown architecture '" + s + "' (expected segresnet or ma-segresnet)");
}

TrainingData training_data_from_string(const std::string& s) {
    if (s == "pre-rt") return TrainingData::pre_rt;
    if (s == "mid-rt") return TrainingData::mid_rt;
    if (s == "mid+pre") return TrainingData::both;
    throw ConfigError("unknown training data selection '" + s +
                      "' (expected pre-rt, mid-rt or mid+pre)");
}

int recipe_channels(InputRecipe r) {
    switch (r) {
        case InputRecipe::image: return 1;
        case InputRecipe::image_priors: return 3;
        case InputRecipe::image_prior_image_priors: return 4;
    }
    throw UsageError("recipe_channels: bad InputRecipe value");
}

void PostprocessConfig::validate() const {
    if (!std::isfinite(min_component_cm3) || min_component_cm3 < 0.0)
        throw ConfigError("postprocess: min_component_cm3 must be finite and >= 0");
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw ConfigError("postprocess: connectivity must be 6, 18 or 26");
}

void PipelineConfig::validate() const {
    if (task != 1 && task != 2)
        throw ConfigError("pipeline: task must be 1 (pre-RT) or 2 (mid-RT)");
    if (architecture == Architecture::ma_segresnet && input_recipe == InputRecipe::image)
        throw ConfigError("pipeline: mask-aware attention needs prior masks; pick an input "
                          "recipe that carries them");
    if (task == 1 && postprocess.prior_driven_removal)
        throw ConfigError("pipeline: prior-driven removal matches components against the "
                          "earlier timepoint's masks; the pre-RT task has none");
    for (const double s : target_spacing)
        if (!std::isfinite(s) || s <= 0.0)
            throw ConfigError("pipeline: target_spacing must be positive and finite");
    if (val_interval < 1)
        throw ConfigError("pipeline: val_interval must be >= 1");
    network_config().validate();
    train.validate();
    window.validate();
    postprocess.validate();
}

NetworkConfig PipelineConfig::network_config() const {
    NetworkConfig nc;
    nc.in_channels = recipe_channels(input_recipe);
    nc.n_classes = 3;
    nc.init_filters = init_filters;
    nc.blocks_per_level = blocks_per_level;
    nc.n_levels = n_levels;
    nc.deep_supervision_levels = deep_supervision_levels;
    nc.attention_enabled = architecture == Architecture::ma_segresnet;
    nc.mlp_reduction_ratio = mlp_reduction_ratio;
    nc.spatial_attention_kernel = spatial_attention_kernel;
    return nc;
}

TrainOptions PipelineConfig::train_options() const {
    TrainOptions opt;
    opt.task = task;
    opt.val_interval = val_interval;
    opt.val_window = window;
    return opt;
}

Timepoint PipelineConfig::target_timepoint() const {
    return task == 1 ? Timepoint::pre_rt : Timepoint::mid_rt;
}

PipelineConfig parse_pipeline_config(const std::string& json_text) {
    ojson j;
    try {
        j = ojson::parse(json_text);
    } catch (const ojson::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    using Obj = StrictObject<ConfigError>;
    Obj top(j, "config");
    PipelineConfig c;
    c.task = top.req<int>("task");
    c.architecture = architecture_from_string(top.req<std::string>("architecture"));
    c.input_recipe = input_recipe_from_string(top.req<std::string>("input_recipe"));
    c.training_data = training_data_from_string(top.req<std::string>("training_data"));
    c.target_spacing = triple_from<ConfigError>(top.raw("target_spacing"),
                                                "config: target_spacing");

    Obj net(top.raw("network"), "config: network");
    c.init_filters = net.req<int>("init_filters");
    c.blocks_per_level = net.req<std::vector<int>>("blocks_per_level");
    c.n_levels = net.req<int>("n_levels");
    c.deep_supervision_levels = net.req<int>("deep_supervision_levels");
    c.mlp_reduction_ratio = net.req<int>("mlp_reduction_ratio");
    c.spatial_attention_kernel = net.req<int>("spatial_attention_kernel");
    net.finish({"init_filters", "blocks_per_level", "n_levels", "deep_supervision_levels",
                "mlp_reduction_ratio", "spatial_attention_kernel"});

    Obj tr(top.raw("train"), "config: train");
    c.train.lr = tr.req<double>("lr");
    c.train.weight_decay = tr.req<double>("weight_decay");
    c.train.beta1 = tr.req<double>("beta1");
    c.train.beta2 = tr.req<double>("beta2");
    c.train.adam_eps = tr.req<double>("adam_eps");
    c.train.epochs = tr.req<int>("epochs");
    c.train.patches_per_sample = tr.req<int>("patches_per_sample");
    c.train.batch_size = tr.req<int>("batch_size");
    c.train.grad_clip = tr.req<double>("grad_clip");
    c.train.repeats = tr.req<int>("repeats");
    c.train.seed = tr.req<std::uint64_t>("seed");
    c.train.patch.size = index3_from<ConfigError>(tr.raw("patch_size"), "config: patch_size");
    {
        const auto probs = tr.req<std::vector<double>>("class_probs");
        if (probs.size() != 3)
            throw ConfigError("config: class_probs must have three entries");
        std::copy(probs.begin(), probs.end(), c.train.patch.class_probs.begin());
    }
    Obj aug(tr.raw("augment"), "config: augment");
    auto& a = c.train.augment;
    a.affine_prob = aug.req<double>("affine_prob");
    a.rotation_degrees = aug.req<double>("rotation_degrees");
    a.zoom_min = aug.req<double>("zoom_min");
    a.zoom_max = aug.req<double>("zoom_max");
    a.flip = aug.req<bool>("flip");
    a.noise_prob = aug.req<double>("noise_prob");
    a.noise_std_min = aug.req<double>("noise_std_min");
    a.noise_std_max = aug.req<double>("noise_std_max");
    a.blur_prob = aug.req<double>("blur_prob");
    a.blur_sigma_min = aug.req<double>("blur_sigma_min");
    a.blur_sigma_max = aug.req<double>("blur_sigma_max");
    aug.finish({"affine_prob", "rotation_degrees", "zoom_min", "zoom_max", "flip", "noise_prob",
                "noise_std_min", "noise_std_max", "blur_prob", "blur_sigma_min",
                "blur_sigma_max"});
    tr.finish({"lr", "weight_decay", "beta1", "beta2", "adam_eps", "epochs",
               "patches_per_sample", "batch_size", "grad_clip", "repeats", "seed", "patch_size",
               "class_probs", "augment"});

    c.val_interval = top.req<int>("val_interval");

    Obj win(top.raw("window"), "config: window");
    c.window.patch = index3_from<ConfigError>(win.raw("patch"), "config: window patch");
    c.window.overlap = win.req<double>("overlap");
    c.window.sigma_scale = win.req<double>("sigma_scale");
    c.window.blend = blend_from_string(win.req<std::string>("blend"));
    c.window.windows_per_batch = win.req<int>("windows_per_batch");
    win.finish({"patch", "overlap", "sigma_scale", "blend", "windows_per_batch"});

    Obj pp(top.raw("postprocess"), "config: postprocess");
    c.postprocess.remove_small_components = pp.req<bool>("remove_small_components");
    c.postprocess.min_component_cm3 = pp.req<double>("min_component_cm3");
    c.postprocess.prior_driven_removal = pp.req<bool>("prior_driven_removal");
    c.postprocess.prior_match_union = pp.req<bool>("prior_match_union");
    c.postprocess.connectivity = pp.req<int>("connectivity");
    pp.finish({"remove_small_components", "min_component_cm3", "prior_driven_removal",
               "prior_match_union", "connectivity"});

    c.models = top.opt<std::vector<std::string>>("models", {});
    top.finish({"task", "architecture", "input_recipe", "training_data", "target_spacing",
                "network", "train", "val_interval", "window", "postprocess", "models"});

    c.validate();
    return c;
}

std::string emit_pipeline_config(const PipelineConfig& c) {
    ojson j;
    j["task"] = c.task;
    j["architecture"] = to_string(c.architecture);
    j["input_recipe"] = to_string(c.input_recipe);
    j["training_data"] = to_string(c.training_data);
    j["target_spacing"] = triple_json(c.target_spacing);

    ojson net;
    net["init_filters"] = c.init_filters;
    net["blocks_per_level"] = c.blocks_per_level;
    net["n_levels"] = c.n_levels;
    net["deep_supervision_levels"] = c.deep_supervision_levels;
    net["mlp_reduction_ratio"] = c.mlp_reduction_ratio;
    net["spatial_attention_kernel"] = c.spatial_attention_kernel;
    j["network"] = std::move(net);

    ojson tr;
    tr["lr"] = c.train.lr;
    tr["weight_decay"] = c.train.weight_decay;
    tr["beta1"] = c.train.beta1;
    tr["beta2"] = c.train.beta2;
    tr["adam_eps"] = c.train.adam_eps;
    tr["epochs"] = c.train.epochs;
    tr["patches_per_sample"] = c.train.patches_per_sample;
    tr["batch_size"] = c.train.batch_size;
    tr["grad_clip"] = c.train.grad_clip;
    tr["repeats"] = c.train.repeats;
    tr["seed"] = c.train.seed;
    tr["patch_size"] = index3_json(c.train.patch.size);
    tr["class_probs"] = ojson::array({c.train.patch.class_probs[0], c.train.patch.class_probs[1],
                                      c.train.patch.class_probs[2]});
    ojson aug;
    const auto& a = c.train.augment;
    aug["affine_prob"] = a.affine_prob;
    aug["rotation_degrees"] = a.rotation_degrees;
    aug["zoom_min"] = a.zoom_min;
    aug["zoom_max"] = a.zoom_max;
    aug["flip"] = a.flip;
    aug["noise_prob"] = a.noise_prob;
    aug["noise_std_min"] = a.noise_std_min;
    aug["noise_std_max"] = a.noise_std_max;
    aug["blur_prob"] = a.blur_prob;
    aug["blur_sigma_min"] = a.blur_sigma_min;
    aug["blur_sigma_max"] = a.blur_sigma_max;
    tr["augment"] = std::move(aug);
    j["train"] = std::move(tr);

    j["val_interval"] = c.val_interval;

    ojson win;
    win["patch"] = index3_json(c.window.patch);
    win["overlap"] = c.window.overlap;
    win["sigma_scale"] = c.window.sigma_scale;
    win["blend"] = to_string(c.window.blend);
    win["windows_per_batch"] = c.window.windows_per_batch;
    j["window"] = std::move(win);

    ojson pp;
    pp["remove_small_components"] = c.postprocess.remove_small_components;
    pp["min_component_cm3"] = c.postprocess.min_component_cm3;
    pp["prior_driven_removal"] = c.postprocess.prior_driven_removal;
    pp["prior_match_union"] = c.postprocess.prior_match_union;
    pp["connectivity"] = c.postprocess.connectivity;
    j["postprocess"] = std::move(pp);

    j["models"] = c.models;
    return j.dump(2) + "\n";
}

PipelineConfig load_pipeline_config(const std::string& path) {
    return parse_pipeline_config(slurp(path));
}

void save_pipeline_config(const PipelineConfig& cfg, const std::string& path) {
    spew(path, emit_pipeline_config(cfg));
}

namespace {

ManifestEntry entry_from_json(const ojson& o, const std::string& where) {
    using Obj = StrictObject<FormatError>;
    Obj e(o, where);
    ManifestEntry r;
    r.case_id = e.req<std::string>("case_id");
    r.patient_id = e.req<std::string>("patient_id");
    try {
        r.timepoint = timepoint_from_string(e.req<std::string>("timepoint"));
    } catch (const ConfigError& ex) {
        throw FormatError(where + ": " + ex.what());
    }
    r.fold = e.req<int>("fold");
    r.image = e.req<std::string>("image");
    r.prior_image = e.opt<std::string>("prior_image", "");
    r.prior_gtvp = e.opt<std::string>("prior_gtvp", "");
    r.prior_gtvn = e.opt<std::string>("prior_gtvn", "");
    r.ground_truth = e.opt<std::string>("ground_truth", "");
    e.finish({"case_id", "patient_id", "timepoint", "fold", "image", "prior_image",
              "prior_gtvp", "prior_gtvn", "ground_truth"});
    if (r.image.empty())
        throw FormatError(where + ": image path is empty");
    return r;
}

ojson entry_to_json(const ManifestEntry& e) {
    ojson o;
    o["case_id"] = e.case_id;
    o["patient_id"] = e.patient_id;
    o["timepoint"] = to_string(e.timepoint);
    o["fold"] = e.fold;
    o["image"] = e.image;
    if (!e.prior_image.empty()) o["prior_image"] = e.prior_image;
    if (!e.prior_gtvp.empty()) o["prior_gtvp"] = e.prior_gtvp;
    if (!e.prior_gtvn.empty()) o["prior_gtvn"] = e.prior_gtvn;
    if (!e.ground_truth.empty()) o["ground_truth"] = e.ground_truth;
    return o;
}

/// Resolve `p` against the manifest directory and require it to exist.
std::string resolve_existing(const std::string& p, const fs::path& dir,
                             const std::string& case_id) {
    fs::path fp(p);
    if (!fp.is_absolute())
        fp = dir / fp;
    fp = fp.lexically_normal();
    if (!fs::exists(fp))
        throw DataError("manifest case '" + case_id + "': file not found: " + fp.string());
    return fp.string();
}

}  // namespace

Manifest load_manifest(const std::string& path) {
    const std::string text = slurp(path);
    ojson j;
    try {
        j = ojson::parse(text);
    } catch (const ojson::exception& e) {
        throw FormatError("manifest: " + std::string(e.what()));
    }
    using Obj = StrictObject<FormatError>;
    Obj top(j, "manifest");
    Manifest m;
    m.n_folds = top.req<int>("n_folds");
    const ojson& cases = top.raw("cases");
    top.finish({"n_folds", "cases"});
    if (!cases.is_array())
        throw FormatError("manifest: cases must be an array");
    if (m.n_folds < 1)
        throw DataError("manifest: n_folds must be >= 1");

    const fs::path dir = fs::path(path).parent_path();
    for (std::size_t i = 0; i < cases.size(); ++i) {
        ManifestEntry e = entry_from_json(cases[i], "manifest case " + std::to_string(i));
        if (e.fold < 1 || e.fold > m.n_folds)
            throw DataError("manifest case '" + e.case_id + "': fold " + std::to_string(e.fold) +
                            " outside [1, " + std::to_string(m.n_folds) + "]");
        for (const auto& other : m.cases)
            if (other.case_id == e.case_id)
                throw DataError("manifest: duplicate case_id '" + e.case_id + "'");
        e.image = resolve_existing(e.image, dir, e.case_id);
        for (std::string* p : {&e.prior_image, &e.prior_gtvp, &e.prior_gtvn, &e.ground_truth})
            if (!p->empty())
                *p = resolve_existing(*p, dir, e.case_id);
        m.cases.push_back(std::move(e));
    }
    return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
    ojson j;
    j["n_folds"] = m.n_folds;
    j["cases"] = ojson::array();
    for (const auto& e : m.cases)
        j["cases"].push_back(entry_to_json(e));
    spew(path, j.dump(2) + "\n");
}

CaseRecord load_case(const ManifestEntry& e) {
    CaseRecord c;
    c.case_id = e.case_id;
    c.patient_id = e.patient_id;
    c.timepoint = e.timepoint;
    c.image = read_volume(e.image);
    if (!e.prior_image.empty()) c.prior_image = read_volume(e.prior_image);
    if (!e.prior_gtvp.empty()) c.prior_gtvp = read_labelmap(e.prior_gtvp);
    if (!e.prior_gtvn.empty()) c.prior_gtvn = read_labelmap(e.prior_gtvn);
    if (!e.ground_truth.empty()) c.ground_truth = read_labelmap(e.ground_truth);
    c.validate();
    return c;
}

void complete_for_network(CaseRecord& c, const NetworkConfig& net) {
    if (network_needs_priors(net)) {
        LabelMap zero;
        zero.dims = c.image.dims;
        zero.spacing = c.image.spacing;
        zero.origin = c.image.origin;
        zero.data.assign(std::size_t(c.image.voxel_count()), 0);
        if (!c.prior_gtvp) c.prior_gtvp = zero;
        if (!c.prior_gtvn) c.prior_gtvn = std::move(zero);
    }
    if (network_needs_prior_image(net) && !c.prior_image) {
        Volume zero;
        zero.dims = c.image.dims;
        zero.spacing = c.image.spacing;
        zero.origin = c.image.origin;
        zero.data.assign(std::size_t(c.image.voxel_count()), 0.0f);
        c.prior_image = std::move(zero);
    }
}

void FixtureConfig::validate() const {
    if (n_patients < 1)
        throw ConfigError("fixtures: n_patients must be >= 1");
    for (const auto d : dims)
        if (d < 16)
            throw ConfigError("fixtures: dims must be >= 16 voxels per axis");
    for (const double s : spacing)
        if (!std::isfinite(s) || s <= 0.0)
            throw ConfigError("fixtures: spacing must be positive and finite");
    if (n_folds < 1)
        throw ConfigError("fixtures: n_folds must be >= 1");
    if (!std::isfinite(noise_std) || noise_std < 0.0)
        throw ConfigError("fixtures: noise_std must be finite and >= 0");
}

namespace {

struct Ellipsoid {
    Triple center;  // voxel coordinates
    Triple semi;    // semi-axes in voxels
    std::uint8_t cls = LabelMap::kGtvp;
};

bool inside(const Ellipsoid& e, double x, double y, double z) {
    const double dx = (x - e.center[0]) / e.semi[0];
    const double dy = (y - e.center[1]) / e.semi[1];
    const double dz = (z - e.center[2]) / e.semi[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
}

LabelMap rasterize(const std::vector<Ellipsoid>& ells, const FixtureConfig& cfg) {
    LabelMap m;
    m.dims = cfg.dims;
    m.spacing = cfg.spacing;
    m.data.assign(std::size_t(m.voxel_count()), 0);
    for (std::int64_t z = 0; z < m.dims[2]; ++z)
        for (std::int64_t y = 0; y < m.dims[1]; ++y)
            for (std::int64_t x = 0; x < m.dims[0]; ++x)
                for (const auto& e : ells)
                    if (inside(e, double(x), double(y), double(z))) {
                        m.at(x, y, z) = e.cls;
                        break;
                    }
    return m;
}

/// Class structure plus a lateral shading ramp plus voxel noise; the GTV
/// classes get distinct, well-separated intensity offsets so a small network
/// can actually learn them.
Volume phantom_image(const LabelMap& gt, double noise_std, std::mt19937_64& rng) {
    Volume v;
    v.dims = gt.dims;
    v.spacing = gt.spacing;
    v.data.resize(std::size_t(gt.voxel_count()));
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < v.dims[2]; ++z)
        for (std::int64_t y = 0; y < v.dims[1]; ++y)
            for (std::int64_t x = 0; x < v.dims[0]; ++x, ++i) {
                double val = 1.0 + 0.4 * double(x) / double(v.dims[0] - 1);
                if (gt.data[std::size_t(i)] == LabelMap::kGtvp)
                    val += 2.0;
                else if (gt.data[std::size_t(i)] == LabelMap::kGtvn)
                    val -= 1.5;
                v.data[std::size_t(i)] = float(val + noise_std * normal_sample(rng));
            }
    return v;
}

}  // namespace

Manifest generate_fixtures(const std::string& out_dir, const FixtureConfig& cfg) {
    cfg.validate();
    fs::create_directories(out_dir);
    std::mt19937_64 rng(cfg.seed);
    const auto d = [&](int axis) { return double(cfg.dims[std::size_t(axis)]); };

    Manifest m;
    m.n_folds = cfg.n_folds;
    for (int p = 0; p < cfg.n_patients; ++p) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "p%02d", p);
        const std::string pid(idbuf);

        // Pre-RT anatomy: one primary on the left, one or two nodes on the
        // right, margins wide enough that classes can never touch.
        std::vector<Ellipsoid> pre;
        {
            Ellipsoid e;
            e.cls = LabelMap::kGtvp;
            e.center = {d(0) * uniform_range(rng, 0.28, 0.34), d(1) * uniform_range(rng, 0.40, 0.60),
                        d(2) * uniform_range(rng, 0.40, 0.60)};
            e.semi = {d(0) * uniform_range(rng, 0.11, 0.16), d(1) * uniform_range(rng, 0.11, 0.16),
                      d(2) * uniform_range(rng, 0.11, 0.16)};
            pre.push_back(e);
        }
        const int n_nodes = 1 + int(uniform_below(rng, 2));
        for (int k = 0; k < n_nodes; ++k) {
            Ellipsoid e;
            e.cls = LabelMap::kGtvn;
            const double ylo = k == 0 ? 0.28 : 0.62;
            e.center = {d(0) * uniform_range(rng, 0.68, 0.72),
                        d(1) * uniform_range(rng, ylo, ylo + 0.10),
                        d(2) * uniform_range(rng, 0.35, 0.65)};
            e.semi = {d(0) * uniform_range(rng, 0.07, 0.10), d(1) * uniform_range(rng, 0.07, 0.10),
                      d(2) * uniform_range(rng, 0.07, 0.10)};
            pre.push_back(e);
        }

        // Mid-RT truth: concentric shrink, so it is a voxelwise subset.
        const double shrink = uniform_range(rng, 0.55, 0.80);
        std::vector<Ellipsoid> mid = pre;
        for (auto& e : mid)
            for (auto& s : e.semi)
                s *= shrink;

        const LabelMap pre_gt = rasterize(pre, cfg);
        const LabelMap mid_gt = rasterize(mid, cfg);
        const Volume pre_img = phantom_image(pre_gt, cfg.noise_std, rng);
        const Volume mid_img = phantom_image(mid_gt, cfg.noise_std, rng);

        const auto put = [&](const std::string& name, const auto& grid) {
            write_nifti(grid, (fs::path(out_dir) / name).string());
            return name;
        };

        ManifestEntry pre_e;
        pre_e.case_id = pid + "-pre";
        pre_e.patient_id = pid;
        pre_e.timepoint = Timepoint::pre_rt;
        pre_e.fold = p % cfg.n_folds + 1;
        pre_e.image = put(pid + "_pre.nii", pre_img);
        pre_e.ground_truth = put(pid + "_pre_gt.nii", pre_gt);
        m.cases.push_back(pre_e);

        ManifestEntry mid_e;
        mid_e.case_id = pid + "-mid";
        mid_e.patient_id = pid;
        mid_e.timepoint = Timepoint::mid_rt;
        mid_e.fold = pre_e.fold;
        mid_e.image = put(pid + "_mid.nii", mid_img);
        mid_e.prior_image = pid + "_pre.nii";  // registered by construction
        mid_e.prior_gtvp = put(pid + "_mid_gtvp_prior.nii", pre_gt.class_mask(LabelMap::kGtvp));
        mid_e.prior_gtvn = put(pid + "_mid_gtvn_prior.nii", pre_gt.class_mask(LabelMap::kGtvn));
        mid_e.ground_truth = put(pid + "_mid_gt.nii", mid_gt);
        m.cases.push_back(mid_e);
    }
    const std::string mpath = (fs::path(out_dir) / "manifest.json").string();
    save_manifest(m, mpath);
    return load_manifest(mpath);
}

void cmd_preprocess(const PipelineConfig& cfg, const std::string& manifest_path,
                    const std::string& out_dir) {
    cfg.validate();
    const Manifest m = load_manifest(manifest_path);
    fs::create_directories(out_dir);

    Manifest out = m;
    for (std::size_t i = 0; i < m.cases.size(); ++i) {
        const ManifestEntry& e = m.cases[i];
        ManifestEntry& oe = out.cases[i];
        const CaseRecord c = load_case(e);

        const Volume img = znorm(resample(c.image, cfg.target_spacing, Interp::trilinear));
        const auto put = [&](const std::string& suffix, const auto& grid) {
            const std::string name = e.case_id + suffix + ".nii";
            write_nifti(grid, (fs::path(out_dir) / name).string());
            return name;
        };
        const auto regrid = [&](const LabelMap& lm) {
            return resample_to_grid(lm, img.dims, img.spacing, img.origin);
        };

        oe.image = put("_image", img);
        if (c.prior_image) {
            Volume pi = znorm(resample(*c.prior_image, cfg.target_spacing, Interp::trilinear));
            if (!same_geometry(img, pi))
                throw DataError("case '" + e.case_id +
                                "': prior image resampled onto a different grid");
            oe.prior_image = put("_prior_image", pi);
        }
        if (c.prior_gtvp) oe.prior_gtvp = put("_prior_gtvp", regrid(*c.prior_gtvp));
        if (c.prior_gtvn) oe.prior_gtvn = put("_prior_gtvn", regrid(*c.prior_gtvn));
        if (c.ground_truth) oe.ground_truth = put("_gt", regrid(*c.ground_truth));
    }
    save_manifest(out, (fs::path(out_dir) / "manifest.json").string());
}

TrainOutcome cmd_train(const PipelineConfig& cfg, const std::string& manifest_path, int fold,
                       const std::string& out_dir) {
    cfg.validate();
    const Manifest m = load_manifest(manifest_path);
    if (fold < 1 || fold > m.n_folds)
        throw ConfigError("train: fold " + std::to_string(fold) + " outside [1, " +
                          std::to_string(m.n_folds) + "]");

    const NetworkConfig nc = cfg.network_config();
    const Timepoint target = cfg.target_timepoint();
    std::vector<CaseRecord> tr, va;
    for (const auto& e : m.cases) {
        if (e.fold == fold) {
            if (e.timepoint != target)
                continue;  // validation scores the task's own timepoint only
            CaseRecord c = load_case(e);
            complete_for_network(c, nc);
            va.push_back(std::move(c));
            continue;
        }
        const bool wanted = cfg.training_data == TrainingData::both ||
                            (cfg.training_data == TrainingData::pre_rt
                                 ? e.timepoint == Timepoint::pre_rt
                                 : e.timepoint == Timepoint::mid_rt);
        if (!wanted)
            continue;
        CaseRecord c = load_case(e);
        complete_for_network(c, nc);
        tr.push_back(std::move(c));
    }
    if (tr.empty())
        throw ConfigError("train: no training cases left after the timepoint/fold selection");

    BestOfRuns best = train_with_restarts(nc, tr, va, cfg.train, cfg.train_options());

    fs::create_directories(out_dir);
    TrainOutcome outcome;
    outcome.checkpoint_prefix = (fs::path(out_dir) / ("fold" + std::to_string(fold))).string();
    outcome.best_epoch = best.result.best_epoch;
    outcome.best_val = best.result.best_val;
    outcome.seed = best.seed;

    CheckpointMeta meta;
    meta.epoch = best.result.best_epoch;
    meta.val_dsc_agg = best.result.best_val;
    meta.seed = best.seed;
    meta.config_digest = config_digest(nc, cfg.train);
    save_checkpoint(outcome.checkpoint_prefix, best.net, meta);
    return outcome;
}

namespace {

/// Label cleanup per the config. Prior-driven removal uses the case's own
/// prior masks, never zero substitutes, so missing priors are an error.
LabelMap apply_postprocess(const LabelMap& labels, const PostprocessConfig& pp,
                           const CaseRecord& c) {
    LabelMap r = labels;
    if (pp.remove_small_components)
        r = remove_small(r, pp.min_component_cm3, pp.connectivity);
    if (pp.prior_driven_removal) {
        if (!c.prior_gtvp.has_value() || !c.prior_gtvn.has_value())
            throw DataError("case '" + c.case_id +
                            "': prior-driven removal needs the prior GTV masks");
        r = mpdr_filter(r, *c.prior_gtvp, *c.prior_gtvn, pp.prior_match_union, pp.connectivity);
    }
    return r;
}

std::string prediction_path(const std::string& dir, const std::string& case_id) {
    return (fs::path(dir) / (case_id + ".nii")).string();
}

}  // namespace

void cmd_infer(const PipelineConfig& cfg, const std::string& manifest_path,
               std::vector<std::string> model_prefixes, const std::string& out_dir) {
    cfg.validate();
    const Manifest m = load_manifest(manifest_path);
    if (model_prefixes.empty())
        model_prefixes = cfg.models;
    if (model_prefixes.empty())
        throw ConfigError("infer: no model checkpoints given (pass --model or set models in "
                          "the config)");

    const NetworkConfig nc = cfg.network_config();
    const std::string want = config_digest(nc, cfg.train);
    std::vector<NetworkF> nets;
    nets.reserve(model_prefixes.size());
    for (const auto& prefix : model_prefixes) {
        auto [net, meta] = load_checkpoint(prefix, nc);
        if (meta.config_digest != want)
            throw ConfigError("infer: checkpoint '" + prefix +
                              "' was trained under a different configuration");
        nets.push_back(std::move(net));
    }
    std::vector<PatchPredictor> preds;
    preds.reserve(nets.size());
    for (const auto& n : nets)
        preds.push_back(network_predictor(n));

    fs::create_directories(out_dir);
    const Timepoint target = cfg.target_timepoint();
    const bool needs_priors = network_needs_priors(nc);
    const bool needs_prior_image = network_needs_prior_image(nc);
    bool any = false;
    for (const auto& e : m.cases) {
        if (e.timepoint != target)
            continue;
        CaseRecord c = load_case(e);
        const CaseRecord raw = c;  // postprocess sees the unsubstituted priors
        complete_for_network(c, nc);
        const EnsembleResult res =
            ensemble_predict(preds, needs_priors, c, cfg.window, needs_prior_image);
        const LabelMap cleaned = apply_postprocess(res.labels, cfg.postprocess, raw);
        write_nifti(cleaned, prediction_path(out_dir, e.case_id));
        any = true;
    }
    if (!any)
        throw DataError(std::string("infer: manifest has no ") + to_string(target) + " cases");
}

void cmd_postprocess(const PipelineConfig& cfg, const std::string& manifest_path,
                     const std::string& pred_dir, const std::string& out_dir) {
    cfg.validate();
    const Manifest m = load_manifest(manifest_path);
    fs::create_directories(out_dir);
    const Timepoint target = cfg.target_timepoint();
    bool any = false;
    for (const auto& e : m.cases) {
        if (e.timepoint != target)
            continue;
        const std::string in_path = prediction_path(pred_dir, e.case_id);
        if (!fs::exists(in_path))
            throw DataError("postprocess: no prediction for case '" + e.case_id + "' at " +
                            in_path);
        CaseRecord c;
        c.case_id = e.case_id;
        if (cfg.postprocess.prior_driven_removal) {
            if (!e.prior_gtvp.empty()) c.prior_gtvp = read_labelmap(e.prior_gtvp);
            if (!e.prior_gtvn.empty()) c.prior_gtvn = read_labelmap(e.prior_gtvn);
        }
        const LabelMap cleaned = apply_postprocess(read_labelmap(in_path), cfg.postprocess, c);
        write_nifti(cleaned, prediction_path(out_dir, e.case_id));
        any = true;
    }
    if (!any)
        throw DataError(std::string("postprocess: manifest has no ") + to_string(target) +
                        " cases");
}

std::string cmd_evaluate(const PipelineConfig& cfg, const std::string& manifest_path,
                         const std::string& pred_dir, const std::string& report_path) {
    cfg.validate();
    const Manifest m = load_manifest(manifest_path);
    const Timepoint target = cfg.target_timepoint();
    std::vector<CaseMetrics> metrics;
    for (const auto& e : m.cases) {
        if (e.timepoint != target || e.ground_truth.empty())
            continue;
        const std::string pp = prediction_path(pred_dir, e.case_id);
        if (!fs::exists(pp))
            throw DataError("evaluate: no prediction for case '" + e.case_id + "' at " + pp);
        metrics.push_back(case_metrics(e.case_id, read_labelmap(pp), read_labelmap(e.ground_truth)));
    }
    if (metrics.empty())
        throw DataError(std::string("evaluate: manifest has no ") + to_string(target) +
                        " cases with ground truth");
    const std::string report = metrics_report(metrics);
    spew(report_path, report);
    return report;
}

CompareOutcome cmd_compare(const std::vector<std::string>& reports_a,
                           const std::vector<std::string>& reports_b,
                           const BootstrapConfig& cfg) {
    const auto load_side = [](const std::vector<std::string>& paths) {
        if (paths.empty())
            throw ConfigError("compare: each side needs at least one metrics report");
        std::vector<std::vector<CaseMetrics>> side;
        side.reserve(paths.size());
        for (const auto& p : paths)
            side.push_back(parse_metrics_report(slurp(p)));
        return side;
    };
    const auto a = load_side(reports_a);
    const auto b = load_side(reports_b);
    const BootstrapResult r = bootstrap_compare(a, b, cfg);

    CompareOutcome out;
    out.win_a = r.win_a;
    out.win_b = r.win_b;
    out.significant = r.significant;
    std::ostringstream ss;
    ss << "bootstrap: " << cfg.n_iter << " iterations, " << cfg.n_cases
       << " cases per resample, seed " << cfg.seed << "\n";
    char line[96];
    std::snprintf(line, sizeof line, "win fraction A: %.4f\n", r.win_a);
    ss << line;
    std::snprintf(line, sizeof line, "win fraction B: %.4f\n", r.win_b);
    ss << line;
    if (r.significant)
        ss << "verdict: " << (r.win_a >= r.win_b ? "A" : "B") << " is better at the "
           << cfg.threshold << " level\n";
    else
        ss << "verdict: no significant difference at the " << cfg.threshold << " level\n";
    out.text = ss.str();
    return out;
}

}  // namespace longiseg
