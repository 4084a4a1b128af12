#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "longiseg/error.hpp"
#include "longiseg/evaluation.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/random.hpp"
#include "longiseg/training.hpp"
#include "longiseg/weights.hpp"

namespace longiseg {

namespace {

/// Per-case tensors prepared once so the epoch loop only crops.
struct PreparedCase {
    const CaseRecord* rec = nullptr;
    TensorF image;  // {1 or 2, nz, ny, nx}: scan (+ registered prior scan)
    TensorF masks;  // {1 or 3, nz, ny, nx}: ground truth (+ gtvp, gtvn priors)
};

void shuffle_indices(std::vector<std::size_t>& order, std::mt19937_64& g) {
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[std::size_t(uniform_below(g, std::int64_t(i)))]);
}

/// Extract channel `c` of a {C, pz, py, px} crop as a fresh {1,1,pz,py,px}
/// batch slot buffer appended to `dst`.
void append_channel(const TensorF& crop, std::int64_t c, std::vector<float>& dst) {
    const Shape& s = crop.shape();
    const std::int64_t pvox = s[1] * s[2] * s[3];
    const auto& d = crop.data();
    dst.insert(dst.end(), d.begin() + c * pvox, d.begin() + (c + 1) * pvox);
}

double validate_pass(NetworkF& net, bool needs_priors, bool needs_prior_image,
                     const std::vector<const CaseRecord*>& val, const SlidingWindowConfig& sw) {
    std::vector<CaseMetrics> metrics;
    const auto predictor = network_predictor(net);
    for (const CaseRecord* c : val) {
        const auto probs = sliding_window_predict(predictor, needs_priors, *c, sw,
                                                  needs_prior_image);
        metrics.push_back(case_metrics(c->case_id, argmax_labels(probs), *c->ground_truth));
    }
    const auto score = average_dsc_agg(metrics);
    return score.has_value() ? *score : std::numeric_limits<double>::quiet_NaN();
}

std::vector<std::vector<float>> snapshot_parameters(const NetworkF& net) {
    std::vector<std::vector<float>> snap;
    snap.reserve(net.named.size());
    for (const auto& [name, p] : net.named)
        snap.push_back(p.data());
    return snap;
}

void fnv_mix(std::uint64_t& h, const std::string& s) {
    for (const unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void TrainOptions::validate() const {
    if (task != 1 && task != 2)
        throw ConfigError("train: task must be 1 or 2, got " + std::to_string(task));
    if (val_interval < 1)
        throw ConfigError("train: val_interval must be >= 1");
    val_window.validate();
}

void assign_parameters(NetworkF& net, const std::vector<std::vector<float>>& weights) {
    if (weights.size() != net.named.size())
        throw UsageError("assign_parameters: snapshot holds " + std::to_string(weights.size()) +
                         " tensors, network has " + std::to_string(net.named.size()));
    for (std::size_t i = 0; i < weights.size(); ++i) {
        auto& p = net.named[i].second;
        if (weights[i].size() != p.data().size())
            throw UsageError("assign_parameters: size mismatch at '" + net.named[i].first + "'");
        p.data() = weights[i];
    }
}

TrainResult train(NetworkF& net, const std::vector<CaseRecord>& cases,
                  const std::vector<CaseRecord>& val_cases, const TrainConfig& cfg,
                  const TrainOptions& opt) {
    cfg.validate();
    opt.validate();
    if (cases.empty())
        throw ConfigError("train: the training set is empty");
    if (net.config.deep_supervision_levels != 4)
        throw ConfigError("train: the compound loss drives exactly 4 supervision heads, "
                          "network has " +
                          std::to_string(net.config.deep_supervision_levels));

    const bool needs_priors = network_needs_priors(net.config);
    const bool needs_prior_image = network_needs_prior_image(net.config);
    auto check_case = [&](const CaseRecord& c, const char* role) {
        c.validate();
        if (!c.ground_truth.has_value())
            throw UsageError(std::string("train: ") + role + " case '" + c.case_id +
                             "' has no ground truth");
        if (needs_priors && (!c.prior_gtvp.has_value() || !c.prior_gtvn.has_value()))
            throw UsageError(std::string("train: ") + role + " case '" + c.case_id +
                             "' lacks prior masks; supply all-zero masks when none exist");
        if (needs_prior_image && !c.prior_image.has_value())
            throw UsageError(std::string("train: ") + role + " case '" + c.case_id +
                             "' lacks the registered prior image; supply an all-zero volume "
                             "when none exists");
    };
    for (const auto& c : cases)
        check_case(c, "training");

    // Validation scans of the task's own timepoint only.
    const Timepoint want_tp = opt.task == 1 ? Timepoint::pre_rt : Timepoint::mid_rt;
    std::vector<const CaseRecord*> val;
    for (const auto& c : val_cases)
        if (c.timepoint == want_tp) {
            check_case(c, "validation");
            val.push_back(&c);
        }

    std::vector<PreparedCase> prep;
    prep.reserve(cases.size());
    {
        NoGradGuard ng;
        for (const auto& c : cases) {
            PreparedCase p;
            p.rec = &c;
            p.image = needs_prior_image
                          ? concat(std::vector<TensorF>{volume_to_tensor(c.image),
                                                        volume_to_tensor(*c.prior_image)},
                                   0)
                          : volume_to_tensor(c.image);
            if (needs_priors)
                p.masks = concat(std::vector<TensorF>{labels_to_tensor(*c.ground_truth),
                                                      labels_to_tensor(*c.prior_gtvp),
                                                      labels_to_tensor(*c.prior_gtvn)},
                                 0);
            else
                p.masks = labels_to_tensor(*c.ground_truth);
            prep.push_back(std::move(p));
        }
    }

    auto params = net.parameters();
    auto state = OptimizerState<float>::init(params);
    std::mt19937_64 rng(cfg.seed);
    const Index3 psz = cfg.patch.size;
    const std::int64_t pvox = psz[0] * psz[1] * psz[2];

    TrainResult res;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr);

        // One epoch = patches_per_sample draws from every case, shuffled.
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < prep.size(); ++i)
            for (int k = 0; k < cfg.patches_per_sample; ++k)
                order.push_back(i);
        shuffle_indices(order, rng);

        double loss_sum = 0.0;
        std::int64_t steps = 0;
        for (std::size_t at = 0; at < order.size(); at += std::size_t(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), at + std::size_t(cfg.batch_size));
            const std::int64_t B = std::int64_t(end - at);

            std::vector<float> xb, lb, pb, nb;
            xb.reserve(std::size_t(B * pvox));
            lb.reserve(std::size_t(B * pvox));
            {
                NoGradGuard ng;
                for (std::size_t bi = at; bi < end; ++bi) {
                    const PreparedCase& pc = prep[order[bi]];
                    const Index3 center =
                        sample_patch_center(*pc.rec->ground_truth, cfg.patch, rng);
                    TensorF img = crop_patch(pc.image, center, psz);
                    TensorF msk = crop_patch(pc.masks, center, psz);
                    auto aug = augment(img, msk, cfg.augment, rng);
                    append_channel(aug.first, 0, xb);
                    if (needs_prior_image)
                        append_channel(aug.first, 1, xb);
                    append_channel(aug.second, 0, lb);
                    if (needs_priors) {
                        append_channel(aug.second, 1, pb);
                        append_channel(aug.second, 2, nb);
                    }
                }
            }
            const std::int64_t ci = needs_prior_image ? 2 : 1;
            const Shape bshape{B, 1, psz[2], psz[1], psz[0]};
            TensorF x = TensorF::from_data({B, ci, psz[2], psz[1], psz[0]}, std::move(xb));
            TensorF labels = TensorF::from_data(bshape, std::move(lb));
            TensorF gtvp, gtvn;
            if (needs_priors) {
                gtvp = TensorF::from_data(bshape, std::move(pb));
                gtvn = TensorF::from_data(bshape, std::move(nb));
            }

            if (net.config.in_channels == ci + 2)
                x = concat(std::vector<TensorF>{x, gtvp, gtvn}, 1);
            auto trace = net.config.attention_enabled ? forward_trace(net, x, gtvp, gtvn)
                                                      : forward_trace(net, x);
            TensorF loss = compound_loss(trace.logits, labels);

            for (auto& p : params)
                p.zero_grad();
            loss.backward();
            if (cfg.grad_clip > 0.0)
                clip_gradients(params, cfg.grad_clip);
            adamw_step(params, state, cfg, lr);

            const double lv = double(loss.item());
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(res.step_losses.size()));
            res.step_losses.push_back(lv);
            loss_sum += lv;
            ++steps;
        }

        EpochStats st;
        st.epoch = epoch;
        st.mean_loss = steps > 0 ? loss_sum / double(steps) : 0.0;
        st.lr = lr;
        const bool run_val = !val.empty() && ((epoch + 1) % opt.val_interval == 0 ||
                                              epoch == cfg.epochs - 1);
        if (run_val) {
            st.val_dsc_agg = validate_pass(net, needs_priors, needs_prior_image, val,
                                           opt.val_window);
            if (!std::isnan(st.val_dsc_agg) &&
                (std::isnan(res.best_val) || st.val_dsc_agg > res.best_val)) {
                res.best_val = st.val_dsc_agg;
                res.best_epoch = epoch;
                res.best_weights = snapshot_parameters(net);
            }
        }
        res.history.push_back(st);
    }

    // Nothing scored (no eligible scans, or every score undefined): keep the
    // final weights so the caller always gets a usable model.
    if (res.best_epoch < 0) {
        res.best_epoch = cfg.epochs - 1;
        res.best_weights = snapshot_parameters(net);
    }
    return res;
}

BestOfRuns train_with_restarts(const NetworkConfig& net_config,
                               const std::vector<CaseRecord>& cases,
                               const std::vector<CaseRecord>& val_cases, const TrainConfig& cfg,
                               const TrainOptions& opt) {
    cfg.validate();
    BestOfRuns best;
    bool have = false;
    for (int r = 0; r < cfg.repeats; ++r) {
        const std::uint64_t seed = cfg.seed + std::uint64_t(r);
        TrainConfig run_cfg = cfg;
        run_cfg.seed = seed;
        NetworkF net = build<float>(net_config, seed);
        TrainResult res = train(net, cases, val_cases, run_cfg, opt);
        const bool better =
            !have || (std::isnan(best.result.best_val) && !std::isnan(res.best_val)) ||
            (!std::isnan(res.best_val) && res.best_val > best.result.best_val);
        if (better) {
            assign_parameters(net, res.best_weights);
            best.net = std::move(net);
            best.result = std::move(res);
            best.seed = seed;
            have = true;
        }
    }
    return best;
}

std::string config_digest(const NetworkConfig& n, const TrainConfig& c) {
    std::ostringstream ss;
    ss << "in_channels=" << n.in_channels << "\ninit_filters=" << n.init_filters
       << "\nblocks=";
    for (const int b : n.blocks_per_level)
        ss << b << ",";
    ss << "\nn_levels=" << n.n_levels << "\nds_levels=" << n.deep_supervision_levels
       << "\nattention=" << n.attention_enabled << "\nmlp_ratio=" << n.mlp_reduction_ratio
       << "\nspatial_kernel=" << n.spatial_attention_kernel << "\nlr=" << fmt_double(c.lr)
       << "\nweight_decay=" << fmt_double(c.weight_decay) << "\nbeta1=" << fmt_double(c.beta1)
       << "\nbeta2=" << fmt_double(c.beta2) << "\nadam_eps=" << fmt_double(c.adam_eps)
       << "\nepochs=" << c.epochs << "\npatches_per_sample=" << c.patches_per_sample
       << "\nbatch_size=" << c.batch_size << "\ngrad_clip=" << fmt_double(c.grad_clip)
       << "\nrepeats=" << c.repeats << "\npatch=" << c.patch.size[0] << "x" << c.patch.size[1]
       << "x" << c.patch.size[2] << "\nclass_probs=" << fmt_double(c.patch.class_probs[0])
       << "," << fmt_double(c.patch.class_probs[1]) << ","
       << fmt_double(c.patch.class_probs[2]) << "\naffine_prob=" << fmt_double(c.augment.affine_prob)
       << "\nrotation=" << fmt_double(c.augment.rotation_degrees)
       << "\nzoom=" << fmt_double(c.augment.zoom_min) << ".." << fmt_double(c.augment.zoom_max)
       << "\nflip=" << c.augment.flip << "\nnoise=" << fmt_double(c.augment.noise_prob) << ","
       << fmt_double(c.augment.noise_std_min) << "," << fmt_double(c.augment.noise_std_max)
       << "\nblur=" << fmt_double(c.augment.blur_prob) << ","
       << fmt_double(c.augment.blur_sigma_min) << "," << fmt_double(c.augment.blur_sigma_max)
       << "\n";

    std::uint64_t h = 14695981039346656037ULL;  // FNV-1a offset basis
    fnv_mix(h, ss.str());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_checkpoint(const std::string& prefix, const NetworkF& net,
                     const CheckpointMeta& meta) {
    save_weights(net, prefix + ".weights");
    nlohmann::ordered_json j;
    j["epoch"] = meta.epoch;
    if (std::isnan(meta.val_dsc_agg))
        j["val_dsc_agg"] = nullptr;
    else
        j["val_dsc_agg"] = meta.val_dsc_agg;
    j["seed"] = meta.seed;
    j["config_digest"] = meta.config_digest;
    std::ofstream out(prefix + ".json", std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + prefix + ".json' for writing");
    out << j.dump(2) << "\n";
    if (!out.flush())
        throw IoError("failed writing checkpoint sidecar '" + prefix + ".json'");
}

std::pair<NetworkF, CheckpointMeta> load_checkpoint(const std::string& prefix,
                                                    const NetworkConfig& net_config) {
    NetworkF net = load_weights<float>(prefix + ".weights", net_config);
    std::ifstream in(prefix + ".json");
    if (!in)
        throw IoError("cannot open checkpoint sidecar '" + prefix + ".json'");
    std::stringstream ss;
    ss << in.rdbuf();
    CheckpointMeta meta;
    try {
        const auto j = nlohmann::json::parse(ss.str());
        meta.epoch = j.at("epoch").get<int>();
        if (!j.at("val_dsc_agg").is_null())
            meta.val_dsc_agg = j.at("val_dsc_agg").get<double>();
        meta.seed = j.at("seed").get<std::uint64_t>();
        meta.config_digest = j.at("config_digest").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint sidecar '" + prefix + ".json': " + e.what());
    }
    return {std::move(net), std::move(meta)};
}

}  // namespace longiseg
