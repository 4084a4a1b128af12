// Command-line front end: every subcommand is a thin wrapper over the
// pipeline library, so a run is reproducible from (config, seed) alone.
//
// Exit codes: 0 success, 2 configuration/usage problems, 3 data problems
// (missing or corrupt files), 4 internal numerical failures.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "longiseg/error.hpp"
#include "longiseg/pipeline.hpp"
#include "longiseg/threading.hpp"

namespace {

using namespace longiseg;

struct CommonArgs {
    std::string config;
    std::string manifest;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

// Applied while parsing, so the pool is sized before any command runs.
void add_threads(CLI::App* sub) {
    sub->add_option_function<int>(
        "--threads", [](int n) { set_thread_count(n); },
        "worker threads (0 = hardware default)");
}

void add_seed(CLI::App* sub, CommonArgs& a) {
    sub->add_option("--seed", a.seed, "override the config's seed")
        ->each([&](const std::string&) { a.seed_set = true; });
}

PipelineConfig config_with_seed(const CommonArgs& a) {
    PipelineConfig cfg = load_pipeline_config(a.config);
    if (a.seed_set) {
        cfg.train.seed = a.seed;
        cfg.validate();
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Longitudinal GTV segmentation on registered pre-/mid-RT MRI"};
    app.require_subcommand(1);

    CommonArgs a;
    int fold = 1;
    std::vector<std::string> models;
    std::string pred_dir, report_path;
    std::vector<std::string> reports_a, reports_b;
    BootstrapConfig boot;
    FixtureConfig fix;
    std::int64_t fixture_size = 32;

    CLI::App* pre = app.add_subcommand("preprocess",
                                       "resample to the target spacing and normalize");
    pre->add_option("--config", a.config, "pipeline config JSON")->required();
    pre->add_option("--manifest", a.manifest, "dataset manifest JSON")->required();
    pre->add_option("--out", a.out, "output directory")->required();
    add_threads(pre);
    pre->callback([&] { cmd_preprocess(config_with_seed(a), a.manifest, a.out); });

    CLI::App* tr = app.add_subcommand("train", "train one cross-validation fold");
    tr->add_option("--config", a.config, "pipeline config JSON")->required();
    tr->add_option("--manifest", a.manifest, "dataset manifest JSON")->required();
    tr->add_option("--fold", fold, "held-out fold (1-based)")->required();
    tr->add_option("--out", a.out, "checkpoint directory")->required();
    add_seed(tr, a);
    add_threads(tr);
    tr->callback([&] {
        const TrainOutcome r = cmd_train(config_with_seed(a), a.manifest, fold, a.out);
        std::printf("checkpoint %s: best epoch %d, validation DSC_agg %.4f (seed %llu)\n",
                    r.checkpoint_prefix.c_str(), r.best_epoch, r.best_val,
                    static_cast<unsigned long long>(r.seed));
    });

    const auto add_predict = [&](const char* name, const char* help) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", a.config, "pipeline config JSON")->required();
        sub->add_option("--manifest", a.manifest, "dataset manifest JSON")->required();
        sub->add_option("--model", models, "checkpoint prefix (repeatable)");
        sub->add_option("--out", a.out, "prediction directory")->required();
        add_threads(sub);
        sub->callback([&] { cmd_infer(config_with_seed(a), a.manifest, models, a.out); });
        return sub;
    };
    add_predict("infer", "predict the task's scans with one or more checkpoints");
    add_predict("ensemble", "predict with an averaged checkpoint ensemble");

    CLI::App* post = app.add_subcommand("postprocess",
                                        "re-run label cleanup on existing predictions");
    post->add_option("--config", a.config, "pipeline config JSON")->required();
    post->add_option("--manifest", a.manifest, "dataset manifest JSON")->required();
    post->add_option("--pred", pred_dir, "directory with <case_id>.nii predictions")->required();
    post->add_option("--out", a.out, "output directory")->required();
    add_threads(post);
    post->callback([&] { cmd_postprocess(config_with_seed(a), a.manifest, pred_dir, a.out); });

    CLI::App* ev = app.add_subcommand("evaluate", "score predictions against ground truth");
    ev->add_option("--config", a.config, "pipeline config JSON")->required();
    ev->add_option("--manifest", a.manifest, "dataset manifest JSON")->required();
    ev->add_option("--pred", pred_dir, "directory with <case_id>.nii predictions")->required();
    ev->add_option("--report", report_path, "metrics report output path")->required();
    add_threads(ev);
    ev->callback([&] {
        const std::string text = cmd_evaluate(config_with_seed(a), a.manifest, pred_dir,
                                              report_path);
        std::fputs(text.c_str(), stdout);
    });

    CLI::App* cmp = app.add_subcommand("compare",
                                       "paired bootstrap between two sets of metrics reports");
    cmp->add_option("--a", reports_a, "metrics reports of configuration A")->required();
    cmp->add_option("--b", reports_b, "metrics reports of configuration B")->required();
    cmp->add_option("--iterations", boot.n_iter, "bootstrap iterations");
    cmp->add_option("--cases", boot.n_cases, "cases per resample");
    cmp->add_option("--threshold", boot.threshold, "significance threshold");
    cmp->add_option("--seed", boot.seed, "bootstrap seed");
    add_threads(cmp);
    cmp->callback([&] {
        const CompareOutcome r = cmd_compare(reports_a, reports_b, boot);
        std::fputs(r.text.c_str(), stdout);
    });

    CLI::App* fx = app.add_subcommand("fixtures", "generate a synthetic two-timepoint cohort");
    fx->add_option("--out", a.out, "output directory")->required();
    fx->add_option("--patients", fix.n_patients, "number of patients");
    fx->add_option("--size", fixture_size, "cube edge in voxels");
    fx->add_option("--spacing", fix.spacing, "voxel spacing in mm (three values)");
    fx->add_option("--folds", fix.n_folds, "cross-validation folds");
    fx->add_option("--noise", fix.noise_std, "image noise sigma");
    fx->add_option("--seed", fix.seed, "cohort seed");
    fx->callback([&] {
        fix.dims = {fixture_size, fixture_size, fixture_size};
        const Manifest m = generate_fixtures(a.out, fix);
        std::printf("wrote %zu cases (%d folds) to %s\n", m.cases.size(), m.n_folds,
                    a.out.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const UnsupportedError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
    return 0;
}
