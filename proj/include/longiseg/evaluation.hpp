#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "longiseg/volume.hpp"

namespace longiseg {

/// Overlap counts for one foreground class on one case.
struct ClassCounts {
    std::int64_t intersection = 0;  // |pred ∩ truth|
    std::int64_t pred = 0;          // |pred|
    std::int64_t truth = 0;         // |truth|
};

/// Per-case evaluation record; index 0 holds GTVp (class 1), index 1 GTVn.
struct CaseMetrics {
    std::string case_id;
    std::array<ClassCounts, 2> counts;
};

/// Dice from counts: 2I/(P+T), or nullopt when P+T = 0 (nothing predicted,
/// nothing to find — the case carries no signal for this class).
std::optional<double> dice_from(const ClassCounts& c);

/// Dice between two label maps for one class (1 or 2). Grids must match.
std::optional<double> dice(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls);

/// Count overlaps for both classes on one case.
CaseMetrics case_metrics(const std::string& case_id, const LabelMap& pred, const LabelMap& gt);

/// Aggregated Dice: intersections and set sizes pooled over every case
/// before the ratio (the challenge convention, not a mean of per-case
/// values). nullopt when the pooled denominator is zero.
std::optional<double> dsc_agg(const std::vector<CaseMetrics>& cases, std::uint8_t cls);

/// Mean of the two per-class aggregated Dice values. Classes with an empty
/// pooled denominator drop out of the mean; nullopt when both are empty.
std::optional<double> average_dsc_agg(const std::vector<CaseMetrics>& cases);

/// Aggregated Dice with counts pooled across both classes as well —
/// reported alongside the per-class mean since the convention is ambiguous.
std::optional<double> dsc_agg_all_classes(const std::vector<CaseMetrics>& cases);

struct BootstrapResult {
    double win_a = 0.0;  // fraction of iterations where A strictly exceeds B
    double win_b = 0.0;
    bool significant = false;  // max(win_a, win_b) >= threshold
};

struct BootstrapConfig {
    int n_iter = 10000;
    int n_cases = 30;  // resample size per iteration
    double threshold = 0.95;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Paired bootstrap over case resamples: each iteration draws `n_cases`
/// case ids with replacement, pools DSC_agg per model on the resample,
/// averages across each configuration's models, and counts which
/// configuration strictly exceeds the other. Ties count for neither side.
/// `a` and `b` hold one metrics list per model; every model in both
/// configurations must cover the same cases in the same order. Iterations
/// run from pre-generated per-iteration seeds, so the outcome is identical
/// at any worker count.
BootstrapResult bootstrap_compare(const std::vector<std::vector<CaseMetrics>>& a,
                                  const std::vector<std::vector<CaseMetrics>>& b,
                                  const BootstrapConfig& cfg);

/// Render one model's metrics as structured text (JSON with stable key
/// order): one record per case with raw counts and per-class Dice, then a
/// summary block with the aggregated values.
std::string metrics_report(const std::vector<CaseMetrics>& cases);

/// Parse a report produced by metrics_report back into records.
std::vector<CaseMetrics> parse_metrics_report(const std::string& text);

}  // namespace longiseg
