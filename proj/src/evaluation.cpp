#include "longiseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "longiseg/error.hpp"
#include "longiseg/random.hpp"
#include "longiseg/threading.hpp"

namespace longiseg {

namespace {

int class_slot(std::uint8_t cls) {
    if (cls != LabelMap::kGtvp && cls != LabelMap::kGtvn)
        throw UsageError("foreground class must be 1 (GTVp) or 2 (GTVn), got " +
                         std::to_string(int(cls)));
    return cls == LabelMap::kGtvp ? 0 : 1;
}

std::optional<double> ratio(std::int64_t inter, std::int64_t denom) {
    if (denom == 0)
        return std::nullopt;
    return 2.0 * double(inter) / double(denom);
}

/// Mean of the per-class pooled Dice values over one index resample;
/// classes with empty pooled denominators drop out, 0 when both are empty.
double resample_value(const std::vector<CaseMetrics>& model,
                      const std::vector<std::uint32_t>& picks) {
    std::array<std::int64_t, 2> inter{0, 0}, denom{0, 0};
    for (const std::uint32_t idx : picks)
        for (int s = 0; s < 2; ++s) {
            const ClassCounts& c = model[idx].counts[std::size_t(s)];
            inter[std::size_t(s)] += c.intersection;
            denom[std::size_t(s)] += c.pred + c.truth;
        }
    double sum = 0.0;
    int defined = 0;
    for (int s = 0; s < 2; ++s)
        if (denom[std::size_t(s)] > 0) {
            sum += 2.0 * double(inter[std::size_t(s)]) / double(denom[std::size_t(s)]);
            ++defined;
        }
    return defined > 0 ? sum / double(defined) : 0.0;
}

nlohmann::ordered_json counts_json(const ClassCounts& c) {
    nlohmann::ordered_json j;
    j["intersection"] = c.intersection;
    j["pred"] = c.pred;
    j["truth"] = c.truth;
    const auto d = dice_from(c);
    if (d.has_value())
        j["dice"] = *d;
    else
        j["dice"] = nullptr;
    return j;
}

ClassCounts counts_from_json(const nlohmann::json& j) {
    ClassCounts c;
    c.intersection = j.at("intersection").get<std::int64_t>();
    c.pred = j.at("pred").get<std::int64_t>();
    c.truth = j.at("truth").get<std::int64_t>();
    if (c.intersection < 0 || c.pred < 0 || c.truth < 0 ||
        c.intersection > std::min(c.pred, c.truth))
        throw FormatError("metrics report: counts violate 0 <= I <= min(P, T)");
    return c;
}

}  // namespace

std::optional<double> dice_from(const ClassCounts& c) {
    return ratio(c.intersection, c.pred + c.truth);
}

std::optional<double> dice(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
    class_slot(cls);
    if (!same_geometry(pred, gt))
        throw UsageError("dice: prediction and ground truth must share one grid");
    std::int64_t inter = 0, p = 0, t = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool in_p = pred.data[i] == cls;
        const bool in_t = gt.data[i] == cls;
        inter += in_p && in_t;
        p += in_p;
        t += in_t;
    }
    return ratio(inter, p + t);
}

CaseMetrics case_metrics(const std::string& case_id, const LabelMap& pred, const LabelMap& gt) {
    if (!same_geometry(pred, gt))
        throw UsageError("case_metrics: prediction and ground truth must share one grid");
    CaseMetrics m;
    m.case_id = case_id;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const std::uint8_t pv = pred.data[i], tv = gt.data[i];
        for (int s = 0; s < 2; ++s) {
            const std::uint8_t cls = s == 0 ? LabelMap::kGtvp : LabelMap::kGtvn;
            ClassCounts& c = m.counts[std::size_t(s)];
            c.intersection += pv == cls && tv == cls;
            c.pred += pv == cls;
            c.truth += tv == cls;
        }
    }
    return m;
}

std::optional<double> dsc_agg(const std::vector<CaseMetrics>& cases, std::uint8_t cls) {
    const int s = class_slot(cls);
    std::int64_t inter = 0, denom = 0;
    for (const auto& m : cases) {
        inter += m.counts[std::size_t(s)].intersection;
        denom += m.counts[std::size_t(s)].pred + m.counts[std::size_t(s)].truth;
    }
    return ratio(inter, denom);
}

std::optional<double> average_dsc_agg(const std::vector<CaseMetrics>& cases) {
    const auto p = dsc_agg(cases, LabelMap::kGtvp);
    const auto n = dsc_agg(cases, LabelMap::kGtvn);
    if (p && n)
        return (*p + *n) / 2.0;
    if (p)
        return p;
    return n;
}

std::optional<double> dsc_agg_all_classes(const std::vector<CaseMetrics>& cases) {
    std::int64_t inter = 0, denom = 0;
    for (const auto& m : cases)
        for (const auto& c : m.counts) {
            inter += c.intersection;
            denom += c.pred + c.truth;
        }
    return ratio(inter, denom);
}

void BootstrapConfig::validate() const {
    if (n_iter < 1)
        throw ConfigError("bootstrap: n_iter must be >= 1");
    if (n_cases < 1)
        throw ConfigError("bootstrap: n_cases must be >= 1");
    if (!(threshold > 0.0) || threshold > 1.0)
        throw ConfigError("bootstrap: threshold must lie in (0, 1]");
}

BootstrapResult bootstrap_compare(const std::vector<std::vector<CaseMetrics>>& a,
                                  const std::vector<std::vector<CaseMetrics>>& b,
                                  const BootstrapConfig& cfg) {
    cfg.validate();
    if (a.empty() || b.empty())
        throw UsageError("bootstrap_compare: each configuration needs at least one model");
    const std::vector<CaseMetrics>& ref = a.front();
    if (ref.empty())
        throw UsageError("bootstrap_compare: empty case list");
    auto check_model = [&](const std::vector<CaseMetrics>& m) {
        if (m.size() != ref.size())
            throw UsageError("bootstrap_compare: models cover different case counts");
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i].case_id != ref[i].case_id)
                throw UsageError("bootstrap_compare: case sets differ at '" + m[i].case_id +
                                 "' vs '" + ref[i].case_id + "'");
    };
    for (const auto& m : a)
        check_model(m);
    for (const auto& m : b)
        check_model(m);

    // One seed per iteration up front: any worker split sees the same draws.
    std::mt19937_64 master(cfg.seed);
    std::vector<std::uint64_t> seeds(std::size_t(cfg.n_iter));
    for (auto& s : seeds)
        s = master();

    std::vector<std::int8_t> outcome(std::size_t(cfg.n_iter), 0);
    parallel_for(cfg.n_iter, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<std::uint32_t> picks(std::size_t(cfg.n_cases));
        for (std::int64_t it = lo; it < hi; ++it) {
            std::mt19937_64 g(seeds[std::size_t(it)]);
            for (auto& p : picks)
                p = std::uint32_t(uniform_below(g, std::int64_t(ref.size())));
            auto config_value = [&](const std::vector<std::vector<CaseMetrics>>& models) {
                double sum = 0.0;
                for (const auto& m : models)
                    sum += resample_value(m, picks);
                return sum / double(models.size());
            };
            const double va = config_value(a);
            const double vb = config_value(b);
            outcome[std::size_t(it)] = va > vb ? 1 : (vb > va ? 2 : 0);
        }
    });

    std::int64_t wins_a = 0, wins_b = 0;
    for (const auto o : outcome) {
        wins_a += o == 1;
        wins_b += o == 2;
    }
    BootstrapResult res;
    res.win_a = double(wins_a) / double(cfg.n_iter);
    res.win_b = double(wins_b) / double(cfg.n_iter);
    res.significant = std::max(res.win_a, res.win_b) >= cfg.threshold;
    return res;
}

std::string metrics_report(const std::vector<CaseMetrics>& cases) {
    nlohmann::ordered_json root;
    root["cases"] = nlohmann::ordered_json::array();
    for (const auto& m : cases) {
        nlohmann::ordered_json rec;
        rec["case_id"] = m.case_id;
        rec["gtvp"] = counts_json(m.counts[0]);
        rec["gtvn"] = counts_json(m.counts[1]);
        root["cases"].push_back(std::move(rec));
    }
    nlohmann::ordered_json summary;
    auto put = [&](const char* key, std::optional<double> v) {
        if (v.has_value())
            summary[key] = *v;
        else
            summary[key] = nullptr;
    };
    put("dsc_agg_gtvp", dsc_agg(cases, LabelMap::kGtvp));
    put("dsc_agg_gtvn", dsc_agg(cases, LabelMap::kGtvn));
    put("average_dsc_agg", average_dsc_agg(cases));
    put("dsc_agg_pooled_classes", dsc_agg_all_classes(cases));
    root["summary"] = std::move(summary);
    return root.dump(2) + "\n";
}

std::vector<CaseMetrics> parse_metrics_report(const std::string& text) {
    try {
        const auto root = nlohmann::json::parse(text);
        std::vector<CaseMetrics> cases;
        for (const auto& rec : root.at("cases")) {
            CaseMetrics m;
            m.case_id = rec.at("case_id").get<std::string>();
            m.counts[0] = counts_from_json(rec.at("gtvp"));
            m.counts[1] = counts_from_json(rec.at("gtvn"));
            cases.push_back(std::move(m));
        }
        return cases;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("metrics report: ") + e.what());
    }
}

}  // namespace longiseg
