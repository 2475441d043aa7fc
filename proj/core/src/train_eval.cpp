#include "pedrisk/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "pedrisk/error.hpp"

namespace pedrisk::train {

// ---------------------------------------------------------------------------
// Examples
// ---------------------------------------------------------------------------

model::Targets derive_targets(const PatientRecord& record, const growth::LmsTable& lms, int window_end_age_years) {
    model::Targets t;
    const auto points = growth_points(record);
    for (int k = 0; k < model::kHorizons; ++k) {
        const double target = (window_end_age_years + k + 1) * kDaysPerYear;
        const GrowthPoint* best = nullptr;
        double best_gap = kLabelToleranceDays + 1e-9;
        for (const auto& p : points) {
            if (!p.bmi) continue;
            const double gap = std::abs(p.age_days - target);
            if (gap < best_gap) {
                best_gap = gap;
                best = &p;
            }
        }
        if (best == nullptr) continue;
        try {
            const auto a = growth::assess(lms, record.sex, age_months(best->age_days), *best->bmi);
            t.mask[k] = true;
            t.bmi[k] = *best->bmi;
            t.obese[k] = a.label == growth::Label::obese;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::OutOfRange && e.code() != ErrorCode::UnknownSex &&
                e.code() != ErrorCode::NonPositiveInput) {
                throw;
            }
        }
    }
    return t;
}

namespace {

std::string race_name(const std::string& code) {
    if (code.empty()) return "unknown";
    if (code == "2106-3") return "white";
    if (code == "2054-5") return "black";
    if (code == "2028-9") return "asian";
    return "other";
}

std::string ethnicity_name(const std::string& code) {
    if (code == "2135-2") return "hispanic";
    if (code == "2186-5") return "non_hispanic";
    return "unknown";
}

std::string last_wfl_category(const PatientRecord& record, const growth::LmsTable& lms) {
    std::string category = "unknown";
    for (const auto& p : growth_points(record)) {
        if (age_months(p.age_days) >= 24) break;
        if (!p.weight_kg || !p.height_cm) continue;
        try {
            category = std::string(growth::to_string(
                growth::assess_weight_for_length(lms, record.sex, *p.height_cm, *p.weight_kg).label));
        } catch (const Error&) {
            // Outside the WFL length range; keep the previous category.
        }
    }
    return category;
}

}  // namespace

Strata strata_of(const CohortMember& member, const growth::LmsTable& lms) {
    const auto& r = member.record;
    return {{"sex", std::string(to_string(r.sex))},
            {"race", race_name(r.race)},
            {"ethnicity", ethnicity_name(r.ethnicity)},
            {"payer", r.insurance.empty() ? "unknown" : r.insurance},
            {"last_wfl", last_wfl_category(r, lms)},
            {"site", member.site.empty() ? "unknown" : member.site},
            {"index_year", std::to_string(member.index_year)}};
}

std::vector<LabeledExample> make_examples(const CohortMember& member, const vocab::FeatureRegistry& registry,
                                          const features::BinSchedule& schedule, const growth::LmsTable& lms,
                                          std::span<const int> windows) {
    std::vector<LabeledExample> out;
    std::optional<Strata> strata;
    for (int w : windows) {
        auto targets = derive_targets(member.record, lms, w);
        if (std::none_of(targets.mask.begin(), targets.mask.end(), [](bool m) { return m; })) continue;
        if (!strata) strata = strata_of(member, lms);
        LabeledExample ex;
        ex.patient_id = member.record.patient_id;
        ex.window_end_age_years = w;
        ex.sequence = features::build_sequence(member.record, registry, schedule, w);
        ex.demo = features::encode_demographics(member.record, w);
        ex.targets = targets;
        ex.strata = *strata;
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<model::Sample> samples_of(std::span<const LabeledExample> examples) {
    std::vector<model::Sample> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back({&e.sequence, &e.demo, &e.targets});
    return out;
}

// ---------------------------------------------------------------------------
// Split and balance
// ---------------------------------------------------------------------------

SplitIndices split(std::size_t cohort_size, std::uint64_t seed) {
    if (cohort_size < 20) throw Error(ErrorCode::TooSmall, "cohort needs at least 20 patients");
    std::vector<std::size_t> order(cohort_size);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(cohort_size)));
    const std::size_t n_train_all = cohort_size - n_test;
    const auto n_val = static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(n_train_all)));

    SplitIndices s;
    s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                 order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

std::vector<LabeledExample> undersample(std::vector<LabeledExample> train, double target_ratio, std::uint64_t seed) {
    if (!(target_ratio > 0)) throw Error(ErrorCode::InvalidConfig, "target_ratio must be > 0");
    std::vector<std::size_t> negatives;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto& t = train[i].targets;
        if (!t.mask[0]) continue;
        if (t.obese[0]) ++positives;
        else negatives.push_back(i);
    }
    if (positives == 0 || negatives.empty()) throw Error(ErrorCode::SingleClass, "undersampling needs both classes");
    const auto keep = static_cast<std::size_t>(std::floor(target_ratio * static_cast<double>(positives)));
    if (negatives.size() <= keep) return train;

    std::mt19937_64 rng(seed);
    std::shuffle(negatives.begin(), negatives.end(), rng);
    std::vector<bool> drop(train.size(), false);
    for (std::size_t j = keep; j < negatives.size(); ++j) drop[negatives[j]] = true;
    std::vector<LabeledExample> out;
    out.reserve(train.size() - (negatives.size() - keep));
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (!drop[i]) out.push_back(std::move(train[i]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

struct ClassCounts {
    std::int64_t pos = 0;
    std::int64_t neg = 0;
};

ClassCounts count_classes(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "scores and labels differ in length");
    ClassCounts c;
    for (int l : labels) (l != 0 ? c.pos : c.neg) += 1;
    if (c.pos == 0 || c.neg == 0) throw Error(ErrorCode::SingleClass, "AUROC needs both classes");
    return c;
}

bool both_classes(std::span<const int> labels) {
    bool pos = false, neg = false;
    for (int l : labels) (l != 0 ? pos : neg) = true;
    return pos && neg;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    const auto c = count_classes(scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Twice the rank sum of positives stays integral under average ranks, so
    // the result is the same integer ratio the pairwise count produces.
    std::int64_t twice_rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::int64_t group_pos = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            if (labels[order[j]] != 0) ++group_pos;
            ++j;
        }
        const auto first_rank = static_cast<std::int64_t>(i) + 1;
        const auto last_rank = static_cast<std::int64_t>(j);
        twice_rank_sum += group_pos * (first_rank + last_rank);
        i = j;
    }
    const std::int64_t twice_u = twice_rank_sum - c.pos * (c.pos + 1);
    return static_cast<double>(twice_u) / static_cast<double>(2 * c.pos * c.neg);
}

double auroc_brute_force(std::span<const double> scores, std::span<const int> labels) {
    const auto c = count_classes(scores, labels);
    std::int64_t twice_concordant = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 0) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j]) twice_concordant += 2;
            else if (scores[i] == scores[j]) twice_concordant += 1;
        }
    }
    return static_cast<double>(twice_concordant) / static_cast<double>(2 * c.pos * c.neg);
}

Interval bootstrap_ci(const MetricFn& metric, std::span<const double> scores, std::span<const int> labels, int reps,
                      std::uint64_t seed) {
    if (reps <= 0) throw Error(ErrorCode::InvalidConfig, "bootstrap reps must be > 0");
    if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "scores and labels differ in length");
    if (scores.size() < 10) throw Error(ErrorCode::TooSmall, "bootstrap needs at least 10 points");
    constexpr int kRedraws = 10;
    const std::size_t n = scores.size();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> s(n), values;
    std::vector<int> l(n);
    Interval out;
    for (int r = 0; r < reps; ++r) {
        bool ok = false;
        for (int attempt = 0; attempt <= kRedraws && !ok; ++attempt) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = pick(rng);
                s[i] = scores[k];
                l[i] = labels[k];
            }
            ok = both_classes(l);
        }
        if (!ok) {
            ++out.skipped;
            continue;
        }
        values.push_back(metric(s, l));
    }
    if (out.skipped * 2 > reps || values.empty()) {
        throw Error(ErrorCode::DegenerateResampling, std::to_string(out.skipped) + " of " + std::to_string(reps) +
                                                         " replicates had a single class");
    }
    std::sort(values.begin(), values.end());
    out.lo = vocab::quantile(values, 0.025);
    out.hi = vocab::quantile(values, 0.975);
    return out;
}

double conformal_interval(std::span<const double> residuals, double alpha) {
    if (!(alpha > 0 && alpha < 1)) throw Error(ErrorCode::OutOfRange, "alpha must be in (0, 1)");
    const std::size_t n = residuals.size();
    // The epsilon keeps exact products such as 5 * 0.5 from rounding up a rank.
    const double rank = std::ceil((static_cast<double>(n) + 1.0) * (1.0 - alpha) - 1e-9);
    if (rank > static_cast<double>(n)) {
        throw Error(ErrorCode::TooFewCalibrationPoints,
                    "need rank " + std::to_string(static_cast<long long>(rank)) + " of " + std::to_string(n) +
                        " residuals; the interval is unbounded");
    }
    std::vector<double> abs_res(residuals.begin(), residuals.end());
    for (auto& r : abs_res) r = std::abs(r);
    const auto k = static_cast<std::size_t>(std::max(rank, 1.0));
    std::nth_element(abs_res.begin(), abs_res.begin() + static_cast<std::ptrdiff_t>(k - 1), abs_res.end());
    return abs_res[k - 1];
}

double net_benefit(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (!(threshold > 0 && threshold < 1)) throw Error(ErrorCode::OutOfRange, "threshold must be in (0, 1)");
    if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "scores and labels differ in length");
    if (scores.empty()) return 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i] < threshold) continue;
        (labels[i] != 0 ? tp : fp) += 1;
    }
    const double n = static_cast<double>(scores.size());
    return static_cast<double>(tp) / n - static_cast<double>(fp) / n * (threshold / (1.0 - threshold));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

const CellMetrics& EvalReport::overall(int horizon) const {
    for (const auto& c : cells) {
        if (c.window == 0 && c.horizon == horizon) return c;
    }
    throw Error(ErrorCode::OutOfRange, "no pooled cell for horizon " + std::to_string(horizon));
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json group_json(const GroupMetric& g) {
    return {{"key", g.key}, {"value", g.value}, {"horizon", g.horizon}, {"n", g.n}, {"auroc", opt(g.auroc)}};
}

}  // namespace

std::string EvalReport::table() const {
    std::ostringstream os;
    os << "window|horizon|auroc|lo|hi|mae|half_width|nb20|nb40|nb60|n|prevalence\n";
    for (const auto& c : cells) {
        os << (c.window == 0 ? std::string("all") : "0-" + std::to_string(c.window)) << '|' << c.horizon << '|'
           << fmt(c.auroc) << '|' << (c.ci ? fmt(c.ci->lo) : "NA") << '|' << (c.ci ? fmt(c.ci->hi) : "NA") << '|'
           << fmt(c.mae) << '|' << fmt(c.half_width);
        for (double nb : c.net_benefit) os << '|' << fmt(nb);
        os << '|' << c.n << '|' << fmt(c.prevalence) << '\n';
    }
    return os.str();
}

void to_json(nlohmann::json& j, const EvalReport& r) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
        nlohmann::json nb = nlohmann::json::object();
        for (std::size_t i = 0; i < kNetBenefitThresholds.size(); ++i) {
            nb[std::to_string(static_cast<int>(std::lround(kNetBenefitThresholds[i] * 100)))] = c.net_benefit[i];
        }
        cells.push_back({{"window", c.window == 0 ? nlohmann::json("all") : nlohmann::json(c.window)},
                         {"horizon", c.horizon},
                         {"n", c.n},
                         {"prevalence", c.prevalence},
                         {"auroc", opt(c.auroc)},
                         {"auroc_ci", c.ci ? nlohmann::json::array({c.ci->lo, c.ci->hi}) : nlohmann::json(nullptr)},
                         {"bootstrap_skipped", c.ci ? c.ci->skipped : 0},
                         {"mae", c.mae},
                         {"conformal_half_width", c.half_width},
                         {"net_benefit", nb}});
    }
    nlohmann::json subgroups = nlohmann::json::array();
    for (const auto& g : r.subgroups) subgroups.push_back(group_json(g));
    nlohmann::json slices = nlohmann::json::array();
    for (const auto& g : r.slices) slices.push_back(group_json(g));
    nlohmann::json baseline = nlohmann::json::array();
    for (const auto& b : r.baseline_auroc) baseline.push_back(opt(b));
    j = {{"schema", "pedrisk.eval.v1"},
         {"metadata",
          {{"n_examples", r.n_examples},
           {"n_patients", r.n_patients},
           {"prevalence", r.prevalence},
           {"seed", r.seed},
           {"model_version", r.model_version}}},
         {"cells", cells},
         {"subgroups", subgroups},
         {"slices", slices},
         {"baseline_auroc", baseline}};
}

namespace {

struct Scored {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<double> abs_err;
};

Scored gather(std::span<const LabeledExample> test, const std::vector<std::array<model::HorizonOutput, 3>>& preds,
              int k, const std::function<bool(const LabeledExample&)>& keep) {
    Scored s;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& t = test[i].targets;
        if (!t.mask[k] || !keep(test[i])) continue;
        s.scores.push_back(preds[i][k].prob_obese);
        s.labels.push_back(t.obese[k] ? 1 : 0);
        s.abs_err.push_back(std::abs(preds[i][k].bmi_pred - t.bmi[k]));
    }
    return s;
}

std::optional<double> maybe_auroc(const Scored& s) {
    if (!both_classes(s.labels)) return std::nullopt;
    return auroc(s.scores, s.labels);
}

}  // namespace

EvalReport evaluate(const model::ModelWeights& weights, std::span<const LabeledExample> test,
                    const EvalOptions& options) {
    if (test.empty()) throw Error(ErrorCode::TooSmall, "empty test set");
    const auto samples = samples_of(test);
    const auto preds = model::predict_batch(weights, std::span<const model::Sample>(samples));

    EvalReport r;
    r.n_examples = test.size();
    r.seed = options.seed;
    r.model_version = weights.model_version;
    std::set<std::string> patients;
    std::set<int> windows;
    for (const auto& e : test) {
        patients.insert(e.patient_id);
        windows.insert(e.window_end_age_years);
    }
    r.n_patients = patients.size();

    std::vector<int> cell_windows(windows.begin(), windows.end());
    cell_windows.push_back(0);
    for (int w : cell_windows) {
        for (int k = 0; k < model::kHorizons; ++k) {
            const auto s = gather(test, preds, k, [w](const LabeledExample& e) {
                return w == 0 || e.window_end_age_years == w;
            });
            CellMetrics c;
            c.window = w;
            c.horizon = k + 1;
            c.n = s.scores.size();
            c.half_width = w == 0 ? weights.calibration.pooled[k] : weights.calibration.half_width(w, k);
            if (c.n > 0) {
                c.prevalence = static_cast<double>(std::count(s.labels.begin(), s.labels.end(), 1)) /
                               static_cast<double>(c.n);
                c.mae = std::accumulate(s.abs_err.begin(), s.abs_err.end(), 0.0) / static_cast<double>(c.n);
                for (std::size_t i = 0; i < kNetBenefitThresholds.size(); ++i) {
                    c.net_benefit[i] = net_benefit(s.scores, s.labels, kNetBenefitThresholds[i]);
                }
            }
            c.auroc = maybe_auroc(s);
            if (c.auroc && c.n >= 10 && options.bootstrap_reps > 0) {
                try {
                    c.ci = bootstrap_ci(auroc, s.scores, s.labels, options.bootstrap_reps,
                                        options.seed + static_cast<std::uint64_t>(w * 10 + k));
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::DegenerateResampling) throw;
                }
            }
            if (w == 0 && k == 0) r.prevalence = c.prevalence;
            r.cells.push_back(c);
        }
    }

    auto group = [&](const std::string& key, const std::string& value, const std::string& label_key,
                     std::vector<GroupMetric>& into) {
        for (int k = 0; k < model::kHorizons; ++k) {
            const auto s = gather(test, preds, k, [&](const LabeledExample& e) {
                auto it = e.strata.find(key);
                return it != e.strata.end() && it->second == value;
            });
            into.push_back({label_key, value, k + 1, s.scores.size(), maybe_auroc(s)});
        }
    };

    if (options.subgroups) {
        std::map<std::string, std::set<std::string>> values;
        for (const auto& e : test)
            for (const auto& [key, v] : e.strata) values[key].insert(v);
        for (const auto& [key, vs] : values)
            for (const auto& v : vs) group(key, v, key, r.subgroups);

        if (auto it = values.find("index_year"); it != values.end() && !it->second.empty()) {
            const auto latest = *std::max_element(it->second.begin(), it->second.end(), [](const auto& a, const auto& b) {
                return std::stoi(a) < std::stoi(b);
            });
            group("index_year", latest, "temporal", r.slices);
        }
        if (auto it = values.find("site"); it != values.end() && !it->second.empty()) {
            const std::string site = options.geographic_site.empty() ? *it->second.rbegin() : options.geographic_site;
            group("site", site, "geographic", r.slices);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorCode::InvalidConfig, what);
    };
    require(!windows.empty(), "windows must not be empty");
    for (int w : windows) require(w >= kMinWindow && w <= kMaxWindow, "windows must be within 2..7 years");
    require(learning_rate >= 0, "learning_rate must be >= 0");
    require(batch_size > 0, "batch_size must be > 0");
    require(max_epochs > 0, "max_epochs must be > 0");
    require(patience > 0, "patience must be > 0");
    require(min_delta >= 0, "min_delta must be >= 0");
    require(undersample_ratio > 0, "undersample_ratio must be > 0");
    require(conformal_alpha > 0 && conformal_alpha < 1, "conformal_alpha must be in (0, 1)");
    require(bootstrap_reps >= 0, "bootstrap_reps must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"model", c.model},
         {"schedule", c.schedule},
         {"windows", c.windows},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"max_epochs", c.max_epochs},
         {"patience", c.patience},
         {"min_delta", c.min_delta},
         {"undersample_ratio", c.undersample_ratio},
         {"conformal_alpha", c.conformal_alpha},
         {"bootstrap_reps", c.bootstrap_reps},
         {"evaluate_baseline", c.evaluate_baseline},
         {"seed", c.seed},
         {"geographic_site", c.geographic_site}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d;
    c.model = j.value("model", d.model);
    c.schedule = j.value("schedule", d.schedule);
    c.windows = j.value("windows", d.windows);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.max_epochs = j.value("max_epochs", d.max_epochs);
    c.patience = j.value("patience", d.patience);
    c.min_delta = j.value("min_delta", d.min_delta);
    c.undersample_ratio = j.value("undersample_ratio", d.undersample_ratio);
    c.conformal_alpha = j.value("conformal_alpha", d.conformal_alpha);
    c.bootstrap_reps = j.value("bootstrap_reps", d.bootstrap_reps);
    c.evaluate_baseline = j.value("evaluate_baseline", d.evaluate_baseline);
    c.seed = j.value("seed", d.seed);
    c.geographic_site = j.value("geographic_site", d.geographic_site);
}

vocab::CohortMeasurements collect_measurements(const Cohort& cohort, std::span<const std::size_t> members,
                                               const vocab::FeatureRegistry& registry) {
    vocab::CohortMeasurements out;
    for (std::size_t i : members) {
        for (const auto& ev : cohort.at(i).record.events) {
            if (!ev.value) continue;
            auto f = registry.map_code(ev.code_system, ev.code);
            if (!f) continue;
            const auto& spec = registry.feature(*f);
            if (spec.domain != ev.domain || !spec.quantization) continue;
            if (spec.quantization->mode != vocab::QuantMode::cohort_quantiles) continue;
            out[*f].push_back(*ev.value);
        }
    }
    return out;
}

namespace {

std::vector<LabeledExample> examples_for(const Cohort& cohort, std::span<const std::size_t> members,
                                         const vocab::FeatureRegistry& registry, const features::BinSchedule& schedule,
                                         const growth::LmsTable& lms, std::span<const int> windows) {
    std::vector<LabeledExample> out;
    for (std::size_t i : members) {
        auto ex = make_examples(cohort[i], registry, schedule, lms, windows);
        std::move(ex.begin(), ex.end(), std::back_inserter(out));
    }
    return out;
}

double chunked_loss(const model::ModelWeights& w, std::span<const model::Sample> samples) {
    constexpr std::size_t kChunk = 256;
    double total = 0;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        const auto part = samples.subspan(start, std::min(kChunk, samples.size() - start));
        total += model::batch_loss(w, part) * static_cast<double>(part.size());
    }
    return total / static_cast<double>(samples.size());
}

/// Batches hold one window each (equal sequence lengths), in shuffled order.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<LabeledExample>& train, int batch_size,
                                                   std::mt19937_64& rng) {
    std::map<int, std::vector<std::size_t>> by_window;
    for (std::size_t i = 0; i < train.size(); ++i) by_window[train[i].window_end_age_years].push_back(i);
    std::vector<std::vector<std::size_t>> batches;
    for (auto& [w, idx] : by_window) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t s = 0; s < idx.size(); s += static_cast<std::size_t>(batch_size)) {
            batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                 idx.begin() + static_cast<std::ptrdiff_t>(
                                                   std::min(idx.size(), s + static_cast<std::size_t>(batch_size))));
        }
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

double calibrated_width(std::vector<double>& residuals, double alpha) {
    try {
        return conformal_interval(residuals, alpha);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::TooFewCalibrationPoints) throw;
        // Too few points for the nominal rank: fall back to the widest residual.
        return residuals.empty() ? 0.0 : std::abs(*std::max_element(residuals.begin(), residuals.end(),
                                                                    [](double a, double b) {
                                                                        return std::abs(a) < std::abs(b);
                                                                    }));
    }
}

model::ConformalCalibration calibrate(const model::ModelWeights& w, std::span<const LabeledExample> val,
                                      double alpha) {
    model::ConformalCalibration cal;
    cal.alpha = alpha;
    if (val.empty()) return cal;
    const auto samples = samples_of(val);
    const auto preds = model::predict_batch(w, std::span<const model::Sample>(samples));
    std::map<int, std::array<std::vector<double>, model::kHorizons>> by_window;
    std::array<std::vector<double>, model::kHorizons> pooled;
    for (std::size_t i = 0; i < val.size(); ++i) {
        for (int k = 0; k < model::kHorizons; ++k) {
            if (!val[i].targets.mask[k]) continue;
            const double r = preds[i][k].bmi_pred - val[i].targets.bmi[k];
            by_window[val[i].window_end_age_years][k].push_back(r);
            pooled[k].push_back(r);
        }
    }
    for (int k = 0; k < model::kHorizons; ++k) cal.pooled[k] = calibrated_width(pooled[k], alpha);
    for (auto& [window, res] : by_window) {
        std::array<double, model::kHorizons> hw{};
        bool ok = true;
        for (int k = 0; k < model::kHorizons && ok; ++k) {
            try {
                hw[k] = conformal_interval(res[k], alpha);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::TooFewCalibrationPoints) throw;
                ok = false;
            }
        }
        if (ok) cal.by_window[window] = hw;
    }
    return cal;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Cohort& cohort, const vocab::FeatureRegistry& registry,
                  const growth::LmsTable& lms, const TrainCallbacks& callbacks) {
    config.validate();
    TrainResult result;
    result.split = split(cohort.size(), config.seed);
    const auto& parts = result.split;

    result.registry = registry.frozen()
                          ? registry
                          : vocab::fit_cohort_quantiles(registry, collect_measurements(cohort, parts.train, registry));
    const auto schedule = features::make_schedule(config.schedule);

    auto train_ex = examples_for(cohort, parts.train, result.registry, schedule, lms, config.windows);
    const auto val_ex = examples_for(cohort, parts.val, result.registry, schedule, lms, config.windows);
    const auto test_ex = examples_for(cohort, parts.test, result.registry, schedule, lms, config.windows);
    if (train_ex.empty() || test_ex.empty()) throw Error(ErrorCode::TooSmall, "no labelled examples after split");
    train_ex = undersample(std::move(train_ex), config.undersample_ratio, config.seed + 1);

    auto model_cfg = config.model;
    model_cfg.vocab_size = result.registry.input_vocab_size();
    model_cfg.validate();
    auto weights = model::init(model_cfg);
    weights.registry_fingerprint = result.registry.fingerprint();
    weights.schedule = config.schedule;
    const auto fresh = weights;

    const auto train_samples = samples_of(train_ex);
    const auto val_samples = samples_of(val_ex);
    auto optimizer = model::AdamState::for_weights(weights);
    std::mt19937_64 rng(config.seed + 2);

    auto best = weights;
    double best_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int stale = 0;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        double sum = 0;
        for (const auto& batch_idx : make_batches(train_ex, config.batch_size, rng)) {
            std::vector<model::Sample> batch;
            batch.reserve(batch_idx.size());
            for (std::size_t i : batch_idx) batch.push_back(train_samples[i]);
            const auto m = model::backward_and_step(weights, batch, optimizer, config.learning_rate, rng);
            sum += m.loss * static_cast<double>(batch.size());
        }
        EpochLog log;
        log.epoch = epoch;
        log.train_loss = sum / static_cast<double>(train_ex.size());
        log.val_loss = val_samples.empty() ? log.train_loss : chunked_loss(weights, val_samples);
        log.improved = log.val_loss < best_loss - config.min_delta;
        if (log.improved) {
            best_loss = log.val_loss;
            best = weights;
            best_epoch = epoch;
            stale = 0;
        } else {
            ++stale;
        }
        result.history.push_back(log);
        if (callbacks.on_epoch) callbacks.on_epoch(log);
        if (stale >= config.patience) break;
    }

    best.model_version = "prsk1-" + result.registry.fingerprint().substr(0, 8) + "-s" + std::to_string(config.seed) +
                         "-e" + std::to_string(best_epoch);
    best.calibration = calibrate(best, val_ex, config.conformal_alpha);

    EvalOptions opts;
    opts.bootstrap_reps = config.bootstrap_reps;
    opts.seed = config.seed;
    opts.geographic_site = config.geographic_site;
    result.report = evaluate(best, test_ex, opts);
    if (config.evaluate_baseline) {
        EvalOptions base = opts;
        base.bootstrap_reps = 0;
        base.subgroups = false;
        const auto baseline = evaluate(fresh, test_ex, base);
        for (int k = 0; k < model::kHorizons; ++k) result.report.baseline_auroc[k] = baseline.overall(k + 1).auroc;
    }
    result.weights = std::move(best);
    return result;
}

}  // namespace pedrisk::train
