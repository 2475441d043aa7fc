#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pedrisk/growth.hpp"
#include "pedrisk/model.hpp"
#include "pedrisk/record.hpp"
#include "pedrisk/sequencer.hpp"
#include "pedrisk/vocab.hpp"

/// Cohort splitting, balancing, the training loop and every evaluation metric.
namespace pedrisk::train {

inline constexpr int kMinWindow = 2;
inline constexpr int kMaxWindow = 7;
/// A label measurement must fall within this many days of the target age.
inline constexpr int kLabelToleranceDays = 182;

/// One child plus the stratification tags that exist only at cohort level.
struct CohortMember {
    PatientRecord record;
    std::string site;
    int index_year = 0;

    friend bool operator==(const CohortMember&, const CohortMember&) = default;
};
using Cohort = std::vector<CohortMember>;

using Strata = std::map<std::string, std::string>;

struct LabeledExample {
    std::string patient_id;
    int window_end_age_years = 0;
    features::TimeBinnedSequence sequence;
    features::DemographicVector demo;
    model::Targets targets;
    Strata strata;
};

/// Per horizon h: the BMI measured closest to age W + h years (within
/// kLabelToleranceDays), labelled obese when assess() puts it at or above the
/// 95th percentile. Horizons without such a measurement are masked.
model::Targets derive_targets(const PatientRecord& record, const growth::LmsTable& lms, int window_end_age_years);

/// sex, race, ethnicity, payer, last_wfl (category of the last weight-for-length
/// assessment before 24 months), site, index_year.
Strata strata_of(const CohortMember& member, const growth::LmsTable& lms);

/// One example per window with at least one labelled horizon.
std::vector<LabeledExample> make_examples(const CohortMember& member, const vocab::FeatureRegistry& registry,
                                          const features::BinSchedule& schedule, const growth::LmsTable& lms,
                                          std::span<const int> windows);

std::vector<model::Sample> samples_of(std::span<const LabeledExample> examples);

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Patient-level 80/20 split with 5% of the training part held out for validation.
/// Indices refer to cohort positions and are sorted within each part.
SplitIndices split(std::size_t cohort_size, std::uint64_t seed);

/// Drops randomly chosen non-obese examples (by the 1-year label) until
/// negatives <= target_ratio * positives. Examples without a 1-year label are kept.
std::vector<LabeledExample> undersample(std::vector<LabeledExample> train, double target_ratio, std::uint64_t seed);

/// Mann-Whitney AUROC from average ranks; ties count one half.
double auroc(std::span<const double> scores, std::span<const int> labels);
/// Direct pairwise count, O(n^2).
double auroc_brute_force(std::span<const double> scores, std::span<const int> labels);

using MetricFn = std::function<double(std::span<const double>, std::span<const int>)>;

struct Interval {
    double lo = 0;
    double hi = 0;
    int skipped = 0;  // replicates abandoned after 10 single-class redraws
};

/// Percentile (2.5, 97.5) bootstrap over resamples with replacement.
Interval bootstrap_ci(const MetricFn& metric, std::span<const double> scores, std::span<const int> labels,
                      int reps = 100, std::uint64_t seed = 0);

/// k-th smallest |residual| with k = ceil((n + 1)(1 - alpha)).
double conformal_interval(std::span<const double> residuals, double alpha);

/// TP/N - FP/N * pt / (1 - pt), with score >= pt counted positive.
double net_benefit(std::span<const double> scores, std::span<const int> labels, double threshold);

inline constexpr std::array<double, 3> kNetBenefitThresholds{0.2, 0.4, 0.6};

struct CellMetrics {
    int window = 0;  // 0 pools every window
    int horizon = 1;
    std::size_t n = 0;
    double prevalence = 0;
    std::optional<double> auroc;  // empty when the cell has a single class
    std::optional<Interval> ci;
    double mae = 0;
    double half_width = 0;
    std::array<double, 3> net_benefit{};
};

struct GroupMetric {
    std::string key;
    std::string value;
    int horizon = 1;
    std::size_t n = 0;
    std::optional<double> auroc;
};

struct EvalReport {
    std::vector<CellMetrics> cells;
    std::vector<GroupMetric> subgroups;
    std::vector<GroupMetric> slices;  // key "temporal" or "geographic"
    std::array<std::optional<double>, model::kHorizons> baseline_auroc{};
    std::size_t n_examples = 0;
    std::size_t n_patients = 0;
    double prevalence = 0;  // 1-year horizon, pooled
    std::uint64_t seed = 0;
    std::string model_version;

    /// The pooled cell for a horizon.
    [[nodiscard]] const CellMetrics& overall(int horizon) const;
    /// window|horizon|auroc|lo|hi|mae|half_width|nb20|nb40|nb60|n|prevalence
    [[nodiscard]] std::string table() const;
};

void to_json(nlohmann::json& j, const EvalReport& r);

struct EvalOptions {
    int bootstrap_reps = 100;
    std::uint64_t seed = 0;
    bool subgroups = true;
    /// Site held out for the geographic slice; the lexicographically last site when empty.
    std::string geographic_site;
};

EvalReport evaluate(const model::ModelWeights& weights, std::span<const LabeledExample> test,
                    const EvalOptions& options = {});

struct TrainConfig {
    model::ModelConfig model;
    features::ScheduleConfig schedule = features::ScheduleConfig::monthly_bimonthly();
    std::vector<int> windows{2, 3, 4, 5, 6, 7};
    double learning_rate = 1e-3;
    int batch_size = 32;
    int max_epochs = 50;
    int patience = 5;
    double min_delta = 1e-4;
    double undersample_ratio = 1.0;
    double conformal_alpha = 0.1;
    int bootstrap_reps = 100;
    bool evaluate_baseline = true;
    std::uint64_t seed = 0;
    std::string geographic_site;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    bool improved = false;
};

struct TrainCallbacks {
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    model::ModelWeights weights;
    vocab::FeatureRegistry registry;  // with cohort quantiles fitted
    EvalReport report;
    std::vector<EpochLog> history;
    SplitIndices split;
};

/// split -> fit quantiles on train -> undersample -> epochs with early stopping
/// on validation loss -> conformal calibration on validation -> test evaluation.
TrainResult train(const TrainConfig& config, const Cohort& cohort, const vocab::FeatureRegistry& registry,
                  const growth::LmsTable& lms, const TrainCallbacks& callbacks = {});

/// Measurement values of the given members, per cohort-quantile feature.
vocab::CohortMeasurements collect_measurements(const Cohort& cohort, std::span<const std::size_t> members,
                                               const vocab::FeatureRegistry& registry);

}  // namespace pedrisk::train
