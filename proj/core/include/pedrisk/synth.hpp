#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pedrisk/growth.hpp"
#include "pedrisk/train_eval.hpp"
#include "pedrisk/vocab.hpp"

/// Deterministic synthetic pediatric cohorts with a planted risk signal.
namespace pedrisk::synth {

struct PlantedFeature {
    int feature_id = 0;
    double odds_multiplier = 1.0;
    friend bool operator==(const PlantedFeature&, const PlantedFeature&) = default;
};

struct SynthConfig {
    int n_patients = 1000;
    std::uint64_t seed = 0;
    std::vector<int> well_child_months{1, 2, 4, 6, 9, 12, 18, 24};
    double base_obesity_rate = 0.12;
    std::vector<PlantedFeature> planted;
    double carrier_rate = 0.25;  // per planted feature, independently
    // Latent BMI z-score: an Ornstein-Uhlenbeck process around a
    // propensity-linked mean, observed with independent visit noise.
    double z_sd = 1.0;               // marginal sd of the observed z
    double z_noise_sd = 0.25;        // visit-level part of z_sd
    double z_correlation_years = 20;  // OU time constant
    double sick_visits_per_year = 1.5;
    double family_history_rate = 0.08;  // per non-planted family-history feature
    double exclusion_rate = 0.02;
    int min_followup_years = 4;
    int max_followup_years = 11;
    std::vector<std::string> sites{"site-a", "site-b", "site-c"};
    int index_year_min = 2010;
    int index_year_max = 2016;
    int skew_days = 180;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct GroundTruth {
    double propensity = 0;
    std::vector<int> carried;          // planted feature ids
    std::map<int, bool> obese_by_age;  // age in years -> obese at that annual visit
};

struct SynthPatient {
    train::CohortMember member;
    GroundTruth truth;
};

/// SNOMED codes whose presence makes a child ineligible: type 1 diabetes,
/// malignant neoplasm, sickle cell disease, developmental delay.
inline constexpr std::array<std::string_view, 4> kExclusionCodes{"46635009", "363346000", "417357006", "248290002"};
inline constexpr double kMinSpanYears = 5.0;

/// Throws Error(UnknownPlantedFeature) when a planted id is not a
/// non-measurement feature of the registry.
std::vector<SynthPatient> generate(const SynthConfig& config, const vocab::FeatureRegistry& registry,
                                   const growth::LmsTable& lms);

/// At least five years between first and last event, a recorded BMI or
/// height/weight, and no exclusion code.
bool eligible(const PatientRecord& record);
train::Cohort apply_eligibility(train::Cohort cohort);

/// Shifts birth and extraction dates by one offset in [-max_days, max_days];
/// ages are unchanged.
PatientRecord skew_dates(PatientRecord record, std::uint64_t seed, int max_days = 180);

std::vector<nlohmann::json> to_fhir_bundles(const train::Cohort& cohort);

train::Cohort members_of(const std::vector<SynthPatient>& patients);

/// `manifest.txt` (patient_id|bundle|site|index_year) plus bundles/<id>.json.
void write_cohort(const train::Cohort& cohort, const std::filesystem::path& dir);
/// Reads a cohort written by write_cohort; bundles go through fhir-ingest.
train::Cohort read_cohort(const std::filesystem::path& dir);

/// Stable per-patient seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace pedrisk::synth
