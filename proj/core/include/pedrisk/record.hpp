#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pedrisk {

using Date = std::chrono::sys_days;

/// Parses `YYYY-MM-DD`, also accepting a FHIR dateTime (`YYYY-MM-DDThh:mm:ss...`)
/// whose date part is taken as-is. Returns nullopt for anything else.
std::optional<Date> parse_date(std::string_view text);
std::string format_date(Date date);

enum class Sex { unknown, female, male };
enum class Domain { condition, medication, procedure, measurement, family_history };
enum class CodeSystem { SNOMED, RxNorm, CPT, LOINC, local };

std::string_view to_string(Sex sex) noexcept;
std::string_view to_string(Domain domain) noexcept;
std::string_view to_string(CodeSystem system) noexcept;
std::optional<Domain> domain_from_string(std::string_view text) noexcept;
std::optional<CodeSystem> code_system_from_string(std::string_view text) noexcept;

struct ClinicalEvent {
    std::int32_t age_days = 0;
    Domain domain = Domain::condition;
    CodeSystem code_system = CodeSystem::SNOMED;
    std::string code;
    std::optional<double> value;  // measurements only
    std::optional<std::string> unit;

    friend bool operator==(const ClinicalEvent&, const ClinicalEvent&) = default;
};

/// Total order used everywhere events are sorted, so that records compare
/// equal regardless of how their source documents ordered same-day events.
bool canonical_less(const ClinicalEvent& a, const ClinicalEvent& b);

struct PatientRecord {
    std::string patient_id;
    std::string display_name;
    Date birth_date{};
    Sex sex = Sex::unknown;
    std::string race;       // OMB race code or empty
    std::string ethnicity;  // OMB ethnicity code or empty
    std::string insurance;  // "private" | "public" | empty
    std::string region;     // 3-character postal prefix or empty
    std::optional<Date> extraction_date;
    std::vector<ClinicalEvent> events;

    friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

constexpr double kDaysPerMonth = 30.4375;
constexpr double kDaysPerYear = 365.25;

inline double age_months(std::int32_t age_days) { return age_days / kDaysPerMonth; }
inline double age_years(std::int32_t age_days) { return age_days / kDaysPerYear; }

// LOINC codes the pipeline reads back out of records for growth math.
namespace loinc {
inline constexpr std::string_view body_weight = "29463-7";
inline constexpr std::string_view body_height = "8302-2";
inline constexpr std::string_view bmi = "39156-5";
}  // namespace loinc

/// One dated anthropometric point reconstructed from a record's measurements.
struct GrowthPoint {
    std::int32_t age_days = 0;
    std::optional<double> weight_kg;
    std::optional<double> height_cm;
    std::optional<double> bmi;
};

/// Groups weight/height/BMI observations by day. BMI falls back to
/// weight / height^2 when only the pair was recorded.
std::vector<GrowthPoint> growth_points(const PatientRecord& record);

}  // namespace pedrisk
