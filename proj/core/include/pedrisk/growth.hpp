#pragma once

#include <filesystem>
#include <map>
#include <string_view>
#include <vector>

#include "pedrisk/record.hpp"

/// CDC growth-reference math: LMS z-scores, percentiles and obesity labels.
namespace pedrisk::growth {

enum class Metric { bmi_for_age, weight_for_length, stature_for_age };
enum class Label { normal, overweight, obese };

std::string_view to_string(Metric metric) noexcept;
std::string_view to_string(Label label) noexcept;

struct LmsRow {
    double key = 0;  // age in months, or recumbent length in cm for weight_for_length
    double L = 0;
    double M = 0;
    double S = 0;
};

struct Lms {
    double L = 0;
    double M = 0;
    double S = 0;
};

class LmsTable {
public:
    void add(Metric metric, Sex sex, LmsRow row);
    /// Checks keys strictly increasing and M, S positive for every curve.
    void validate() const;

    [[nodiscard]] const std::vector<LmsRow>& curve(Metric metric, Sex sex) const;
    [[nodiscard]] std::pair<double, double> key_range(Metric metric, Sex sex) const;

    /// L, M, S linearly interpolated between the bracketing rows.
    [[nodiscard]] Lms interpolate(Metric metric, Sex sex, double key) const;

private:
    std::map<std::pair<Metric, Sex>, std::vector<LmsRow>> curves_;
};

LmsTable parse_lms_table(std::string_view text);
LmsTable load_lms_table(const std::filesystem::path& path);

/// weight / height^2, in kg/m^2.
double bmi(double weight_kg, double height_m);

/// z = ((x/M)^L - 1) / (L S), or ln(x/M) / S when L = 0.
double lms_z(const Lms& lms, double x);
/// Inverse of lms_z: the measurement value at z.
double lms_value(const Lms& lms, double z);

double lms_z(const LmsTable& table, Metric metric, Sex sex, double key, double x);
double value_at_z(const LmsTable& table, Metric metric, Sex sex, double key, double z);

/// Standard normal CDF times 100.
double percentile_from_z(double z);
/// Inverse standard normal CDF (p in (0, 1)).
double z_from_probability(double p);

constexpr double kObesePercentile = 95.0;
constexpr double kOverweightPercentile = 85.0;

Label label_for_percentile(double percentile);

struct GrowthAssessment {
    double value = 0;
    double z = 0;
    double percentile = 0;
    Label label = Label::normal;
};

/// BMI-for-age assessment; age in months within the table's range (24 to 240.5).
GrowthAssessment assess(const LmsTable& table, Sex sex, double age_months, double bmi);
/// Weight-for-length assessment (under-2 stratifier).
GrowthAssessment assess_weight_for_length(const LmsTable& table, Sex sex, double length_cm, double weight_kg);

}  // namespace pedrisk::growth
