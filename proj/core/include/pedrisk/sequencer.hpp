#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pedrisk/record.hpp"
#include "pedrisk/vocab.hpp"

/// Turns a PatientRecord into the model's time-binned input.
namespace pedrisk::features {

struct Segment {
    int start_month = 0;
    int end_month = 0;
    int width_months = 1;
    friend bool operator==(const Segment&, const Segment&) = default;
};

struct ScheduleConfig {
    std::vector<Segment> segments;

    /// Monthly bins to 24 months, bimonthly to 240.
    static ScheduleConfig monthly_bimonthly();
    /// Quarterly in year one, semiannual in year two, yearly after.
    static ScheduleConfig quarterly_semiannual_yearly();
    /// One of the two names above; throws Error(InvalidConfig) otherwise.
    static ScheduleConfig named(std::string_view name);

    friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

/// Written as [[start, end, width], ...]; read from that or from a schedule name.
void to_json(nlohmann::json& j, const ScheduleConfig& c);
void from_json(const nlohmann::json& j, ScheduleConfig& c);

class BinSchedule {
public:
    [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }
    /// Month marks of every bin edge, starting at 0.
    [[nodiscard]] const std::vector<int>& boundaries() const { return boundaries_; }
    [[nodiscard]] int bin_count() const { return static_cast<int>(boundaries_.size()) - 1; }
    [[nodiscard]] int span_months() const { return boundaries_.back(); }
    /// Number of bins starting before `window_end_months`.
    [[nodiscard]] int bins_in_window(int window_end_months) const;

private:
    friend BinSchedule make_schedule(const ScheduleConfig& config);
    std::vector<Segment> segments_;
    std::vector<int> boundaries_;
};

BinSchedule make_schedule(const ScheduleConfig& config = ScheduleConfig::monthly_bimonthly());

/// Bin whose [start, end) month interval holds age_days / 30.4375.
int bin_index(const BinSchedule& schedule, std::int32_t age_days);

struct TimeBinnedSequence {
    std::string patient_id;
    int window_end_age_years = 0;
    /// One sorted, duplicate-free set of model input ids per bin in the window.
    std::vector<std::vector<int>> bins;

    friend bool operator==(const TimeBinnedSequence&, const TimeBinnedSequence&) = default;
};

/// Events before the window end are mapped through the registry (and
/// quantized for measurements) and OR-aggregated per bin. Codes that are
/// unregistered, or whose feature domain differs from the event domain, are dropped.
TimeBinnedSequence build_sequence(const PatientRecord& record, const vocab::FeatureRegistry& registry,
                                  const BinSchedule& schedule, int window_end_age_years);

enum class DemoField { sex, race, ethnicity, insurance, region, window, count_ };
inline constexpr std::size_t kDemoFields = static_cast<std::size_t>(DemoField::count_);

/// Index 0 is reserved for "unknown" in every field.
struct DemographicCardinalities {
    std::array<int, kDemoFields> sizes{3, 5, 3, 3, 16, 9};
    [[nodiscard]] int operator[](DemoField f) const { return sizes[static_cast<std::size_t>(f)]; }
    friend bool operator==(const DemographicCardinalities&, const DemographicCardinalities&) = default;
};

struct DemographicVector {
    std::array<int, kDemoFields> indices{};
    [[nodiscard]] int operator[](DemoField f) const { return indices[static_cast<std::size_t>(f)]; }
    friend bool operator==(const DemographicVector&, const DemographicVector&) = default;
};

DemographicVector encode_demographics(const PatientRecord& record, int window_end_age_years,
                                      const DemographicCardinalities& cardinalities = {});

/// Training-cache text format: `#window|patient_id|W|bins` then one
/// `patient_id|bin|id,id,...` line per non-empty bin.
void write_sequences(std::ostream& out, const std::vector<TimeBinnedSequence>& sequences);
std::vector<TimeBinnedSequence> read_sequences(std::istream& in);

}  // namespace pedrisk::features
