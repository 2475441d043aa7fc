#include "pedrisk/sequencer.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "pedrisk/error.hpp"

namespace pedrisk::features {

ScheduleConfig ScheduleConfig::monthly_bimonthly() { return {{{0, 24, 1}, {24, 240, 2}}}; }

ScheduleConfig ScheduleConfig::quarterly_semiannual_yearly() { return {{{0, 12, 3}, {12, 24, 6}, {24, 240, 12}}}; }

ScheduleConfig ScheduleConfig::named(std::string_view name) {
    if (name == "monthly_bimonthly") return monthly_bimonthly();
    if (name == "quarterly_semiannual_yearly") return quarterly_semiannual_yearly();
    throw Error(ErrorCode::InvalidConfig, "unknown schedule " + std::string(name));
}

void to_json(nlohmann::json& j, const ScheduleConfig& c) {
    j = nlohmann::json::array();
    for (const auto& s : c.segments) j.push_back({s.start_month, s.end_month, s.width_months});
}

void from_json(const nlohmann::json& j, ScheduleConfig& c) {
    if (j.is_string()) {
        c = ScheduleConfig::named(j.get<std::string>());
        return;
    }
    c.segments.clear();
    for (const auto& s : j) c.segments.push_back({s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()});
}

int BinSchedule::bins_in_window(int window_end_months) const {
    if (window_end_months < 0 || window_end_months > span_months()) {
        throw Error(ErrorCode::OutOfSchedule, "window end " + std::to_string(window_end_months) +
                                                  " months outside the schedule span");
    }
    return static_cast<int>(std::lower_bound(boundaries_.begin(), boundaries_.end(), window_end_months) -
                            boundaries_.begin());
}

BinSchedule make_schedule(const ScheduleConfig& config) {
    if (config.segments.empty()) throw Error(ErrorCode::InvalidSegments, "no segments");
    BinSchedule s;
    int expected_start = 0;
    s.boundaries_.push_back(0);
    for (const auto& seg : config.segments) {
        if (seg.start_month != expected_start) {
            throw Error(ErrorCode::InvalidSegments, "segments must be contiguous from month 0 without overlap");
        }
        if (seg.end_month <= seg.start_month || seg.width_months <= 0 ||
            (seg.end_month - seg.start_month) % seg.width_months != 0) {
            throw Error(ErrorCode::InvalidSegments, "segment width must divide a positive segment length");
        }
        for (int m = seg.start_month + seg.width_months; m <= seg.end_month; m += seg.width_months) {
            s.boundaries_.push_back(m);
        }
        expected_start = seg.end_month;
    }
    s.segments_ = config.segments;
    return s;
}

int bin_index(const BinSchedule& schedule, std::int32_t age_days) {
    const double months = age_months(age_days);
    if (age_days < 0 || months >= schedule.span_months()) {
        throw Error(ErrorCode::OutOfSchedule, "age " + std::to_string(age_days) + " days outside the schedule");
    }
    int index = 0;
    for (const auto& seg : schedule.segments()) {
        const int count = (seg.end_month - seg.start_month) / seg.width_months;
        if (months < seg.end_month) {
            const int k = static_cast<int>(std::floor((months - seg.start_month) / seg.width_months));
            return index + std::clamp(k, 0, count - 1);
        }
        index += count;
    }
    throw Error(ErrorCode::OutOfSchedule, "age beyond last segment");
}

TimeBinnedSequence build_sequence(const PatientRecord& record, const vocab::FeatureRegistry& registry,
                                  const BinSchedule& schedule, int window_end_age_years) {
    const int window_months = window_end_age_years * 12;
    TimeBinnedSequence seq;
    seq.patient_id = record.patient_id;
    seq.window_end_age_years = window_end_age_years;
    seq.bins.resize(static_cast<std::size_t>(schedule.bins_in_window(window_months)));

    for (const auto& ev : record.events) {
        if (age_months(ev.age_days) >= window_months) continue;
        auto feature = registry.map_code(ev.code_system, ev.code);
        if (!feature) continue;
        const auto& spec = registry.feature(*feature);
        if (spec.domain != ev.domain) continue;
        int bin = 0;
        if (spec.quantization) {
            if (!ev.value) continue;
            bin = vocab::quantize(*spec.quantization, *ev.value);
        }
        const auto t = static_cast<std::size_t>(bin_index(schedule, ev.age_days));
        if (t >= seq.bins.size()) continue;
        seq.bins[t].push_back(registry.input_id(*feature, bin));
    }
    for (auto& b : seq.bins) {
        std::sort(b.begin(), b.end());
        b.erase(std::unique(b.begin(), b.end()), b.end());
    }
    return seq;
}

namespace {

int race_index(const std::string& code) {
    if (code.empty()) return 0;
    if (code == "2106-3") return 1;  // White
    if (code == "2054-5") return 2;  // Black or African American
    if (code == "2028-9") return 3;  // Asian
    return 4;
}

int ethnicity_index(const std::string& code) {
    if (code == "2135-2") return 1;  // Hispanic or Latino
    if (code == "2186-5") return 2;  // Not Hispanic or Latino
    return 0;
}

int insurance_index(const std::string& payer) {
    if (payer == "private") return 1;
    if (payer == "public") return 2;
    return 0;
}

std::uint32_t fnv1a(std::string_view s) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : s) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

int bounded(int index, int cardinality) { return index < cardinality ? index : 0; }

}  // namespace

DemographicVector encode_demographics(const PatientRecord& record, int window_end_age_years,
                                      const DemographicCardinalities& card) {
    DemographicVector v;
    auto set = [&](DemoField f, int index) { v.indices[static_cast<std::size_t>(f)] = bounded(index, card[f]); };
    set(DemoField::sex, record.sex == Sex::female ? 1 : record.sex == Sex::male ? 2 : 0);
    set(DemoField::race, race_index(record.race));
    set(DemoField::ethnicity, ethnicity_index(record.ethnicity));
    set(DemoField::insurance, insurance_index(record.insurance));
    const int regions = card[DemoField::region];
    set(DemoField::region,
        record.region.empty() || regions < 2 ? 0 : 1 + static_cast<int>(fnv1a(record.region) % (regions - 1)));
    set(DemoField::window, window_end_age_years > 0 ? window_end_age_years : 0);
    return v;
}

void write_sequences(std::ostream& out, const std::vector<TimeBinnedSequence>& sequences) {
    for (const auto& s : sequences) {
        out << "#window|" << s.patient_id << '|' << s.window_end_age_years << '|' << s.bins.size() << '\n';
        for (std::size_t t = 0; t < s.bins.size(); ++t) {
            if (s.bins[t].empty()) continue;
            out << s.patient_id << '|' << t << '|';
            for (std::size_t i = 0; i < s.bins[t].size(); ++i) {
                if (i) out << ',';
                out << s.bins[t][i];
            }
            out << '\n';
        }
    }
}

std::vector<TimeBinnedSequence> read_sequences(std::istream& in) {
    std::vector<TimeBinnedSequence> out;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& why) {
        throw Error(ErrorCode::ParseError, "sequence line " + std::to_string(line_no) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string tok; std::getline(ss, tok, '|');) f.push_back(tok);
        if (line.back() == '|') f.emplace_back();
        try {
            if (f.size() == 4 && f[0] == "#window") {
                TimeBinnedSequence s;
                s.patient_id = f[1];
                s.window_end_age_years = std::stoi(f[2]);
                s.bins.resize(std::stoul(f[3]));
                out.push_back(std::move(s));
                continue;
            }
            if (f.size() != 3 || out.empty() || f[0] != out.back().patient_id) fail("malformed bin row");
            const auto t = std::stoul(f[1]);
            if (t >= out.back().bins.size()) fail("bin index beyond window");
            std::stringstream ids(f[2]);
            for (std::string tok; std::getline(ids, tok, ',');) out.back().bins[t].push_back(std::stoi(tok));
        } catch (const std::logic_error&) {
            fail("bad number");
        }
    }
    return out;
}

}  // namespace pedrisk::features
