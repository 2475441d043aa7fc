#include "pedrisk/record.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <tuple>

namespace pedrisk {

namespace {

bool parse_int(std::string_view text, int& out) {
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc{} && ptr == end;
}

}  // namespace

std::optional<Date> parse_date(std::string_view text) {
    if (text.size() < 10) return std::nullopt;
    if (text.size() > 10 && text[10] != 'T') return std::nullopt;
    if (text[4] != '-' || text[7] != '-') return std::nullopt;
    int y = 0, m = 0, d = 0;
    if (!parse_int(text.substr(0, 4), y) || !parse_int(text.substr(5, 2), m) ||
        !parse_int(text.substr(8, 2), d)) {
        return std::nullopt;
    }
    const std::chrono::year_month_day ymd{std::chrono::year{y},
                                          std::chrono::month{static_cast<unsigned>(m)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return std::nullopt;
    return Date{ymd};
}

std::string format_date(Date date) {
    const std::chrono::year_month_day ymd{date};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

std::string_view to_string(Sex sex) noexcept {
    switch (sex) {
        case Sex::female: return "female";
        case Sex::male: return "male";
        case Sex::unknown: break;
    }
    return "unknown";
}

std::string_view to_string(Domain domain) noexcept {
    switch (domain) {
        case Domain::condition: return "condition";
        case Domain::medication: return "medication";
        case Domain::procedure: return "procedure";
        case Domain::measurement: return "measurement";
        case Domain::family_history: return "family_history";
    }
    return "condition";
}

std::string_view to_string(CodeSystem system) noexcept {
    switch (system) {
        case CodeSystem::SNOMED: return "SNOMED";
        case CodeSystem::RxNorm: return "RxNorm";
        case CodeSystem::CPT: return "CPT";
        case CodeSystem::LOINC: return "LOINC";
        case CodeSystem::local: return "local";
    }
    return "local";
}

std::optional<Domain> domain_from_string(std::string_view text) noexcept {
    for (auto d : {Domain::condition, Domain::medication, Domain::procedure, Domain::measurement,
                   Domain::family_history}) {
        if (to_string(d) == text) return d;
    }
    return std::nullopt;
}

std::optional<CodeSystem> code_system_from_string(std::string_view text) noexcept {
    for (auto s : {CodeSystem::SNOMED, CodeSystem::RxNorm, CodeSystem::CPT, CodeSystem::LOINC,
                   CodeSystem::local}) {
        if (to_string(s) == text) return s;
    }
    return std::nullopt;
}

bool canonical_less(const ClinicalEvent& a, const ClinicalEvent& b) {
    return std::tie(a.age_days, a.domain, a.code_system, a.code, a.value, a.unit) <
           std::tie(b.age_days, b.domain, b.code_system, b.code, b.value, b.unit);
}

std::vector<GrowthPoint> growth_points(const PatientRecord& record) {
    std::map<std::int32_t, GrowthPoint> by_day;
    for (const auto& e : record.events) {
        if (e.domain != Domain::measurement || e.code_system != CodeSystem::LOINC || !e.value) continue;
        if (e.code != loinc::body_weight && e.code != loinc::body_height && e.code != loinc::bmi) continue;
        auto& p = by_day[e.age_days];
        p.age_days = e.age_days;
        if (e.code == loinc::body_weight) p.weight_kg = *e.value;
        else if (e.code == loinc::body_height) p.height_cm = *e.value;
        else p.bmi = *e.value;
    }
    std::vector<GrowthPoint> out;
    out.reserve(by_day.size());
    for (auto& [day, p] : by_day) {
        if (!p.bmi && p.weight_kg && p.height_cm && *p.weight_kg > 0 && *p.height_cm > 0) {
            const double m = *p.height_cm / 100.0;
            p.bmi = *p.weight_kg / (m * m);
        }
        out.push_back(p);
    }
    return out;
}

}  // namespace pedrisk
