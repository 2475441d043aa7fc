#include "pedrisk/growth.hpp"

#include <algorithm>
#include <boost/math/special_functions/erf.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "pedrisk/error.hpp"

namespace pedrisk::growth {

std::string_view to_string(Metric metric) noexcept {
    switch (metric) {
        case Metric::bmi_for_age: return "bmi_for_age";
        case Metric::weight_for_length: return "weight_for_length";
        case Metric::stature_for_age: return "stature_for_age";
    }
    return "bmi_for_age";
}

std::string_view to_string(Label label) noexcept {
    switch (label) {
        case Label::normal: return "normal";
        case Label::overweight: return "overweight";
        case Label::obese: return "obese";
    }
    return "normal";
}

void LmsTable::add(Metric metric, Sex sex, LmsRow row) { curves_[{metric, sex}].push_back(row); }

void LmsTable::validate() const {
    for (const auto& [key, rows] : curves_) {
        const std::string name = std::string(to_string(key.first)) + "/" + std::string(pedrisk::to_string(key.second));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!(rows[i].M > 0) || !(rows[i].S > 0)) throw Error(ErrorCode::ParseError, name + ": M and S must be > 0");
            if (i > 0 && !(rows[i - 1].key < rows[i].key)) {
                throw Error(ErrorCode::ParseError, name + ": keys not strictly increasing");
            }
        }
    }
}

const std::vector<LmsRow>& LmsTable::curve(Metric metric, Sex sex) const {
    if (sex == Sex::unknown) throw Error(ErrorCode::UnknownSex, "growth references are sex-specific");
    auto it = curves_.find({metric, sex});
    if (it == curves_.end() || it->second.empty()) {
        throw Error(ErrorCode::OutOfRange, std::string("no ") + std::string(to_string(metric)) + " curve loaded");
    }
    return it->second;
}

std::pair<double, double> LmsTable::key_range(Metric metric, Sex sex) const {
    const auto& rows = curve(metric, sex);
    return {rows.front().key, rows.back().key};
}

Lms LmsTable::interpolate(Metric metric, Sex sex, double key) const {
    const auto& rows = curve(metric, sex);
    if (!(key >= rows.front().key && key <= rows.back().key)) {
        throw Error(ErrorCode::OutOfRange, std::string(to_string(metric)) + " key " + std::to_string(key) +
                                               " outside [" + std::to_string(rows.front().key) + ", " +
                                               std::to_string(rows.back().key) + "]");
    }
    auto hi = std::lower_bound(rows.begin(), rows.end(), key, [](const LmsRow& r, double k) { return r.key < k; });
    if (hi->key == key) return {hi->L, hi->M, hi->S};
    auto lo = hi - 1;
    const double t = (key - lo->key) / (hi->key - lo->key);
    return {lo->L + t * (hi->L - lo->L), lo->M + t * (hi->M - lo->M), lo->S + t * (hi->S - lo->S)};
}

LmsTable parse_lms_table(std::string_view text) {
    LmsTable table;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string tok; std::getline(ss, tok, '|');) f.push_back(tok);
        auto fail = [&](const std::string& why) {
            throw Error(ErrorCode::ParseError, "LMS line " + std::to_string(line_no) + ": " + why);
        };
        if (f.size() != 6) fail("expected metric|sex|key|L|M|S");
        Metric metric{};
        if (f[0] == "bmi_for_age") metric = Metric::bmi_for_age;
        else if (f[0] == "weight_for_length") metric = Metric::weight_for_length;
        else if (f[0] == "stature_for_age") metric = Metric::stature_for_age;
        else fail("unknown metric " + f[0]);
        Sex sex{};
        if (f[1] == "male" || f[1] == "1") sex = Sex::male;
        else if (f[1] == "female" || f[1] == "2") sex = Sex::female;
        else fail("unknown sex " + f[1]);
        LmsRow row;
        double* slots[] = {&row.key, &row.L, &row.M, &row.S};
        for (int i = 0; i < 4; ++i) {
            const auto& s = f[2 + i];
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), *slots[i]);
            if (ec != std::errc{} || ptr != s.data() + s.size()) fail("bad number " + s);
        }
        table.add(metric, sex, row);
    }
    table.validate();
    return table;
}

LmsTable load_lms_table(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open LMS table " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_lms_table(buf.str());
}

double bmi(double weight_kg, double height_m) {
    if (!(weight_kg > 0) || !(height_m > 0)) throw Error(ErrorCode::NonPositiveInput, "weight and height must be > 0");
    return weight_kg / (height_m * height_m);
}

double lms_z(const Lms& lms, double x) {
    if (!(x > 0)) throw Error(ErrorCode::NonPositiveInput, "measurement must be > 0");
    if (lms.L == 0.0) return std::log(x / lms.M) / lms.S;
    return (std::pow(x / lms.M, lms.L) - 1.0) / (lms.L * lms.S);
}

double lms_value(const Lms& lms, double z) {
    if (lms.L == 0.0) return lms.M * std::exp(lms.S * z);
    const double base = 1.0 + lms.L * lms.S * z;
    // Beyond this point the Box-Cox transform has no preimage; clamp to the asymptote.
    if (base <= 0.0) return lms.L < 0 ? std::numeric_limits<double>::infinity() : 0.0;
    return lms.M * std::pow(base, 1.0 / lms.L);
}

double lms_z(const LmsTable& table, Metric metric, Sex sex, double key, double x) {
    return lms_z(table.interpolate(metric, sex, key), x);
}

double value_at_z(const LmsTable& table, Metric metric, Sex sex, double key, double z) {
    return lms_value(table.interpolate(metric, sex, key), z);
}

double percentile_from_z(double z) { return 50.0 * std::erfc(-z / std::sqrt(2.0)); }

double z_from_probability(double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error(ErrorCode::OutOfRange, "probability must be in (0, 1)");
    return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

Label label_for_percentile(double percentile) {
    if (percentile >= kObesePercentile) return Label::obese;
    if (percentile >= kOverweightPercentile) return Label::overweight;
    return Label::normal;
}

namespace {

GrowthAssessment make_assessment(double value, double z) {
    GrowthAssessment a;
    a.value = value;
    a.z = z;
    a.percentile = percentile_from_z(z);
    a.label = label_for_percentile(a.percentile);
    return a;
}

}  // namespace

GrowthAssessment assess(const LmsTable& table, Sex sex, double age_months, double bmi_value) {
    return make_assessment(bmi_value, lms_z(table, Metric::bmi_for_age, sex, age_months, bmi_value));
}

GrowthAssessment assess_weight_for_length(const LmsTable& table, Sex sex, double length_cm, double weight_kg) {
    return make_assessment(weight_kg, lms_z(table, Metric::weight_for_length, sex, length_cm, weight_kg));
}

}  // namespace pedrisk::growth
