#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "pedrisk/growth.hpp"

using namespace pedrisk;
namespace t = pedrisk::testing;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected pedrisk::Error");
    return ErrorCode::Io;
}

// Phi via erfc, independent of the library's implementation choice.
double phi100(double z) { return 50.0 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("bmi") {
    CHECK(growth::bmi(20.0, 1.0) == doctest::Approx(20.0));
    CHECK(growth::bmi(30.0, 1.5) == doctest::Approx(30.0 / 2.25));
    CHECK(code_of([] { (void)growth::bmi(-1, 1.0); }) == ErrorCode::NonPositiveInput);
    CHECK(code_of([] { (void)growth::bmi(10, 0); }) == ErrorCode::NonPositiveInput);
}

TEST_CASE("lms formula") {
    CHECK(growth::lms_z({1, 16, 0.1}, 17.6) == doctest::Approx(1.0));
    CHECK(growth::lms_z({0, 16, 0.1}, 16 * std::exp(0.2)) == doctest::Approx(2.0));
    CHECK(growth::lms_z({-1.5, 16, 0.1}, 16) == doctest::Approx(0.0));
    for (double z : {-2.5, -1.0, 0.0, 0.7, 2.2}) {
        CHECK(growth::lms_z({-1.5, 16, 0.1}, growth::lms_value({-1.5, 16, 0.1}, z)) == doctest::Approx(z));
    }
}

TEST_CASE("percentile from z") {
    CHECK(growth::percentile_from_z(0) == doctest::Approx(50.0));
    CHECK(std::abs(growth::percentile_from_z(1.6449) - 95.0) < 0.01);
    CHECK(std::abs(growth::percentile_from_z(-1.6449) - 5.0) < 0.01);
    for (double z = -6; z <= 6; z += 0.173) CHECK(std::abs(growth::percentile_from_z(z) - phi100(z)) < 1e-7 * 100);
    for (double p : {0.01, 0.05, 0.5, 0.85, 0.95, 0.999}) {
        CHECK(growth::percentile_from_z(growth::z_from_probability(p)) == doctest::Approx(100 * p).epsilon(1e-9));
    }
}

TEST_CASE("z = 0 at the median of an exact table key") {
    const auto& table = t::lms();
    for (Sex sex : {Sex::female, Sex::male}) {
        for (const auto& row : table.curve(growth::Metric::bmi_for_age, sex)) {
            CHECK(std::abs(growth::lms_z(table, growth::Metric::bmi_for_age, sex, row.key, row.M)) < 1e-12);
            const double x = row.M * 1.1;
            const double direct = (std::pow(x / row.M, row.L) - 1) / (row.L * row.S);
            CHECK(std::abs(growth::lms_z(table, growth::Metric::bmi_for_age, sex, row.key, x) - direct) < 1e-12);
        }
    }
}

TEST_CASE("assess") {
    const auto& table = t::lms();
    const auto m = table.interpolate(growth::Metric::bmi_for_age, Sex::female, 61.2);
    auto a = growth::assess(table, Sex::female, 61.2, m.M);
    CHECK(a.label == growth::Label::normal);
    CHECK(a.percentile == doctest::Approx(50.0));
    a = growth::assess(table, Sex::female, 61.2, growth::lms_value(m, 2.0));
    CHECK(a.label == growth::Label::obese);
    CHECK(a.percentile == doctest::Approx(phi100(2.0)));
    CHECK(code_of([&] { (void)growth::assess(table, Sex::female, 300, 16); }) == ErrorCode::OutOfRange);
    CHECK(code_of([&] { (void)growth::assess(table, Sex::female, 12, 16); }) == ErrorCode::OutOfRange);
    CHECK(code_of([&] { (void)growth::assess(table, Sex::unknown, 60, 16); }) == ErrorCode::UnknownSex);
    CHECK(code_of([&] { (void)growth::assess(table, Sex::male, 60, 0); }) == ErrorCode::NonPositiveInput);
}

TEST_CASE("labels follow the 85th and 95th percentiles") {
    CHECK(growth::label_for_percentile(84.99) == growth::Label::normal);
    CHECK(growth::label_for_percentile(85.0) == growth::Label::overweight);
    CHECK(growth::label_for_percentile(94.99) == growth::Label::overweight);
    CHECK(growth::label_for_percentile(95.0) == growth::Label::obese);
}

TEST_CASE("percentile strictly increases with the measurement") {
    const auto& table = t::lms();
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> age(24, 240), bmi(10, 40), len(46, 103), spread(-0.4, 0.4);
    for (int i = 0; i < 2000; ++i) {
        const Sex sex = i % 2 ? Sex::male : Sex::female;
        const double a = age(rng), b = bmi(rng);
        CHECK(growth::assess(table, sex, a, b).percentile < growth::assess(table, sex, a, b + 0.05).percentile);
        const double l = len(rng);
        const double w = table.interpolate(growth::Metric::weight_for_length, sex, l).M * std::exp(spread(rng));
        CHECK(growth::assess_weight_for_length(table, sex, l, w).percentile <
              growth::assess_weight_for_length(table, sex, l, w + 0.05).percentile);
    }
}

TEST_CASE("obese boundary by bisection") {
    const auto& table = t::lms();
    for (Sex sex : {Sex::female, Sex::male}) {
        for (double a : {24.0, 30.3, 61.0, 100.5, 150.0, 239.9}) {
            double lo = 10, hi = 60;
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (lo + hi);
                (growth::assess(table, sex, a, mid).label == growth::Label::obese ? hi : lo) = mid;
            }
            // no gap: just below is not obese, the boundary itself is
            CHECK(growth::assess(table, sex, a, lo).label != growth::Label::obese);
            CHECK(growth::assess(table, sex, a, hi).label == growth::Label::obese);
            CHECK(hi - lo < 1e-9);
            CHECK(growth::assess(table, sex, a, hi).percentile == doctest::Approx(95.0).epsilon(1e-6));
        }
        for (double l : {50.0, 70.0, 95.0}) {
            double lo = 1, hi = 30;
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (lo + hi);
                (growth::assess_weight_for_length(table, sex, l, mid).label == growth::Label::obese ? hi : lo) = mid;
            }
            CHECK(growth::assess_weight_for_length(table, sex, l, lo).label != growth::Label::obese);
            CHECK(growth::assess_weight_for_length(table, sex, l, hi).label == growth::Label::obese);
        }
    }
}

TEST_CASE("weight-for-length at exact keys") {
    const auto& table = t::lms();
    for (const auto& row : table.curve(growth::Metric::weight_for_length, Sex::male)) {
        CHECK(std::abs(growth::lms_z(table, growth::Metric::weight_for_length, Sex::male, row.key, row.M)) < 1e-12);
    }
}

TEST_CASE("published CDC BMI percentiles") {
    std::ifstream in(t::fixture("cdc_bmi_percentiles.txt"));
    std::string line;
    int rows = 0;
    const auto& table = t::lms();
    const double zs[4] = {growth::z_from_probability(0.05), 0, growth::z_from_probability(0.85),
                          growth::z_from_probability(0.95)};
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), '|', ' ');
        std::istringstream f(line);
        std::string sex_name;
        double age, p[4];
        f >> sex_name >> age >> p[0] >> p[1] >> p[2] >> p[3];
        const Sex sex = sex_name == "male" ? Sex::male : Sex::female;
        for (int k = 0; k < 4; ++k) {
            CHECK(growth::value_at_z(table, growth::Metric::bmi_for_age, sex, age, zs[k]) ==
                  doctest::Approx(p[k]).epsilon(1e-6));
        }
        CHECK(growth::assess(table, sex, age, p[3]).percentile == doctest::Approx(95.0).epsilon(1e-6));
        ++rows;
    }
    CHECK(rows > 400);
}
