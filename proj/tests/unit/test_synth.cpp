#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "pedrisk/fhir.hpp"
#include "pedrisk/synth.hpp"

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

const vocab::FeatureRegistry& registry() {
    static const auto r = vocab::load_registry(t::data_file("demo_registry.txt"));
    return r;
}

ClinicalEvent event(std::int32_t day, Domain d, std::string code, std::optional<double> v = std::nullopt) {
    const auto system = d == Domain::measurement ? CodeSystem::LOINC : CodeSystem::SNOMED;
    return {day, d, system, std::move(code), v, std::nullopt};
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
    synth::SynthConfig c;
    c.n_patients = 60;
    c.seed = 3;
    c.planted = {{15, 3.0}};
    const auto a = synth::members_of(synth::generate(c, registry(), t::lms()));
    const auto b = synth::members_of(synth::generate(c, registry(), t::lms()));
    CHECK(a == b);
    c.seed = 4;
    CHECK(synth::members_of(synth::generate(c, registry(), t::lms())) != a);

    std::set<std::string> ids;
    for (const auto& m : a) {
        CHECK(ids.insert(m.record.patient_id).second);
        CHECK(std::is_sorted(m.record.events.begin(), m.record.events.end(), canonical_less));
        CHECK(m.record.sex != Sex::unknown);
        CHECK(m.index_year >= c.index_year_min);
        CHECK(m.index_year <= c.index_year_max);
        CHECK(std::find(c.sites.begin(), c.sites.end(), m.site) != c.sites.end());
    }
}

TEST_CASE("most synthetic children are eligible") {
    synth::SynthConfig c;
    c.n_patients = 300;
    c.seed = 5;
    const auto patients = synth::generate(c, registry(), t::lms());
    const auto kept = synth::apply_eligibility(synth::members_of(patients));
    CHECK(kept.size() > 150);
    CHECK(kept.size() < patients.size());
    for (const auto& m : kept) CHECK(synth::eligible(m.record));
}

TEST_CASE("eligibility rules") {
    PatientRecord r;
    CHECK_FALSE(synth::eligible(r));
    r.events = {event(30, Domain::measurement, "39156-5", 16.0), event(30 + 6 * 366, Domain::condition, "195967001")};
    CHECK(synth::eligible(r));
    // span shorter than five years
    r.events[1].age_days = 30 + 4 * 365;
    CHECK_FALSE(synth::eligible(r));
    r.events[1].age_days = 30 + 6 * 366;
    // no BMI and no weight/height pair
    auto no_bmi = r;
    no_bmi.events[0] = event(30, Domain::measurement, "29463-7", 4.0);
    CHECK_FALSE(synth::eligible(no_bmi));
    no_bmi.events.push_back(event(30, Domain::measurement, "8302-2", 55.0));
    CHECK(synth::eligible(no_bmi));
    for (auto code : synth::kExclusionCodes) {
        auto excluded = r;
        excluded.events.push_back(event(400, Domain::condition, std::string(code)));
        CHECK_FALSE(synth::eligible(excluded));
    }
}

TEST_CASE("planted carriers become obese more often") {
    synth::SynthConfig c;
    c.n_patients = 1500;
    c.seed = 9;
    c.planted = {{15, 4.0}};
    int carriers = 0, carrier_obese = 0, others = 0, other_obese = 0;
    for (const auto& p : synth::generate(c, registry(), t::lms())) {
        const auto it = p.truth.obese_by_age.find(6);
        if (it == p.truth.obese_by_age.end()) continue;
        const bool carrier = !p.truth.carried.empty();
        (carrier ? carriers : others) += 1;
        if (it->second) (carrier ? carrier_obese : other_obese) += 1;
        if (carrier) {
            // the planted code is present in the record before age two
            const auto& f = registry().feature(15);
            const bool present = std::any_of(p.member.record.events.begin(), p.member.record.events.end(), [&](const auto& e) {
                return vocab::map_code(registry(), e.code_system, e.code) == 15 && e.age_days < 731;
            });
            CHECK_MESSAGE(present, f.label);
        }
    }
    REQUIRE(carriers > 100);
    REQUIRE(others > 100);
    const double rc = static_cast<double>(carrier_obese) / carriers, ro = static_cast<double>(other_obese) / others;
    CHECK(rc > 1.5 * ro);
}

TEST_CASE("unknown planted feature") {
    synth::SynthConfig c;
    c.n_patients = 5;
    c.planted = {{100000, 2.0}};
    CHECK(code_of([&] { (void)synth::generate(c, registry(), t::lms()); }) == ErrorCode::UnknownPlantedFeature);
    // measurements cannot be planted as coded events
    c.planted = {{33, 2.0}};
    CHECK(code_of([&] { (void)synth::generate(c, registry(), t::lms()); }) == ErrorCode::UnknownPlantedFeature);
    c.n_patients = -1;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("date skew keeps ages") {
    PatientRecord r;
    r.birth_date = Date{std::chrono::year{2014} / 6 / 1};
    r.extraction_date = Date{std::chrono::year{2022} / 6 / 1};
    r.events = {event(100, Domain::condition, "1")};
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto k = synth::skew_dates(r, s, 180);
        const auto shift = (k.birth_date - r.birth_date).count();
        CHECK(std::abs(shift) <= 180);
        CHECK((*k.extraction_date - *r.extraction_date).count() == shift);
        CHECK(k.events == r.events);
        CHECK(synth::skew_dates(r, s, 180) == k);
    }
}

TEST_CASE("synth config json") {
    synth::SynthConfig c;
    c.n_patients = 77;
    c.seed = 12;
    c.planted = {{15, 4.0}, {21, 2.5}};
    const auto back = nlohmann::json(c).get<synth::SynthConfig>();
    CHECK(back.n_patients == 77);
    CHECK(back.seed == 12);
    CHECK(back.planted == c.planted);
    CHECK(nlohmann::json(back) == nlohmann::json(c));
}

TEST_CASE("cohort directory round trip through FHIR bundles") {
    synth::SynthConfig c;
    c.n_patients = 25;
    c.seed = 2;
    const auto cohort = synth::members_of(synth::generate(c, registry(), t::lms()));
    const auto dir = t::temp_dir("synth_io");
    synth::write_cohort(cohort, dir);
    CHECK(std::filesystem::exists(dir / "manifest.txt"));
    const auto back = synth::read_cohort(dir);
    REQUIRE(back.size() == cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        CHECK(back[i].site == cohort[i].site);
        CHECK(back[i].index_year == cohort[i].index_year);
        auto expected = cohort[i].record;
        auto got = back[i].record;
        got.extraction_date = expected.extraction_date;
        CHECK(got == expected);
    }
    CHECK(code_of([&] { (void)synth::read_cohort(dir / "nope"); }) == ErrorCode::Io);
}

TEST_CASE("derived seeds differ per index") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(synth::derive_seed(7, i));
    CHECK(seen.size() == 1000);
    CHECK(synth::derive_seed(7, 3) == synth::derive_seed(7, 3));
    CHECK(synth::derive_seed(7, 3) != synth::derive_seed(8, 3));
}
