#include "pedrisk/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "pedrisk/error.hpp"
#include "pedrisk/fhir.hpp"

namespace pedrisk::synth {

void SynthConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorCode::InvalidConfig, what);
    };
    require(n_patients >= 0, "n_patients must be >= 0");
    require(base_obesity_rate >= 0 && base_obesity_rate < 1, "base_obesity_rate must be in [0, 1)");
    require(carrier_rate > 0 && carrier_rate < 1, "carrier_rate must be in (0, 1)");
    for (const auto& p : planted) require(p.odds_multiplier > 0, "odds multipliers must be > 0");
    require(z_sd > 0 && z_noise_sd >= 0 && z_noise_sd < z_sd, "need 0 <= z_noise_sd < z_sd");
    require(z_correlation_years > 0, "z_correlation_years must be > 0");
    require(sick_visits_per_year >= 0, "sick_visits_per_year must be >= 0");
    require(family_history_rate >= 0 && family_history_rate <= 1, "family_history_rate must be in [0, 1]");
    require(exclusion_rate >= 0 && exclusion_rate <= 1, "exclusion_rate must be in [0, 1]");
    require(min_followup_years >= 1 && max_followup_years >= min_followup_years && max_followup_years <= 19,
            "follow-up years must satisfy 1 <= min <= max <= 19");
    require(!sites.empty(), "at least one site");
    require(index_year_max >= index_year_min, "index_year range is empty");
    require(skew_days >= 0, "skew_days must be >= 0");
    for (int m : well_child_months) require(m > 0 && m <= 24, "well-child months must be in (0, 24]");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    nlohmann::json planted = nlohmann::json::array();
    for (const auto& p : c.planted) planted.push_back({{"feature_id", p.feature_id}, {"odds_multiplier", p.odds_multiplier}});
    j = {{"n_patients", c.n_patients},
         {"seed", c.seed},
         {"well_child_months", c.well_child_months},
         {"base_obesity_rate", c.base_obesity_rate},
         {"planted", planted},
         {"carrier_rate", c.carrier_rate},
         {"z_sd", c.z_sd},
         {"z_noise_sd", c.z_noise_sd},
         {"z_correlation_years", c.z_correlation_years},
         {"sick_visits_per_year", c.sick_visits_per_year},
         {"family_history_rate", c.family_history_rate},
         {"exclusion_rate", c.exclusion_rate},
         {"min_followup_years", c.min_followup_years},
         {"max_followup_years", c.max_followup_years},
         {"sites", c.sites},
         {"index_year_min", c.index_year_min},
         {"index_year_max", c.index_year_max},
         {"skew_days", c.skew_days}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    const SynthConfig d;
    c.n_patients = j.value("n_patients", d.n_patients);
    c.seed = j.value("seed", d.seed);
    c.well_child_months = j.value("well_child_months", d.well_child_months);
    c.base_obesity_rate = j.value("base_obesity_rate", d.base_obesity_rate);
    c.planted.clear();
    if (auto it = j.find("planted"); it != j.end()) {
        for (const auto& p : *it) c.planted.push_back({p.at("feature_id").get<int>(), p.at("odds_multiplier").get<double>()});
    }
    c.carrier_rate = j.value("carrier_rate", d.carrier_rate);
    c.z_sd = j.value("z_sd", d.z_sd);
    c.z_noise_sd = j.value("z_noise_sd", d.z_noise_sd);
    c.z_correlation_years = j.value("z_correlation_years", d.z_correlation_years);
    c.sick_visits_per_year = j.value("sick_visits_per_year", d.sick_visits_per_year);
    c.family_history_rate = j.value("family_history_rate", d.family_history_rate);
    c.exclusion_rate = j.value("exclusion_rate", d.exclusion_rate);
    c.min_followup_years = j.value("min_followup_years", d.min_followup_years);
    c.max_followup_years = j.value("max_followup_years", d.max_followup_years);
    c.sites = j.value("sites", d.sites);
    c.index_year_min = j.value("index_year_min", d.index_year_min);
    c.index_year_max = j.value("index_year_max", d.index_year_max);
    c.skew_days = j.value("skew_days", d.skew_days);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 finalizer over a golden-ratio stride
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

namespace {

constexpr std::string_view kFemaleNames[] = {"Ava", "Maya", "Zoe", "Lena", "Nora", "Ruth", "Iris", "Elena"};
constexpr std::string_view kMaleNames[] = {"Liam", "Omar", "Theo", "Ezra", "Jonah", "Felix", "Amir", "Caleb"};
constexpr std::string_view kFamilyNames[] = {"Rivera", "Chen",   "Okafor", "Novak", "Patel",
                                             "Jensen", "Moreau", "Silva",  "Haddad", "Kim"};
constexpr std::string_view kRegions[][2] = {{"191", "190"}, {"197", "198"}, {"328", "327"},
                                            {"606", "605"}, {"945", "946"}, {"212", "211"}};

struct FeaturePools {
    std::vector<const vocab::FeatureSpec*> conditions, medications, procedures, family;
    std::vector<const vocab::FeatureSpec*> planted;
    std::vector<double> log_odds;
};

FeaturePools pools_for(const SynthConfig& config, const vocab::FeatureRegistry& registry) {
    FeaturePools pools;
    std::set<int> planted_ids;
    for (const auto& p : config.planted) {
        if (p.feature_id < 0 || static_cast<std::size_t>(p.feature_id) >= registry.size()) {
            throw Error(ErrorCode::UnknownPlantedFeature, "feature " + std::to_string(p.feature_id));
        }
        const auto& f = registry.feature(p.feature_id);
        if (f.domain == Domain::measurement || f.codes.empty()) {
            throw Error(ErrorCode::UnknownPlantedFeature, "feature " + f.label + " cannot be planted as an event");
        }
        pools.planted.push_back(&f);
        pools.log_odds.push_back(std::log(p.odds_multiplier));
        planted_ids.insert(p.feature_id);
    }
    for (const auto& f : registry.entries()) {
        if (planted_ids.count(f.feature_id) != 0 || f.codes.empty()) continue;
        const bool excluded = std::any_of(f.codes.begin(), f.codes.end(), [](const vocab::CodeRef& c) {
            return c.system == CodeSystem::SNOMED &&
                   std::find(kExclusionCodes.begin(), kExclusionCodes.end(), c.code) != kExclusionCodes.end();
        });
        if (excluded) continue;
        switch (f.domain) {
            case Domain::condition: pools.conditions.push_back(&f); break;
            case Domain::medication: pools.medications.push_back(&f); break;
            case Domain::procedure: pools.procedures.push_back(&f); break;
            case Domain::family_history: pools.family.push_back(&f); break;
            case Domain::measurement: break;
        }
    }
    return pools;
}

double round_to(double v, double step) { return std::round(v / step) * step; }

class PatientBuilder {
public:
    PatientBuilder(PatientRecord& record, std::mt19937_64& rng) : rec_(record), rng_(rng) {}

    void coded(Domain domain, const vocab::FeatureSpec& f, std::int32_t age_days) {
        ClinicalEvent ev;
        ev.age_days = age_days;
        ev.domain = domain;
        ev.code_system = f.codes.front().system;
        ev.code = f.codes.front().code;
        rec_.events.push_back(std::move(ev));
    }

    void coded(Domain domain, CodeSystem system, std::string code, std::int32_t age_days) {
        rec_.events.push_back({age_days, domain, system, std::move(code), std::nullopt, std::nullopt});
    }

    void measurement(std::string_view loinc_code, double value, std::string unit, std::int32_t age_days) {
        rec_.events.push_back({age_days, Domain::measurement, CodeSystem::LOINC, std::string(loinc_code), value,
                               std::move(unit)});
    }

    template <typename T>
    const T& pick(const std::vector<T>& items) {
        std::uniform_int_distribution<std::size_t> d(0, items.size() - 1);
        return items[d(rng_)];
    }

private:
    PatientRecord& rec_;
    std::mt19937_64& rng_;
};

SynthPatient generate_one(const SynthConfig& config, const FeaturePools& pools, const growth::LmsTable& lms,
                          std::size_t index) {
    std::mt19937_64 rng(derive_seed(config.seed, index));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto chance = [&](double p) { return unit(rng) < p; };
    auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    SynthPatient out;
    auto& member = out.member;
    auto& rec = member.record;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06zu", index + 1);
    rec.patient_id = id;
    rec.sex = chance(0.5) ? Sex::female : Sex::male;
    const auto& given = rec.sex == Sex::female ? kFemaleNames : kMaleNames;
    rec.display_name = std::string(given[uniform_int(0, 7)]) + " " + std::string(kFamilyNames[uniform_int(0, 9)]);
    const double r = unit(rng);
    rec.race = r < 0.50 ? "2106-3" : r < 0.75 ? "2054-5" : r < 0.80 ? "2028-9" : "2131-1";
    rec.ethnicity = chance(0.18) ? "2135-2" : "2186-5";
    rec.insurance = chance(0.55) ? "public" : "private";
    const int site = uniform_int(0, static_cast<int>(config.sites.size()) - 1);
    member.site = config.sites[static_cast<std::size_t>(site)];
    rec.region = std::string(kRegions[site % std::size(kRegions)][uniform_int(0, 1)]);
    member.index_year = uniform_int(config.index_year_min, config.index_year_max);
    const int birth_year = member.index_year - 2;
    rec.birth_date = std::chrono::sys_days(std::chrono::year{birth_year} / std::chrono::January / 1) +
                     std::chrono::days(uniform_int(0, 364));
    const int followup = uniform_int(config.min_followup_years, config.max_followup_years);
    const auto last_day = static_cast<std::int32_t>(std::lround(followup * kDaysPerYear));
    rec.extraction_date = rec.birth_date + std::chrono::days(last_day + 30);

    // Propensity and the latent z mean it implies.
    const double base = std::clamp(config.base_obesity_rate, 1e-9, 1 - 1e-9);
    double logit = std::log(base / (1 - base));
    for (std::size_t k = 0; k < pools.planted.size(); ++k) {
        if (chance(config.carrier_rate)) {
            out.truth.carried.push_back(pools.planted[k]->feature_id);
            logit += pools.log_odds[k];
        }
    }
    const double p = std::clamp(1.0 / (1.0 + std::exp(-logit)), 1e-9, 1 - 1e-9);
    out.truth.propensity = p;
    const double obese_z = growth::z_from_probability(growth::kObesePercentile / 100.0);
    const double mu = obese_z + config.z_sd * growth::z_from_probability(p);
    const double latent_sd = std::sqrt(config.z_sd * config.z_sd - config.z_noise_sd * config.z_noise_sd);
    const double height_z = std::clamp(normal(rng), -2.5, 2.5);

    PatientBuilder b(rec, rng);

    // Visit ages: well-child schedule, then annual.
    struct Visit {
        std::int32_t age_days;
        int annual_year;  // 0 for infant visits
    };
    std::vector<Visit> visits;
    for (int m : config.well_child_months) {
        const auto d = static_cast<std::int32_t>(std::lround(m * kDaysPerMonth));
        if (d <= last_day) visits.push_back({d, m == 24 ? 2 : 0});
    }
    for (int y = 3; y <= followup; ++y) {
        const auto d = static_cast<std::int32_t>(std::lround(y * kDaysPerYear)) + uniform_int(-14, 14);
        visits.push_back({std::min(d, last_day), y});
    }

    const auto [wfl_lo, wfl_hi] = lms.key_range(growth::Metric::weight_for_length, rec.sex);
    double z_latent = mu + latent_sd * normal(rng);
    double t_prev = 0;
    for (const auto& v : visits) {
        const double t = v.age_days / kDaysPerYear;
        const double rho = std::exp(-(t - t_prev) / config.z_correlation_years);
        z_latent = mu + (z_latent - mu) * rho + latent_sd * std::sqrt(1 - rho * rho) * normal(rng);
        t_prev = t;
        const double z = std::clamp(z_latent + config.z_noise_sd * normal(rng), -3.5, 3.5);
        const double months = age_months(v.age_days);
        const double height =
            round_to(growth::value_at_z(lms, growth::Metric::stature_for_age, rec.sex, months, height_z), 0.1);
        if (months < 24) {
            const double key = std::clamp(height, wfl_lo, wfl_hi);
            const double weight =
                round_to(growth::value_at_z(lms, growth::Metric::weight_for_length, rec.sex, key, z), 0.01);
            b.measurement(loinc::body_weight, weight, "kg", v.age_days);
            b.measurement(loinc::body_height, height, "cm", v.age_days);
        } else {
            // BMI LMS curves have L < 0, so z must stay below the Box-Cox asymptote 1 / (-L S).
            const auto bmi_lms = lms.interpolate(growth::Metric::bmi_for_age, rec.sex, months);
            const double z_cap = bmi_lms.L < 0 ? 0.9 / (-bmi_lms.L * bmi_lms.S) : 3.5;
            const double raw = growth::lms_value(bmi_lms, std::min(z, z_cap));
            const double bmi = round_to(raw, 0.01);
            const double weight = round_to(raw * (height / 100) * (height / 100), 0.01);
            b.measurement(loinc::body_weight, weight, "kg", v.age_days);
            b.measurement(loinc::body_height, height, "cm", v.age_days);
            b.measurement(loinc::bmi, bmi, "kg/m2", v.age_days);
            if (v.annual_year > 0) {
                out.truth.obese_by_age[v.annual_year] =
                    growth::assess(lms, rec.sex, months, bmi).label == growth::Label::obese;
            }
        }
        if (v.annual_year >= 3) {
            b.measurement("8480-6", std::round(95 + 1.5 * (v.annual_year - 3) + 8 * normal(rng)), "mm[Hg]",
                          v.age_days);
        }
        if (v.age_days == static_cast<std::int32_t>(std::lround(12 * kDaysPerMonth))) {
            b.measurement("718-7", round_to(12 + 0.8 * normal(rng), 0.1), "g/dL", v.age_days);
        }
    }

    // Planted features surface in infancy, before any supported window ends.
    for (int id : out.truth.carried) {
        const auto& f = *std::find_if(pools.planted.begin(), pools.planted.end(),
                                      [id](const vocab::FeatureSpec* s) { return s->feature_id == id; });
        b.coded(f->domain, *f, std::min(uniform_int(30, 700), last_day));
    }

    std::poisson_distribution<int> sick(config.sick_visits_per_year * followup);
    const int n_sick = sick(rng);
    for (int s = 0; s < n_sick; ++s) {
        const auto age = static_cast<std::int32_t>(uniform_int(30, last_day));
        if (!pools.conditions.empty()) b.coded(Domain::condition, *b.pick(pools.conditions), age);
        if (!pools.medications.empty() && chance(0.5)) b.coded(Domain::medication, *b.pick(pools.medications), age);
        if (!pools.procedures.empty() && chance(0.03)) b.coded(Domain::procedure, *b.pick(pools.procedures), age);
    }
    for (const auto* f : pools.family) {
        if (chance(config.family_history_rate)) b.coded(Domain::family_history, *f, b.pick(visits).age_days);
    }
    if (chance(config.exclusion_rate)) {
        b.coded(Domain::condition, CodeSystem::SNOMED, std::string(kExclusionCodes[uniform_int(0, 3)]),
                uniform_int(30, last_day));
    }

    std::sort(rec.events.begin(), rec.events.end(), canonical_less);
    if (config.skew_days > 0) rec = skew_dates(std::move(rec), derive_seed(config.seed ^ 0x5EEDull, index), config.skew_days);
    return out;
}

}  // namespace

std::vector<SynthPatient> generate(const SynthConfig& config, const vocab::FeatureRegistry& registry,
                                   const growth::LmsTable& lms) {
    config.validate();
    const auto pools = pools_for(config, registry);
    std::vector<SynthPatient> out;
    out.reserve(static_cast<std::size_t>(config.n_patients));
    for (int i = 0; i < config.n_patients; ++i) out.push_back(generate_one(config, pools, lms, static_cast<std::size_t>(i)));
    return out;
}

bool eligible(const PatientRecord& record) {
    if (record.events.empty()) return false;
    const auto [lo, hi] = std::minmax_element(record.events.begin(), record.events.end(),
                                              [](const ClinicalEvent& a, const ClinicalEvent& b) {
                                                  return a.age_days < b.age_days;
                                              });
    if ((hi->age_days - lo->age_days) / kDaysPerYear < kMinSpanYears) return false;
    const auto points = growth_points(record);
    if (std::none_of(points.begin(), points.end(), [](const GrowthPoint& p) { return p.bmi.has_value(); })) return false;
    return std::none_of(record.events.begin(), record.events.end(), [](const ClinicalEvent& e) {
        return e.domain == Domain::condition && e.code_system == CodeSystem::SNOMED &&
               std::find(kExclusionCodes.begin(), kExclusionCodes.end(), e.code) != kExclusionCodes.end();
    });
}

train::Cohort apply_eligibility(train::Cohort cohort) {
    std::erase_if(cohort, [](const train::CohortMember& m) { return !eligible(m.record); });
    return cohort;
}

PatientRecord skew_dates(PatientRecord record, std::uint64_t seed, int max_days) {
    std::mt19937_64 rng(seed);
    const std::chrono::days offset(std::uniform_int_distribution<int>(-max_days, max_days)(rng));
    record.birth_date += offset;
    if (record.extraction_date) *record.extraction_date += offset;
    return record;
}

std::vector<nlohmann::json> to_fhir_bundles(const train::Cohort& cohort) {
    std::vector<nlohmann::json> out;
    out.reserve(cohort.size());
    for (const auto& m : cohort) out.push_back(fhir::to_bundle(m.record));
    return out;
}

train::Cohort members_of(const std::vector<SynthPatient>& patients) {
    train::Cohort out;
    out.reserve(patients.size());
    for (const auto& p : patients) out.push_back(p.member);
    return out;
}

void write_cohort(const train::Cohort& cohort, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "bundles");
    std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
    if (!manifest) throw Error(ErrorCode::Io, "cannot write " + (dir / "manifest.txt").string());
    manifest << "#pedrisk-cohort v1\n";
    for (const auto& m : cohort) {
        const std::string rel = "bundles/" + m.record.patient_id + ".json";
        std::ofstream out(dir / rel, std::ios::binary);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / rel).string());
        out << fhir::to_bundle(m.record).dump() << '\n';
        manifest << m.record.patient_id << '|' << rel << '|' << m.site << '|' << m.index_year << '\n';
    }
}

train::Cohort read_cohort(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt", std::ios::binary);
    if (!manifest) throw Error(ErrorCode::Io, "cannot open " + (dir / "manifest.txt").string());
    train::Cohort out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty() || line.front() == '#') continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string tok; std::getline(ss, tok, '|');) f.push_back(tok);
        if (f.size() != 4) throw Error(ErrorCode::ParseError, "manifest line " + std::to_string(line_no));
        std::ifstream in(dir / f[1], std::ios::binary);
        if (!in) throw Error(ErrorCode::Io, "cannot open " + (dir / f[1]).string());
        std::ostringstream buf;
        buf << in.rdbuf();
        train::CohortMember m;
        m.record = fhir::to_patient_record(fhir::parse_bundle(buf.str()));
        if (m.record.patient_id != f[0]) {
            throw Error(ErrorCode::ParseError, "manifest id " + f[0] + " does not match bundle " + m.record.patient_id);
        }
        m.site = f[2];
        try {
            m.index_year = std::stoi(f[3]);
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::ParseError, "manifest line " + std::to_string(line_no) + ": bad index_year");
        }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace pedrisk::synth
