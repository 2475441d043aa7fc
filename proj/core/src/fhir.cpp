#include "pedrisk/fhir.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "httplib.h"
#include "pedrisk/error.hpp"

namespace pedrisk::fhir {

namespace {

// ---------------------------------------------------------------------------
// Type-checked JSON access. Bundles arrive from outside, so nothing below may
// assume a field has the type the FHIR schema promises.
// ---------------------------------------------------------------------------

const Json* field(const Json& obj, std::string_view key) {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

std::optional<std::string> string_field(const Json& obj, std::string_view key) {
    const Json* v = field(obj, key);
    if (v == nullptr || !v->is_string()) return std::nullopt;
    return v->get<std::string>();
}

const Json* array_field(const Json& obj, std::string_view key) {
    const Json* v = field(obj, key);
    return v != nullptr && v->is_array() ? v : nullptr;
}

[[noreturn]] void schema(const std::string& what) { throw Error(ErrorCode::SchemaViolation, what); }

bool is_reference_to(const Json& ref, const std::string& patient_id, const std::string& full_url) {
    auto target = string_field(ref, "reference");
    if (!target) return false;
    if (*target == "Patient/" + patient_id) return true;
    if (!full_url.empty() && *target == full_url) return true;
    const std::string suffix = "/Patient/" + patient_id;
    return target->size() > suffix.size() &&
           target->compare(target->size() - suffix.size(), suffix.size(), suffix) == 0;
}

const Json* subject_of(const Json& resource, std::string_view type) {
    if (type == "FamilyMemberHistory") return field(resource, "patient");
    if (type == "Coverage") return field(resource, "beneficiary");
    return field(resource, "subject");
}

// Markers that only exist in DSTU2/STU3 payloads; R4 renamed or retyped them.
bool looks_pre_r4(const Json& resource, std::string_view type) {
    if (auto meta = field(resource, "meta")) {
        if (auto v = string_field(*meta, "fhirVersion"); v && v->rfind("4.", 0) != 0) return true;
    }
    if (auto v = string_field(resource, "fhirVersion"); v && v->rfind("4.", 0) != 0) return true;
    if (type == "Procedure" || type == "FamilyMemberHistory") {
        if (field(resource, "notDone") != nullptr) return true;
    }
    if (type == "Condition") {
        if (field(resource, "assertedDate") != nullptr) return true;
        if (auto cs = field(resource, "clinicalStatus"); cs != nullptr && cs->is_string()) return true;
    }
    if ((type == "Observation" || type == "MedicationRequest") && field(resource, "context") != nullptr) {
        return true;
    }
    return false;
}

enum class Kind { patient, observation, condition, medication_request, procedure, family_history, coverage, other };

Kind kind_of(std::string_view type) {
    if (type == "Patient") return Kind::patient;
    if (type == "Observation") return Kind::observation;
    if (type == "Condition") return Kind::condition;
    if (type == "MedicationRequest") return Kind::medication_request;
    if (type == "Procedure") return Kind::procedure;
    if (type == "FamilyMemberHistory") return Kind::family_history;
    if (type == "Coverage") return Kind::coverage;
    return Kind::other;
}

/// Accumulates resources from one or many bundles and applies the
/// single-patient checks once everything has been seen.
class Collector {
public:
    explicit Collector(Source source) { set_.source = source; }

    void add(const Json& resource, std::string full_url) {
        if (!resource.is_object()) schema("entry.resource is not an object");
        auto type = string_field(resource, "resourceType");
        if (!type) schema("resource without resourceType");
        if (looks_pre_r4(resource, *type)) schema("pre-R4 " + *type + " content (only FHIR R4 is accepted)");
        const Kind kind = kind_of(*type);
        if (kind == Kind::other) {
            ++set_.skipped_unknown;
            return;
        }
        if (kind == Kind::patient) {
            auto id = string_field(resource, "id");
            if (!id || id->empty()) schema("Patient.id absent");
            if (patient_ && *id == patient_id_) return;  // same patient repeated across pages
            if (patient_) throw Error(ErrorCode::MultiplePatients, "more than one Patient resource");
            if (!string_field(resource, "birthDate")) schema("Patient.birthDate absent");
            patient_ = resource;
            patient_id_ = *id;
            patient_url_ = std::move(full_url);
            return;
        }
        const Json* subject = subject_of(resource, *type);
        if (subject == nullptr || !string_field(*subject, "reference")) {
            schema(*type + " without a subject reference");
        }
        pending_.push_back({kind, resource});
    }

    void set_timestamp(std::optional<Date> ts) { set_.timestamp = ts; }

    FhirResourceSet finish() && {
        if (!patient_) throw Error(ErrorCode::MissingPatient, "no Patient resource");
        set_.patient = std::move(*patient_);
        for (auto& [kind, res] : pending_) {
            if (!is_reference_to(*subject_of(res, res["resourceType"].get<std::string>()), patient_id_,
                                 patient_url_)) {
                ++set_.rejected_foreign;
                continue;
            }
            switch (kind) {
                case Kind::observation: set_.observations.push_back(std::move(res)); break;
                case Kind::condition: set_.conditions.push_back(std::move(res)); break;
                case Kind::medication_request: set_.medication_requests.push_back(std::move(res)); break;
                case Kind::procedure: set_.procedures.push_back(std::move(res)); break;
                case Kind::family_history: set_.family_histories.push_back(std::move(res)); break;
                case Kind::coverage: set_.coverages.push_back(std::move(res)); break;
                default: break;
            }
        }
        return std::move(set_);
    }

private:
    FhirResourceSet set_;
    std::optional<Json> patient_;
    std::string patient_id_;
    std::string patient_url_;
    std::vector<std::pair<Kind, Json>> pending_;
};

/// Walks Bundle.entry[].resource into the collector; returns the `next` link if any.
std::optional<std::string> ingest_bundle(const Json& bundle, Collector& collector) {
    if (!bundle.is_object()) schema("document is not a JSON object");
    auto type = string_field(bundle, "resourceType");
    if (!type) schema("document without resourceType");
    if (*type != "Bundle") schema("expected a Bundle, got " + *type);
    if (looks_pre_r4(bundle, "Bundle")) schema("pre-R4 Bundle");
    if (const Json* bt = field(bundle, "type")) {
        if (!bt->is_string()) schema("Bundle.type is not a string");
        const auto& s = bt->get_ref<const std::string&>();
        if (s != "searchset" && s != "collection") schema("unsupported Bundle.type " + s);
    }
    if (const Json* entries = field(bundle, "entry")) {
        if (!entries->is_array()) schema("Bundle.entry is not an array");
        for (const auto& entry : *entries) {
            if (!entry.is_object()) schema("Bundle.entry item is not an object");
            const Json* resource = field(entry, "resource");
            if (resource == nullptr) schema("Bundle.entry without resource");
            collector.add(*resource, string_field(entry, "fullUrl").value_or(""));
        }
    }
    if (const Json* links = array_field(bundle, "link")) {
        for (const auto& link : *links) {
            if (string_field(link, "relation").value_or("") == "next") {
                if (auto url = string_field(link, "url")) return url;
            }
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Normalization helpers
// ---------------------------------------------------------------------------

std::optional<std::pair<CodeSystem, std::string>> first_code(const Json* cc) {
    if (cc == nullptr) return std::nullopt;
    const Json* codings = array_field(*cc, "coding");
    if (codings == nullptr) return std::nullopt;
    std::optional<std::pair<CodeSystem, std::string>> fallback;
    for (const auto& c : *codings) {
        auto code = string_field(c, "code");
        if (!code || code->empty()) continue;
        const CodeSystem sys = code_system_for_uri(string_field(c, "system").value_or(""));
        if (sys != CodeSystem::local) return std::make_pair(sys, *code);
        if (!fallback) fallback = std::make_pair(sys, *code);
    }
    return fallback;
}

std::optional<Date> date_of(const Json& resource, std::initializer_list<std::string_view> path) {
    const Json* node = &resource;
    for (auto key : path) {
        node = field(*node, key);
        if (node == nullptr) return std::nullopt;
    }
    if (!node->is_string()) return std::nullopt;
    return parse_date(node->get_ref<const std::string&>());
}

using Path = std::initializer_list<std::string_view>;

std::optional<Date> first_date(const Json& resource, std::initializer_list<Path> paths) {
    for (const auto& p : paths) {
        if (auto d = date_of(resource, p)) return d;
    }
    return std::nullopt;
}

std::string extension_code(const Json& patient, std::string_view url) {
    const Json* exts = array_field(patient, "extension");
    if (exts == nullptr) return {};
    for (const auto& ext : *exts) {
        if (string_field(ext, "url").value_or("") != url) continue;
        const Json* subs = array_field(ext, "extension");
        if (subs == nullptr) continue;
        for (const auto& sub : *subs) {
            if (string_field(sub, "url").value_or("") != "ombCategory") continue;
            if (const Json* coding = field(sub, "valueCoding")) {
                if (auto code = string_field(*coding, "code")) return *code;
            }
        }
    }
    return {};
}

std::string display_name(const Json& patient) {
    const Json* names = array_field(patient, "name");
    if (names == nullptr || names->empty()) return {};
    const Json& n = names->front();
    if (auto text = string_field(n, "text")) return *text;
    std::string out;
    if (const Json* given = array_field(n, "given")) {
        for (const auto& g : *given) {
            if (!g.is_string()) continue;
            if (!out.empty()) out += ' ';
            out += g.get<std::string>();
        }
    }
    if (auto family = string_field(n, "family")) {
        if (!out.empty()) out += ' ';
        out += *family;
    }
    return out;
}

std::string region_of(const Json& patient) {
    const Json* addresses = array_field(patient, "address");
    if (addresses == nullptr || addresses->empty()) return {};
    auto postal = string_field(addresses->front(), "postalCode");
    if (!postal) return {};
    return postal->substr(0, std::min<std::size_t>(3, postal->size()));
}

std::int32_t age_between(Date birth, Date when, std::string_view what) {
    const auto days = (when - birth).count();
    if (days < 0) throw Error(ErrorCode::NegativeAge, std::string(what) + " dated before birth");
    if (days > std::numeric_limits<std::int32_t>::max()) schema("date out of range");
    return static_cast<std::int32_t>(days);
}

Date require_date(std::optional<Date> d, std::string_view what) {
    if (!d) throw Error(ErrorCode::MissingDate, std::string(what) + " without a usable clinical date");
    return *d;
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

struct Url {
    std::string origin;  // scheme://host[:port]
    std::string path;    // path + query, starts with '/'
};

Url split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::Transport, "not an absolute URL: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpSession {
public:
    explicit HttpSession(const FetchOptions& options) : options_(options) {}

    /// GET returning the parsed body. Maps transport failures and auth/404
    /// statuses onto the library's error codes.
    std::pair<int, Json> get(const std::string& url) {
        const Url u = split_url(url);
        auto& client = client_for(u.origin);
        httplib::Headers headers{{"Accept", "application/fhir+json"}};
        if (options_.auth_token) headers.emplace("Authorization", "Bearer " + *options_.auth_token);
        auto res = client.Get(u.path, headers);
        if (!res) throw Error(ErrorCode::Transport, "GET " + url + ": " + httplib::to_string(res.error()));
        if (res->status == 401 || res->status == 403) {
            throw Error(ErrorCode::Unauthorized, "GET " + url + " returned " + std::to_string(res->status));
        }
        if (res->status != 200) return {res->status, Json()};
        Json body = Json::parse(res->body, nullptr, false);
        if (body.is_discarded()) throw Error(ErrorCode::MalformedDocument, "GET " + url + ": body is not JSON");
        return {200, std::move(body)};
    }

private:
    httplib::Client& client_for(const std::string& origin) {
        auto it = clients_.find(origin);
        if (it == clients_.end()) {
            auto client = std::make_unique<httplib::Client>(origin);
            if (!client->is_valid()) throw Error(ErrorCode::Transport, "unsupported server URL " + origin);
            const auto secs = options_.timeout.count() / 1000;
            const auto usecs = (options_.timeout.count() % 1000) * 1000;
            client->set_connection_timeout(secs, usecs);
            client->set_read_timeout(secs, usecs);
            client->set_write_timeout(secs, usecs);
            it = clients_.emplace(origin, std::move(client)).first;
        }
        return *it->second;
    }

    const FetchOptions& options_;
    std::map<std::string, std::unique_ptr<httplib::Client>> clients_;
};

std::string trim_trailing_slash(std::string s) {
    while (!s.empty() && s.back() == '/') s.pop_back();
    return s;
}

}  // namespace

std::string_view uri_for(CodeSystem system) noexcept {
    switch (system) {
        case CodeSystem::SNOMED: return system_uri::snomed;
        case CodeSystem::RxNorm: return system_uri::rxnorm;
        case CodeSystem::CPT: return system_uri::cpt;
        case CodeSystem::LOINC: return system_uri::loinc;
        case CodeSystem::local: break;
    }
    return system_uri::local;
}

CodeSystem code_system_for_uri(std::string_view uri) noexcept {
    if (uri == system_uri::snomed) return CodeSystem::SNOMED;
    if (uri == system_uri::rxnorm) return CodeSystem::RxNorm;
    if (uri == system_uri::cpt) return CodeSystem::CPT;
    if (uri == system_uri::loinc) return CodeSystem::LOINC;
    return CodeSystem::local;
}

std::string normalize_payer(std::string_view code) {
    static const std::set<std::string_view> kPublic{"public", "PUBLICPOL", "MCPOL", "MCAIDPOL", "CHIP",
                                                    "medicaid", "medicare"};
    static const std::set<std::string_view> kPrivate{"private", "EHCPOL", "HIP", "HMO", "PPO", "POS",
                                                     "commercial"};
    if (kPublic.count(code) != 0) return "public";
    if (kPrivate.count(code) != 0) return "private";
    return {};
}

FhirResourceSet parse_bundle(std::string_view raw_bytes) {
    Json doc = Json::parse(raw_bytes.begin(), raw_bytes.end(), nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::MalformedDocument, "body is not valid JSON");
    try {
        Collector collector(Source::posted_bundle);
        ingest_bundle(doc, collector);
        if (auto ts = string_field(doc, "timestamp")) collector.set_timestamp(parse_date(*ts));
        return std::move(collector).finish();
    } catch (const Json::exception& e) {
        schema(e.what());
    }
}

FhirResourceSet fetch_patient_everything(const std::string& server_base_url, const std::string& patient_id,
                                         const FetchOptions& options) {
    if (patient_id.empty()) throw Error(ErrorCode::NotFound, "empty patient id");
    const std::string base = trim_trailing_slash(server_base_url);
    HttpSession http(options);
    Collector collector(Source::fetched);
    try {
        auto [status, patient] = http.get(base + "/Patient/" + httplib::detail::encode_url(patient_id));
        if (status == 404 || status == 410) throw Error(ErrorCode::NotFound, "patient " + patient_id);
        if (status != 200) throw Error(ErrorCode::Transport, "Patient read returned " + std::to_string(status));
        collector.add(patient, base + "/Patient/" + patient_id);

        const std::string escaped = httplib::detail::encode_query_param(patient_id);
        const std::vector<std::pair<std::string, bool>> searches{
            {"Observation?patient=" + escaped, true},
            {"Condition?patient=" + escaped, true},
            {"MedicationRequest?patient=" + escaped, true},
            {"Procedure?patient=" + escaped, true},
            {"FamilyMemberHistory?patient=" + escaped, true},
            {"Coverage?beneficiary=" + escaped, false},  // optional on most servers
        };
        for (const auto& [query, required] : searches) {
            std::set<std::string> seen;
            std::optional<std::string> next = base + "/" + query;
            while (next) {
                if (!seen.insert(*next).second) throw Error(ErrorCode::PaginationLoop, "page repeated: " + *next);
                if (seen.size() > options.max_pages) throw Error(ErrorCode::PaginationLoop, "page limit reached");
                auto [st, page] = http.get(*next);
                if (st != 200) {
                    if (!required) break;
                    throw Error(st == 404 ? ErrorCode::NotFound : ErrorCode::Transport,
                                "GET " + *next + " returned " + std::to_string(st));
                }
                next = ingest_bundle(page, collector);
            }
        }
        return std::move(collector).finish();
    } catch (const Json::exception& e) {
        schema(e.what());
    }
}

PatientRecord to_patient_record(const FhirResourceSet& res) {
    try {
        PatientRecord rec;
        const Json& p = res.patient;
        rec.patient_id = string_field(p, "id").value_or("");
        auto birth = parse_date(string_field(p, "birthDate").value_or(""));
        if (!birth) schema("Patient.birthDate is not a date");
        rec.birth_date = *birth;
        const auto gender = string_field(p, "gender").value_or("");
        rec.sex = gender == "female" ? Sex::female : gender == "male" ? Sex::male : Sex::unknown;
        rec.display_name = display_name(p);
        rec.race = extension_code(p, system_uri::us_core_race);
        rec.ethnicity = extension_code(p, system_uri::us_core_ethnicity);
        rec.region = region_of(p);
        rec.extraction_date = res.timestamp;
        for (const auto& cov : res.coverages) {
            if (auto code = first_code(field(cov, "type"))) {
                rec.insurance = normalize_payer(code->second);
                if (!rec.insurance.empty()) break;
            }
        }

        auto push = [&](Domain domain, std::pair<CodeSystem, std::string> code, Date when,
                        std::string_view what) -> ClinicalEvent& {
            ClinicalEvent ev;
            ev.age_days = age_between(rec.birth_date, when, what);
            ev.domain = domain;
            ev.code_system = code.first;
            ev.code = std::move(code.second);
            rec.events.push_back(std::move(ev));
            return rec.events.back();
        };

        for (const auto& obs : res.observations) {
            const Json* qty = field(obs, "valueQuantity");
            const Json* value = qty != nullptr ? field(*qty, "value") : nullptr;
            auto code = first_code(field(obs, "code"));
            // Coded or text-valued observations carry nothing the model can quantize.
            if (value == nullptr || !value->is_number() || !code) continue;
            const Date when = require_date(first_date(obs, {{"effectiveDateTime"}, {"issued"}}), "Observation");
            auto& ev = push(Domain::measurement, std::move(*code), when, "Observation");
            ev.value = value->get<double>();
            if (auto unit = string_field(*qty, "code")) ev.unit = *unit;
            else if (auto u = string_field(*qty, "unit")) ev.unit = *u;
        }
        for (const auto& cond : res.conditions) {
            auto code = first_code(field(cond, "code"));
            if (!code) schema("Condition.code without a coding");
            push(Domain::condition, std::move(*code),
                 require_date(first_date(cond, {{"onsetDateTime"}, {"recordedDate"}}), "Condition"), "Condition");
        }
        for (const auto& med : res.medication_requests) {
            auto code = first_code(field(med, "medicationCodeableConcept"));
            if (!code) schema("MedicationRequest without medicationCodeableConcept coding");
            push(Domain::medication, std::move(*code),
                 require_date(first_date(med, {{"authoredOn"}}), "MedicationRequest"), "MedicationRequest");
        }
        for (const auto& proc : res.procedures) {
            auto code = first_code(field(proc, "code"));
            if (!code) schema("Procedure.code without a coding");
            push(Domain::procedure, std::move(*code),
                 require_date(first_date(proc, {{"performedDateTime"}, {"performedPeriod", "start"}}), "Procedure"),
                 "Procedure");
        }
        for (const auto& fmh : res.family_histories) {
            const Date when = require_date(first_date(fmh, {{"date"}}), "FamilyMemberHistory");
            const Json* conditions = array_field(fmh, "condition");
            if (conditions == nullptr) continue;
            for (const auto& c : *conditions) {
                auto code = first_code(field(c, "code"));
                if (!code) schema("FamilyMemberHistory.condition without a coding");
                push(Domain::family_history, std::move(*code), when, "FamilyMemberHistory");
            }
        }

        std::sort(rec.events.begin(), rec.events.end(), canonical_less);
        if (rec.extraction_date) {
            const auto limit = (*rec.extraction_date - rec.birth_date).count();
            if (!rec.events.empty() && rec.events.back().age_days > limit) {
                schema("event dated after the bundle timestamp");
            }
        }
        return rec;
    } catch (const Json::exception& e) {
        schema(e.what());
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

Json codeable(CodeSystem system, const std::string& code) {
    return {{"coding", Json::array({{{"system", std::string(uri_for(system))}, {"code", code}}})}};
}

Json omb_extension(std::string_view url, std::string_view system, const std::string& code) {
    return {{"url", std::string(url)},
            {"extension", Json::array({{{"url", "ombCategory"},
                                        {"valueCoding", {{"system", std::string(system)}, {"code", code}}}}})}};
}

}  // namespace

Json to_bundle(const PatientRecord& record) {
    const std::string subject = "Patient/" + record.patient_id;
    Json patient = {{"resourceType", "Patient"},
                    {"id", record.patient_id},
                    {"gender", record.sex == Sex::female ? "female" : record.sex == Sex::male ? "male" : "unknown"},
                    {"birthDate", format_date(record.birth_date)}};
    if (!record.display_name.empty()) patient["name"] = Json::array({{{"text", record.display_name}}});
    constexpr std::string_view kOmb = "urn:oid:2.16.840.1.113883.6.238";
    Json extensions = Json::array();
    if (!record.race.empty()) extensions.push_back(omb_extension(system_uri::us_core_race, kOmb, record.race));
    if (!record.ethnicity.empty()) {
        extensions.push_back(omb_extension(system_uri::us_core_ethnicity, kOmb, record.ethnicity));
    }
    if (!extensions.empty()) patient["extension"] = extensions;
    if (!record.region.empty()) patient["address"] = Json::array({{{"postalCode", record.region}}});

    Json entries = Json::array();
    entries.push_back({{"fullUrl", "urn:uuid:patient-" + record.patient_id}, {"resource", patient}});
    std::size_t n = 0;
    auto add = [&](Json resource) {
        resource["id"] = record.patient_id + "-" + std::to_string(++n);
        entries.push_back({{"resource", std::move(resource)}});
    };
    if (!record.insurance.empty()) {
        add({{"resourceType", "Coverage"},
             {"status", "active"},
             {"type", {{"coding", Json::array({{{"code", record.insurance}}})}}},
             {"beneficiary", {{"reference", subject}}}});
    }
    for (const auto& ev : record.events) {
        const std::string date = format_date(record.birth_date + std::chrono::days(ev.age_days));
        switch (ev.domain) {
            case Domain::measurement: {
                Json qty = {{"value", ev.value.value_or(0.0)}};
                if (ev.unit) {
                    qty["system"] = std::string(system_uri::ucum);
                    qty["code"] = *ev.unit;
                }
                add({{"resourceType", "Observation"},
                     {"status", "final"},
                     {"code", codeable(ev.code_system, ev.code)},
                     {"subject", {{"reference", subject}}},
                     {"effectiveDateTime", date},
                     {"valueQuantity", qty}});
                break;
            }
            case Domain::condition:
                add({{"resourceType", "Condition"},
                     {"code", codeable(ev.code_system, ev.code)},
                     {"subject", {{"reference", subject}}},
                     {"onsetDateTime", date}});
                break;
            case Domain::medication:
                add({{"resourceType", "MedicationRequest"},
                     {"status", "completed"},
                     {"intent", "order"},
                     {"medicationCodeableConcept", codeable(ev.code_system, ev.code)},
                     {"subject", {{"reference", subject}}},
                     {"authoredOn", date}});
                break;
            case Domain::procedure:
                add({{"resourceType", "Procedure"},
                     {"status", "completed"},
                     {"code", codeable(ev.code_system, ev.code)},
                     {"subject", {{"reference", subject}}},
                     {"performedDateTime", date}});
                break;
            case Domain::family_history:
                add({{"resourceType", "FamilyMemberHistory"},
                     {"status", "completed"},
                     {"patient", {{"reference", subject}}},
                     {"date", date},
                     {"relationship", {{"coding", Json::array({{{"code", "FAMMEMB"}}})}}},
                     {"condition", Json::array({{{"code", codeable(ev.code_system, ev.code)}}})}});
                break;
        }
    }
    Json bundle = {{"resourceType", "Bundle"}, {"type", "collection"}, {"entry", entries}};
    if (record.extraction_date) bundle["timestamp"] = format_date(*record.extraction_date) + "T00:00:00Z";
    return bundle;
}

}  // namespace pedrisk::fhir
