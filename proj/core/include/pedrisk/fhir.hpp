#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pedrisk/record.hpp"

/// FHIR R4 ingestion: bundle parsing, server reads, and normalization into
/// PatientRecord.
namespace pedrisk::fhir {

using Json = nlohmann::json;

namespace system_uri {
inline constexpr std::string_view snomed = "http://snomed.info/sct";
inline constexpr std::string_view rxnorm = "http://www.nlm.nih.gov/research/umls/rxnorm";
inline constexpr std::string_view cpt = "http://www.ama-assn.org/go/cpt";
inline constexpr std::string_view loinc = "http://loinc.org";
inline constexpr std::string_view local = "urn:pedrisk:local";
inline constexpr std::string_view ucum = "http://unitsofmeasure.org";
inline constexpr std::string_view us_core_race =
    "http://hl7.org/fhir/us/core/StructureDefinition/us-core-race";
inline constexpr std::string_view us_core_ethnicity =
    "http://hl7.org/fhir/us/core/StructureDefinition/us-core-ethnicity";
}  // namespace system_uri

std::string_view uri_for(CodeSystem system) noexcept;
CodeSystem code_system_for_uri(std::string_view uri) noexcept;

enum class Source { posted_bundle, fetched };

/// Raw resources grouped by type, already checked to belong to one patient.
struct FhirResourceSet {
    Json patient;
    std::vector<Json> observations;
    std::vector<Json> conditions;
    std::vector<Json> medication_requests;
    std::vector<Json> procedures;
    std::vector<Json> family_histories;
    std::vector<Json> coverages;
    Source source = Source::posted_bundle;
    std::optional<Date> timestamp;  // Bundle.timestamp, when present

    int skipped_unknown = 0;   // resources of a type we do not read
    int rejected_foreign = 0;  // resources whose subject is another patient
};

/// Parses a Bundle (type searchset or collection) posted as JSON text.
/// Total on arbitrary input: either returns or throws pedrisk::Error.
FhirResourceSet parse_bundle(std::string_view raw_bytes);

struct FetchOptions {
    std::optional<std::string> auth_token;
    std::chrono::milliseconds timeout{10'000};
    std::size_t max_pages = 10'000;
};

/// Reads Patient/{id} plus every clinical search for that patient from a FHIR
/// server, following Bundle.link[relation=next] until exhausted.
FhirResourceSet fetch_patient_everything(const std::string& server_base_url,
                                         const std::string& patient_id,
                                         const FetchOptions& options = {});

PatientRecord to_patient_record(const FhirResourceSet& resources);

/// R4 collection Bundle that to_patient_record(parse_bundle(...)) maps back to
/// an equal record. Clinical resources get ids `<patient_id>-<n>`.
Json to_bundle(const PatientRecord& record);

/// The insurance category a Coverage.type code maps to ("private", "public" or empty).
std::string normalize_payer(std::string_view code);

}  // namespace pedrisk::fhir
