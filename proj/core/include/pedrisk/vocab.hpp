#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pedrisk/record.hpp"

/// The curated concept dictionary: which codes the model sees, how they are
/// grouped into features, and how continuous measurements are binned.
namespace pedrisk::vocab {

enum class QuantMode { fixed_edges, cohort_quantiles };

struct QuantizationSpec {
    QuantMode mode = QuantMode::fixed_edges;
    std::vector<double> edges;  // fixed_edges: strictly increasing
    int quantile_count = 0;     // cohort_quantiles: in [2, 10]
    std::string unit;           // UCUM, may be empty

    /// Number of bins this spec produces once fitted.
    [[nodiscard]] int bin_count() const { return static_cast<int>(edges.size()) + 1; }
    friend bool operator==(const QuantizationSpec&, const QuantizationSpec&) = default;
};

struct CodeRef {
    CodeSystem system = CodeSystem::SNOMED;
    std::string code;
    friend bool operator==(const CodeRef&, const CodeRef&) = default;
};

struct FeatureSpec {
    int feature_id = 0;
    Domain domain = Domain::condition;
    std::string label;
    std::vector<CodeRef> codes;
    std::optional<QuantizationSpec> quantization;  // iff domain == measurement
    friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

/// Immutable after construction. Measurement features expand to one model
/// input per quantization bin; every other feature is one binary input.
class FeatureRegistry {
public:
    FeatureRegistry() = default;
    /// Validates invariants; throws pedrisk::Error on violation.
    explicit FeatureRegistry(std::vector<FeatureSpec> entries);

    [[nodiscard]] const std::vector<FeatureSpec>& entries() const { return entries_; }
    [[nodiscard]] const FeatureSpec& feature(int feature_id) const { return entries_.at(feature_id); }
    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] const std::map<Domain, int>& counts_by_domain() const { return counts_; }

    [[nodiscard]] std::optional<int> map_code(CodeSystem system, std::string_view code) const;

    /// True when no spec still waits for cohort quantiles.
    [[nodiscard]] bool frozen() const;

    // Expanded model-input vocabulary. Only valid on a frozen registry.
    [[nodiscard]] int input_vocab_size() const;
    [[nodiscard]] int input_id(int feature_id, int bin = 0) const;
    /// (feature_id, bin) for a model input id.
    [[nodiscard]] std::pair<int, int> feature_of_input(int input_id) const;
    [[nodiscard]] std::string input_label(int input_id) const;

    /// Text in the registry file format; edges written with round-trip precision.
    [[nodiscard]] std::string serialize() const;
    /// Hex SHA-256 of serialize(); binds model weights to the registry they were trained with.
    [[nodiscard]] std::string fingerprint() const;

private:
    std::vector<FeatureSpec> entries_;
    std::unordered_map<std::string, int> index_;
    std::map<Domain, int> counts_;
    std::vector<int> input_offsets_;  // per feature, first input id
    int input_vocab_size_ = 0;
};

FeatureRegistry parse_registry(std::string_view text);
FeatureRegistry load_registry(const std::filesystem::path& path);
void save_registry(const FeatureRegistry& registry, const std::filesystem::path& path);

std::optional<int> map_code(const FeatureRegistry& registry, CodeSystem system, std::string_view code);

/// Training-cohort values per measurement feature_id.
using CohortMeasurements = std::map<int, std::vector<double>>;

/// Replaces every cohort_quantiles spec with fixed edges at the empirical
/// quantiles k/q (k = 1..q-1) of its training values.
FeatureRegistry fit_cohort_quantiles(const FeatureRegistry& registry, const CohortMeasurements& cohort);

/// Linear interpolation between closest ranks: for sorted x of size n, the
/// p-quantile is x[j] + (h - j)(x[j+1] - x[j]) with h = (n-1)p, j = floor(h).
double quantile(const std::vector<double>& sorted_values, double p);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view text);

/// Count of edges <= value, so a value equal to an edge lands in the next bin.
int quantize(const QuantizationSpec& spec, double value);

}  // namespace pedrisk::vocab
