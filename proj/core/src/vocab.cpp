#include "pedrisk/vocab.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pedrisk/error.hpp"

namespace pedrisk::vocab {

namespace {

std::string index_key(CodeSystem system, std::string_view code) {
    std::string key(to_string(system));
    key += ':';
    key += code;
    return key;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

[[noreturn]] void bad_row(std::size_t line, const std::string& why) {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + why);
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
    s = trim(s);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

struct DomainToken {
    std::string_view token;
    Domain domain;
};
constexpr DomainToken kDomainTokens[] = {
    {"cond", Domain::condition},        {"famhx", Domain::family_history}, {"med", Domain::medication},
    {"meas", Domain::measurement},      {"proc", Domain::procedure},
};

std::optional<Domain> domain_token(std::string_view t) {
    for (const auto& d : kDomainTokens)
        if (d.token == t) return d.domain;
    return std::nullopt;
}

std::string_view token_of(Domain domain) {
    for (const auto& d : kDomainTokens)
        if (d.domain == domain) return d.token;
    return "cond";
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest representation that round-trips.
    for (int prec = 1; prec < 17; ++prec) {
        char shorter[32];
        std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
        if (std::strtod(shorter, nullptr) == v) return shorter;
    }
    return buf;
}

QuantizationSpec parse_quant(std::string_view field, std::size_t line) {
    QuantizationSpec spec;
    if (const auto at = field.find('@'); at != std::string_view::npos) {
        spec.unit = std::string(trim(field.substr(at + 1)));
        field = field.substr(0, at);
    }
    if (!field.empty() && field.front() == 'q') {
        spec.mode = QuantMode::cohort_quantiles;
        if (!parse_number(field.substr(1), spec.quantile_count)) bad_row(line, "bad quantile count");
        if (spec.quantile_count < 2 || spec.quantile_count > 10) bad_row(line, "quantile count outside [2, 10]");
        return spec;
    }
    spec.mode = QuantMode::fixed_edges;
    for (auto tok : split(field, ',')) {
        double v = 0;
        if (!parse_number(tok, v) || !std::isfinite(v)) bad_row(line, "bad edge value");
        spec.edges.push_back(v);
    }
    return spec;
}

}  // namespace

FeatureRegistry::FeatureRegistry(std::vector<FeatureSpec> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& f = entries_[i];
        if (f.feature_id != static_cast<int>(i)) {
            throw Error(ErrorCode::ParseError, "feature ids must be dense 0..N-1 in order; got " +
                                                   std::to_string(f.feature_id) + " at position " +
                                                   std::to_string(i));
        }
        if (f.codes.empty()) throw Error(ErrorCode::ParseError, "feature " + f.label + " has no codes");
        if (f.quantization.has_value() != (f.domain == Domain::measurement)) {
            throw Error(ErrorCode::ParseError, "feature " + f.label + ": quantization present iff measurement");
        }
        if (f.quantization && f.quantization->mode == QuantMode::fixed_edges) {
            const auto& e = f.quantization->edges;
            if (e.empty()) throw Error(ErrorCode::NonMonotoneEdges, f.label + ": no bin edges");
            for (std::size_t k = 1; k < e.size(); ++k) {
                if (!(e[k - 1] < e[k])) throw Error(ErrorCode::NonMonotoneEdges, f.label + ": edges not increasing");
            }
        }
        for (const auto& c : f.codes) {
            if (c.code.empty()) throw Error(ErrorCode::ParseError, "empty code in " + f.label);
            if (!index_.emplace(index_key(c.system, c.code), f.feature_id).second) {
                throw Error(ErrorCode::DuplicateCode,
                            std::string(to_string(c.system)) + ":" + c.code + " listed twice");
            }
        }
        ++counts_[f.domain];
    }
    if (frozen()) {
        input_offsets_.reserve(entries_.size());
        for (const auto& f : entries_) {
            input_offsets_.push_back(input_vocab_size_);
            input_vocab_size_ += f.quantization ? f.quantization->bin_count() : 1;
        }
    }
}

std::optional<int> FeatureRegistry::map_code(CodeSystem system, std::string_view code) const {
    auto it = index_.find(index_key(system, code));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

bool FeatureRegistry::frozen() const {
    return std::none_of(entries_.begin(), entries_.end(), [](const FeatureSpec& f) {
        return f.quantization && f.quantization->mode == QuantMode::cohort_quantiles;
    });
}

int FeatureRegistry::input_vocab_size() const {
    if (!frozen()) throw Error(ErrorCode::NotFitted, "registry has unfitted quantile specs");
    return input_vocab_size_;
}

int FeatureRegistry::input_id(int feature_id, int bin) const {
    if (!frozen()) throw Error(ErrorCode::NotFitted, "registry has unfitted quantile specs");
    const auto& f = entries_.at(feature_id);
    const int bins = f.quantization ? f.quantization->bin_count() : 1;
    if (bin < 0 || bin >= bins) throw Error(ErrorCode::OutOfRange, "bin outside feature " + f.label);
    return input_offsets_[feature_id] + bin;
}

std::pair<int, int> FeatureRegistry::feature_of_input(int input_id) const {
    if (input_id < 0 || input_id >= input_vocab_size_) {
        throw Error(ErrorCode::UnknownId, "input id " + std::to_string(input_id));
    }
    auto it = std::upper_bound(input_offsets_.begin(), input_offsets_.end(), input_id);
    const int feature = static_cast<int>(std::distance(input_offsets_.begin(), it)) - 1;
    return {feature, input_id - input_offsets_[feature]};
}

std::string FeatureRegistry::input_label(int input_id) const {
    auto [feature, bin] = feature_of_input(input_id);
    const auto& f = entries_[feature];
    if (!f.quantization) return f.label;
    return f.label + ":" + std::to_string(bin);
}

std::string FeatureRegistry::serialize() const {
    std::ostringstream out;
    out << "#domains";
    for (const auto& d : kDomainTokens) {
        const auto it = counts_.find(d.domain);
        const int n = it == counts_.end() ? 0 : it->second;
        if (d.domain == Domain::procedure && n == 0) continue;
        out << ' ' << d.token << '=' << n;
    }
    out << '\n';
    for (const auto& f : entries_) {
        out << f.feature_id << '|' << token_of(f.domain) << '|' << f.label << '|';
        for (std::size_t i = 0; i < f.codes.size(); ++i) {
            if (i) out << ',';
            out << to_string(f.codes[i].system) << ':' << f.codes[i].code;
        }
        out << "|quant=";
        if (!f.quantization) {
            out << "none";
        } else {
            const auto& q = *f.quantization;
            if (q.mode == QuantMode::cohort_quantiles) {
                out << 'q' << q.quantile_count;
            } else {
                for (std::size_t i = 0; i < q.edges.size(); ++i) {
                    if (i) out << ',';
                    out << format_double(q.edges[i]);
                }
            }
            if (!q.unit.empty()) out << '@' << q.unit;
        }
        out << '\n';
    }
    return out.str();
}

std::string FeatureRegistry::fingerprint() const { return sha256_hex(serialize()); }

std::string sha256_hex(std::string_view text) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
        hex += kHex[digest[i] >> 4];
        hex += kHex[digest[i] & 0xF];
    }
    return hex;
}

FeatureRegistry parse_registry(std::string_view text) {
    std::map<Domain, int> declared;
    bool have_header = false;
    std::vector<FeatureSpec> entries;
    std::size_t line_no = 0;
    for (auto raw : split(text, '\n')) {
        ++line_no;
        const auto line = trim(raw);
        if (line.empty()) continue;
        if (line.rfind("#domains", 0) == 0) {
            if (have_header) bad_row(line_no, "second #domains header");
            have_header = true;
            for (auto tok : split(trim(line.substr(8)), ' ')) {
                if (tok.empty()) continue;
                const auto eq = tok.find('=');
                int n = 0;
                auto d = eq == std::string_view::npos ? std::nullopt : domain_token(tok.substr(0, eq));
                if (!d || !parse_number(tok.substr(eq + 1), n) || n < 0) bad_row(line_no, "bad header token");
                declared[*d] = n;
            }
            continue;
        }
        if (line.front() == '#') continue;
        if (!have_header) bad_row(line_no, "row before #domains header");

        const auto fields = split(line, '|');
        if (fields.size() != 5) bad_row(line_no, "expected 5 '|'-separated fields");
        FeatureSpec f;
        if (!parse_number(fields[0], f.feature_id)) bad_row(line_no, "bad feature id");
        auto domain = domain_token(trim(fields[1]));
        if (!domain) bad_row(line_no, "unknown domain " + std::string(fields[1]));
        f.domain = *domain;
        f.label = std::string(trim(fields[2]));
        if (f.label.empty()) bad_row(line_no, "empty label");
        for (auto tok : split(fields[3], ',')) {
            tok = trim(tok);
            const auto colon = tok.find(':');
            if (colon == std::string_view::npos) bad_row(line_no, "code without system prefix");
            auto sys = code_system_from_string(tok.substr(0, colon));
            if (!sys) bad_row(line_no, "unknown code system " + std::string(tok.substr(0, colon)));
            f.codes.push_back({*sys, std::string(tok.substr(colon + 1))});
        }
        auto quant = trim(fields[4]);
        if (quant.rfind("quant=", 0) != 0) bad_row(line_no, "missing quant= field");
        quant.remove_prefix(6);
        if (quant != "none") f.quantization = parse_quant(quant, line_no);
        entries.push_back(std::move(f));
    }
    if (!have_header) throw Error(ErrorCode::ParseError, "missing #domains header");

    FeatureRegistry registry(std::move(entries));
    for (const auto& d : kDomainTokens) {
        const auto it = registry.counts_by_domain().find(d.domain);
        const int actual = it == registry.counts_by_domain().end() ? 0 : it->second;
        const auto dit = declared.find(d.domain);
        const int expected = dit == declared.end() ? 0 : dit->second;
        if (actual != expected) {
            throw Error(ErrorCode::ParseError, "header declares " + std::to_string(expected) + " " +
                                                   std::string(d.token) + " rows, found " +
                                                   std::to_string(actual));
        }
    }
    return registry;
}

FeatureRegistry load_registry(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open registry " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_registry(buf.str());
}

void save_registry(const FeatureRegistry& registry, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write registry " + path.string());
    out << registry.serialize();
}

std::optional<int> map_code(const FeatureRegistry& registry, CodeSystem system, std::string_view code) {
    return registry.map_code(system, code);
}

double quantile(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw Error(ErrorCode::InsufficientData, "quantile of empty sample");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto j = static_cast<std::size_t>(std::floor(h));
    if (j + 1 >= sorted.size()) return sorted.back();
    return sorted[j] + (h - static_cast<double>(j)) * (sorted[j + 1] - sorted[j]);
}

FeatureRegistry fit_cohort_quantiles(const FeatureRegistry& registry, const CohortMeasurements& cohort) {
    std::vector<FeatureSpec> entries = registry.entries();
    for (auto& f : entries) {
        if (!f.quantization || f.quantization->mode != QuantMode::cohort_quantiles) continue;
        auto& q = *f.quantization;
        auto it = cohort.find(f.feature_id);
        std::vector<double> values = it == cohort.end() ? std::vector<double>{} : it->second;
        std::sort(values.begin(), values.end());
        std::vector<double> uniq = values;
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        if (static_cast<int>(uniq.size()) < q.quantile_count) {
            throw Error(ErrorCode::InsufficientData, f.label + ": " + std::to_string(uniq.size()) +
                                                         " distinct values for " +
                                                         std::to_string(q.quantile_count) + " quantiles");
        }
        std::vector<double> edges;
        for (int k = 1; k < q.quantile_count; ++k) {
            const double e = quantile(values, static_cast<double>(k) / q.quantile_count);
            if (edges.empty() || e > edges.back()) edges.push_back(e);
        }
        q.mode = QuantMode::fixed_edges;
        q.edges = std::move(edges);
        q.quantile_count = 0;
    }
    return FeatureRegistry(std::move(entries));
}

int quantize(const QuantizationSpec& spec, double value) {
    if (spec.mode != QuantMode::fixed_edges) throw Error(ErrorCode::NotFitted, "spec still awaits cohort quantiles");
    return static_cast<int>(std::upper_bound(spec.edges.begin(), spec.edges.end(), value) - spec.edges.begin());
}

}  // namespace pedrisk::vocab
