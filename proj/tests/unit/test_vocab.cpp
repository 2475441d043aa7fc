#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "pedrisk/vocab.hpp"

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

// p-quantile by linear interpolation between closest ranks, written out longhand.
double quantile_oracle(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] * (1 - (pos - static_cast<double>(lo))) + v[lo + 1] * (pos - static_cast<double>(lo));
}

vocab::FeatureRegistry one_measurement(const std::string& quant) {
    return vocab::parse_registry("#domains cond=0 famhx=0 med=0 meas=1\n0|meas|Weight|LOINC:29463-7|quant=" + quant + "\n");
}

}  // namespace

TEST_CASE("demo registry counts agree with its header") {
    const auto text = t::read_file(t::data_file("demo_registry.txt"));
    std::map<std::string, int> declared, rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("#domains", 0) == 0) {
            std::istringstream tokens(line.substr(8));
            std::string tok;
            while (tokens >> tok) declared[tok.substr(0, tok.find('='))] = std::stoi(tok.substr(tok.find('=') + 1));
        } else if (!line.empty() && line[0] != '#') {
            const auto a = line.find('|');
            rows[line.substr(a + 1, line.find('|', a + 1) - a - 1)]++;
        }
    }
    CHECK(declared == rows);

    const auto registry = vocab::load_registry(t::data_file("demo_registry.txt"));
    const std::map<std::string, Domain> names{{"cond", Domain::condition},
                                              {"famhx", Domain::family_history},
                                              {"med", Domain::medication},
                                              {"meas", Domain::measurement},
                                              {"proc", Domain::procedure}};
    int total = 0;
    for (const auto& [name, n] : declared) {
        CHECK(registry.counts_by_domain().at(names.at(name)) == n);
        total += n;
    }
    CHECK(static_cast<std::size_t>(total) == registry.size());
    for (std::size_t i = 0; i < registry.size(); ++i) CHECK(registry.entries()[i].feature_id == static_cast<int>(i));
}

TEST_CASE("registry file errors") {
    CHECK(code_of([] {
              (void)vocab::parse_registry(
                  "#domains cond=2 famhx=0 med=0 meas=0\n0|cond|A|SNOMED:1|quant=none\n1|cond|B|SNOMED:1|quant=none\n");
          }) == ErrorCode::DuplicateCode);
    CHECK(code_of([] { (void)one_measurement("20,10"); }) == ErrorCode::NonMonotoneEdges);
    CHECK(code_of([] { (void)vocab::parse_registry("#domains cond=1 famhx=0 med=0 meas=0\n0|cond|A\n"); }) ==
          ErrorCode::ParseError);
    CHECK(code_of([] { (void)vocab::parse_registry("#domains cond=1 famhx=0 med=0 meas=0\n0|cond|A|SNOMED:1|quant=3\n"); }) ==
          ErrorCode::ParseError);
    const auto empty = vocab::parse_registry("#domains cond=0 famhx=0 med=0 meas=0\n");
    CHECK(empty.size() == 0);
}

TEST_CASE("map_code") {
    const auto registry = vocab::load_registry(t::data_file("demo_registry.txt"));
    // amoxicillin is row 21 of the shipped file
    CHECK(vocab::map_code(registry, CodeSystem::RxNorm, "723") == 21);
    CHECK(vocab::map_code(registry, CodeSystem::RxNorm, "723") == 21);
    CHECK(vocab::map_code(registry, CodeSystem::LOINC, "39156-5") == 33);
    CHECK_FALSE(vocab::map_code(registry, CodeSystem::SNOMED, "ZZZ").has_value());
    CHECK_FALSE(vocab::map_code(registry, CodeSystem::SNOMED, "723").has_value());
}

TEST_CASE("cohort quantiles") {
    const auto registry = one_measurement("q4");
    CHECK_FALSE(registry.frozen());
    std::vector<double> v;
    for (int i = 1; i <= 100; ++i) v.push_back(i);
    const auto fitted = vocab::fit_cohort_quantiles(registry, {{0, v}});
    CHECK(fitted.frozen());
    const auto& edges = fitted.feature(0).quantization->edges;
    REQUIRE(edges.size() == 3);
    for (int k = 1; k <= 3; ++k) {
        CHECK(edges[k - 1] == doctest::Approx(quantile_oracle(v, k / 4.0)).epsilon(1e-12));
    }
    CHECK(edges[0] == doctest::Approx(25.75));
    CHECK(edges[1] == doctest::Approx(50.5));
    CHECK(edges[2] == doctest::Approx(75.25));

    CHECK(code_of([&] { (void)vocab::fit_cohort_quantiles(registry, {{0, std::vector<double>(50, 3.0)}}); }) ==
          ErrorCode::InsufficientData);
    const auto two = vocab::fit_cohort_quantiles(one_measurement("q2"), {{0, {0.0, 10.0}}});
    REQUIRE(two.feature(0).quantization->edges.size() == 1);
    CHECK(two.feature(0).quantization->edges[0] == doctest::Approx(5.0));
}

TEST_CASE("quantile oracle agreement on random samples") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal(0, 3);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> v(2 + rng() % 60);
        for (auto& x : v) x = normal(rng);
        auto sorted = v;
        std::sort(sorted.begin(), sorted.end());
        for (double p : {0.0, 0.1, 0.25, 0.5, 0.9, 1.0}) {
            CHECK(vocab::quantile(sorted, p) == doctest::Approx(quantile_oracle(v, p)).epsilon(1e-12));
        }
    }
}

TEST_CASE("quantize boundaries") {
    vocab::QuantizationSpec spec;
    spec.edges = {10, 20};
    CHECK(vocab::quantize(spec, 5) == 0);
    CHECK(vocab::quantize(spec, 10) == 1);
    CHECK(vocab::quantize(spec, 19.999) == 1);
    CHECK(vocab::quantize(spec, 20) == 2);
    CHECK(vocab::quantize(spec, 99) == 2);
    vocab::QuantizationSpec pending;
    pending.mode = vocab::QuantMode::cohort_quantiles;
    pending.quantile_count = 4;
    CHECK(code_of([&] { (void)vocab::quantize(pending, 1.0); }) == ErrorCode::NotFitted);
}

TEST_CASE("quantize is monotone") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-50, 150);
    vocab::QuantizationSpec spec;
    spec.edges = {-10, 0, 3.5, 40, 41, 100};
    for (int i = 0; i < 5000; ++i) {
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        CHECK(vocab::quantize(spec, a) <= vocab::quantize(spec, b));
    }
}

TEST_CASE("expanded input ids and serialization") {
    const auto& registry = t::fitted_registry();
    REQUIRE(registry.frozen());
    int expected = 0;
    for (const auto& f : registry.entries()) expected += f.quantization ? f.quantization->bin_count() : 1;
    CHECK(registry.input_vocab_size() == expected);
    for (int id = 0; id < registry.input_vocab_size(); ++id) {
        const auto [f, bin] = registry.feature_of_input(id);
        CHECK(registry.input_id(f, bin) == id);
    }
    const auto again = vocab::parse_registry(registry.serialize());
    CHECK(again.entries() == registry.entries());
    CHECK(again.fingerprint() == registry.fingerprint());
    CHECK(registry.fingerprint().size() == 64);
}

TEST_CASE("sha256 known answer") {
    CHECK(vocab::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
