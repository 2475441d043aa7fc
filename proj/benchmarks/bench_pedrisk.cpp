#include <benchmark/benchmark.h>

#include <fstream>
#include <random>
#include <sstream>

#include "pedrisk/fhir.hpp"
#include "pedrisk/model.hpp"
#include "pedrisk/sequencer.hpp"
#include "pedrisk/synth.hpp"
#include "pedrisk/train_eval.hpp"

using namespace pedrisk;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const vocab::FeatureRegistry& registry() {
    static const auto r = vocab::load_registry(PEDRISK_BENCH_DATA "/demo_registry.txt");
    return r;
}

const growth::LmsTable& lms() {
    static const auto t = growth::load_lms_table(PEDRISK_BENCH_DATA "/cdc_lms.txt");
    return t;
}

// One fitted registry and a handful of real-looking records.
struct Corpus {
    vocab::FeatureRegistry fitted;
    std::vector<PatientRecord> records;
};

const Corpus& corpus() {
    static const Corpus c = [] {
        synth::SynthConfig sc;
        sc.n_patients = 64;
        sc.seed = 1;
        const auto cohort = synth::members_of(synth::generate(sc, registry(), lms()));
        std::vector<std::size_t> all(cohort.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        Corpus out{vocab::fit_cohort_quantiles(registry(), train::collect_measurements(cohort, all, registry())), {}};
        for (const auto& m : cohort) out.records.push_back(m.record);
        return out;
    }();
    return c;
}

model::ModelConfig demo_model(int vocab) {
    model::ModelConfig c;
    c.vocab_size = vocab;
    c.embed_dim = 32;
    c.lstm_hidden = 64;
    c.attention_dim = 32;
    c.head_hidden1 = 64;
    c.head_hidden2 = 32;
    c.loss_lambda = 0.1;
    return c;
}

}  // namespace

static void BM_ParseBundle(benchmark::State& state) {
    const auto text = slurp(PEDRISK_BENCH_FIXTURES "/patient_bundle.json");
    for (auto _ : state) benchmark::DoNotOptimize(fhir::to_patient_record(fhir::parse_bundle(text)));
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * text.size()));
}
BENCHMARK(BM_ParseBundle);

static void BM_BuildSequence(benchmark::State& state) {
    const auto& c = corpus();
    const auto schedule = features::make_schedule();
    const int window = static_cast<int>(state.range(0));
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(features::build_sequence(c.records[i++ % c.records.size()], c.fitted, schedule, window));
    }
}
BENCHMARK(BM_BuildSequence)->Arg(2)->Arg(7);

static void BM_Forward(benchmark::State& state) {
    const auto& c = corpus();
    const auto w = model::init(demo_model(c.fitted.input_vocab_size()));
    const auto schedule = features::make_schedule();
    const int window = static_cast<int>(state.range(0));
    const auto seq = features::build_sequence(c.records.front(), c.fitted, schedule, window);
    const auto demo = features::encode_demographics(c.records.front(), window);
    for (auto _ : state) benchmark::DoNotOptimize(model::forward(w, seq, demo));
}
BENCHMARK(BM_Forward)->Arg(2)->Arg(7)->Unit(benchmark::kMicrosecond);

static void BM_TrainStep(benchmark::State& state) {
    const auto& c = corpus();
    auto w = model::init(demo_model(c.fitted.input_vocab_size()));
    const auto schedule = features::make_schedule();
    std::vector<features::TimeBinnedSequence> seqs;
    std::vector<features::DemographicVector> demos;
    std::vector<model::Targets> targets(c.records.size());
    for (const auto& r : c.records) {
        seqs.push_back(features::build_sequence(r, c.fitted, schedule, 4));
        demos.push_back(features::encode_demographics(r, 4));
    }
    std::vector<model::Sample> batch;
    for (std::size_t i = 0; i < c.records.size(); ++i) {
        targets[i].mask = {true, true, true};
        targets[i].bmi = {17, 17.5, 18};
        targets[i].obese = {i % 5 == 0, i % 5 == 0, i % 4 == 0};
        batch.push_back({&seqs[i], &demos[i], &targets[i]});
    }
    auto opt = model::AdamState::for_weights(w);
    std::mt19937_64 rng(1);
    for (auto _ : state) benchmark::DoNotOptimize(model::backward_and_step(w, batch, opt, 1e-3, rng));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch.size()));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_Auroc(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(3);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = std::uniform_real_distribution<double>(0, 1)(rng);
        l[i] = static_cast<int>(rng() % 2);
    }
    l[0] = 0;
    l[1] = 1;
    for (auto _ : state) benchmark::DoNotOptimize(train::auroc(s, l));
    state.SetComplexityN(static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Auroc)->RangeMultiplier(10)->Range(100, 100000)->Complexity(benchmark::oNLogN);

BENCHMARK_MAIN();
