#include "helpers.hpp"

#include <fstream>
#include <sstream>
#include <unistd.h>

#include "pedrisk/synth.hpp"
#include "pedrisk/train_eval.hpp"

namespace pedrisk::testing {

namespace fs = std::filesystem;

fs::path fixture(const std::string& name) { return fs::path(PEDRISK_TEST_FIXTURES) / name; }
fs::path data_file(const std::string& name) { return fs::path(PEDRISK_TEST_DATA) / name; }

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("pedrisk-test-" + name + "-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const growth::LmsTable& lms() {
    static const auto table = growth::load_lms_table(data_file("cdc_lms.txt"));
    return table;
}

const vocab::FeatureRegistry& fitted_registry() {
    static const auto registry = [] {
        const auto base = vocab::load_registry(data_file("demo_registry.txt"));
        synth::SynthConfig c;
        c.n_patients = 80;
        c.seed = 11;
        const auto cohort = synth::members_of(synth::generate(c, base, lms()));
        std::vector<std::size_t> all(cohort.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return vocab::fit_cohort_quantiles(base, train::collect_measurements(cohort, all, base));
    }();
    return registry;
}

ModelFiles write_test_model(const fs::path& dir) {
    const auto& registry = fitted_registry();
    model::ModelConfig mc;
    mc.vocab_size = registry.input_vocab_size();
    mc.embed_dim = 8;
    mc.lstm_hidden = 8;
    mc.attention_dim = 8;
    mc.head_hidden1 = 8;
    mc.head_hidden2 = 8;
    mc.seed = 3;
    ModelFiles out;
    out.weights = model::init(mc);
    out.weights.registry_fingerprint = registry.fingerprint();
    out.weights.calibration.pooled = {1.5, 2.0, 2.5};
    out.weights.model_version = "test-model";
    fs::create_directories(dir);
    model::save(out.weights, dir / "model.prsk");
    vocab::save_registry(registry, dir / "model.registry.txt");
    out.config.weights_path = dir / "model.prsk";
    out.config.registry_path = dir / "model.registry.txt";
    out.config.lms_path = data_file("cdc_lms.txt");
    out.config.port = 0;
    return out;
}

}  // namespace pedrisk::testing
