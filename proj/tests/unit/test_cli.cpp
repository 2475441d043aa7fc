#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "helpers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
namespace t = pedrisk::testing;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "pedrisk");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = pedrisk::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

json manifest_of(const fs::path& dir) { return json::parse(t::read_file(dir / "run_manifest.json")); }

// Small model dims so that training finishes in seconds.
json small_config() {
    return {{"synth", {{"n_patients", 150}, {"seed", 3}, {"planted", {{{"feature_id", 15}, {"odds_multiplier", 4.0}}}}}},
            {"train",
             {{"model",
               {{"embed_dim", 8},
                {"lstm_hidden", 8},
                {"lstm_layers", 1},
                {"attention_dim", 8},
                {"head_hidden1", 8},
                {"head_hidden2", 8}}},
              {"batch_size", 32},
              {"max_epochs", 1},
              {"bootstrap_reps", 10},
              {"learning_rate", 0.003}}}};
}

}  // namespace

TEST_CASE("usage errors exit 1") {
    CHECK(run({}).code == 1);
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({"synth", "--no-such-flag"}).code == 1);
    const auto r = run({"predict"});
    CHECK(r.code == 1);
    CHECK(r.err.find("--in") != std::string::npos);
    CHECK(run({"--config", "/nonexistent/config.json", "synth"}).code == 1);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("data errors exit 2") {
    const auto dir = t::temp_dir("cli_data");
    CHECK(run({"--workdir", dir.string(), "predict", "--in", "missing.json"}).code == 2);
    // a model directory without a model
    const auto r = run({"predict", "--in", t::fixture("patient_bundle.json").string(), "--model", dir.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("pedrisk:") != std::string::npos);
}

TEST_CASE("synth is reproducible from the seed") {
    const auto a = t::temp_dir("cli_synth_a"), b = t::temp_dir("cli_synth_b");
    REQUIRE(run({"--seed", "7", "synth", "-n", "40", "--out", a.string()}).code == 0);
    REQUIRE(run({"--seed", "7", "synth", "-n", "40", "--out", b.string()}).code == 0);
    CHECK(t::read_file(a / "manifest.txt") == t::read_file(b / "manifest.txt"));
    CHECK(t::read_file(a / "manifest.txt").size() > 0);
    const auto m = manifest_of(a);
    CHECK(m["command"] == "synth");
    CHECK(m["seed"] == 7);
    CHECK(m["config_hash"].get<std::string>().size() == 64);
    CHECK(m["config_hash"] == manifest_of(b)["config_hash"]);
    CHECK(m["config"]["n_patients"] == 40);
}

TEST_CASE("seed precedence: flag, then environment, then config") {
    const auto dir = t::temp_dir("cli_precedence");
    std::ofstream(dir / "config.json") << json{{"synth", {{"seed", 11}, {"n_patients", 5}}}}.dump();
    const auto out = (dir / "cohort").string();
    const auto cfg = (dir / "config.json").string();

    ::unsetenv("PEDRISK_SEED");
    REQUIRE(run({"--config", cfg, "synth", "--out", out}).code == 0);
    CHECK(manifest_of(out)["seed"] == 11);

    ::setenv("PEDRISK_SEED", "22", 1);
    REQUIRE(run({"--config", cfg, "synth", "--out", out}).code == 0);
    CHECK(manifest_of(out)["seed"] == 22);

    REQUIRE(run({"--config", cfg, "--seed", "33", "synth", "--out", out}).code == 0);
    CHECK(manifest_of(out)["seed"] == 33);
    ::unsetenv("PEDRISK_SEED");

    // flag beats config for the patient count too
    REQUIRE(run({"--config", cfg, "synth", "--out", out, "-n", "6"}).code == 0);
    CHECK(manifest_of(out)["config"]["n_patients"] == 6);
}

TEST_CASE("config paths resolve against the config file") {
    const auto dir = t::temp_dir("cli_paths");
    fs::create_directories(dir / "conf");
    fs::copy_file(t::data_file("demo_registry.txt"), dir / "conf" / "reg.txt");
    std::ofstream(dir / "conf" / "c.json") << json{{"registry", "reg.txt"}, {"synth", {{"n_patients", 5}}}}.dump();
    REQUIRE(run({"--workdir", dir.string(), "--config", "conf/c.json", "synth", "--out", "out"}).code == 0);
    const auto inputs = manifest_of(dir / "out")["inputs"];
    CHECK(inputs[0] == (dir / "conf" / "reg.txt").string());

    std::ofstream(dir / "conf" / "bad.json") << json{{"registry", "nope.txt"}}.dump();
    CHECK(run({"--workdir", dir.string(), "--config", "conf/bad.json", "synth", "--out", "out"}).code == 2);
}

TEST_CASE("synth, train, eval and predict end to end") {
    const auto dir = t::temp_dir("cli_pipeline");
    std::ofstream(dir / "config.json") << small_config().dump(2);
    const std::vector<std::string> base{"--workdir", dir.string(), "--config", "config.json"};
    auto with = [&](std::vector<std::string> rest) {
        auto args = base;
        args.insert(args.end(), rest.begin(), rest.end());
        return run(args);
    };
    REQUIRE(with({"synth", "--out", "cohort"}).code == 0);
    const auto trained = with({"train", "--in", "cohort", "--out", "model"});
    INFO(trained.err);
    REQUIRE(trained.code == 0);
    for (const auto* f : {"model.prsk", "model.registry.txt", "eval_report.json", "eval_report.txt", "run_manifest.json"}) {
        CHECK(fs::exists(dir / "model" / f));
    }
    const auto report = json::parse(t::read_file(dir / "model" / "eval_report.json"));
    CHECK(report["schema"] == "pedrisk.eval.v1");
    CHECK(manifest_of(dir / "model")["command"] == "train");

    const auto evaluated = with({"eval", "--in", "cohort", "--model", "model", "--out", "eval"});
    INFO(evaluated.err);
    CHECK(evaluated.code == 0);
    CHECK(with({"eval", "--in", "cohort", "--model", "model", "--split", "sideways"}).code == 1);

    const auto predicted = with({"predict", "--in", t::fixture("patient_bundle.json").string(), "--model", "model"});
    REQUIRE(predicted.code == 0);
    const auto doc = json::parse(predicted.out);
    CHECK(doc["predictions"].size() == 3);
    CHECK(predicted.out.back() == '\n');
    CHECK(with({"predict", "--in", t::fixture("patient_bundle.json").string(), "--model", "model"}).out == predicted.out);
    CHECK(with({"predict", "--in", t::fixture("bundle_infant.json").string(), "--model", "model"}).code == 2);
}
