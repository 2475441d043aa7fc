#include "cli.hpp"

#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <pthread.h>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pedrisk/error.hpp"
#include "pedrisk/growth.hpp"
#include "pedrisk/model.hpp"
#include "pedrisk/service.hpp"
#include "pedrisk/synth.hpp"
#include "pedrisk/train_eval.hpp"
#include "pedrisk/vocab.hpp"

#ifndef PEDRISK_DEFAULT_DATA_DIR
#define PEDRISK_DEFAULT_DATA_DIR "data"
#endif
#ifndef PEDRISK_VERSION
#define PEDRISK_VERSION "0.0.0"
#endif

namespace pedrisk::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::optional<std::string> config;
    std::optional<std::string> workdir;
    std::optional<std::uint64_t> seed;
};

struct Options {
    std::optional<std::string> in, out, model, registry, lms;
    std::optional<int> n, epochs, bootstrap_reps, port;
    std::optional<std::string> host, token, ui, split;
};

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Flags are relative to the workdir; paths inside a config file are relative
// to that file.
class Context {
public:
    Context(const Common& common, std::vector<std::string> argv) : argv_(std::move(argv)) {
        workdir_ = common.workdir ? fs::path(*common.workdir) : fs::current_path();
        seed_ = common.seed;
        if (common.config) {
            config_path_ = workdir_ / *common.config;
            std::ifstream f(config_path_);
            if (!f) throw UsageError("cannot open config " + config_path_.string());
            config_ = json::parse(f, nullptr, false);
            if (config_.is_discarded() || !config_.is_object()) throw UsageError("config is not a JSON object");
            config_dir_ = config_path_.parent_path();
        } else {
            config_ = json::object();
            config_dir_ = PEDRISK_DEFAULT_DATA_DIR;
        }
        started_ = utc_now();
    }

    fs::path path(const std::optional<std::string>& flag, const char* key, const fs::path& fallback) const {
        if (flag) return workdir_ / *flag;
        if (config_.contains(key) && config_[key].is_string()) return config_dir_ / config_[key].get<std::string>();
        return fallback.is_absolute() ? fallback : workdir_ / fallback;
    }
    fs::path registry_path(const Options& o) const {
        return path(o.registry, "registry", fs::path(PEDRISK_DEFAULT_DATA_DIR) / "demo_registry.txt");
    }
    fs::path lms_path(const Options& o) const {
        return path(o.lms, "lms_table", fs::path(PEDRISK_DEFAULT_DATA_DIR) / "cdc_lms.txt");
    }
    fs::path in_dir(const fs::path& p) const { return workdir_ / p; }

    [[nodiscard]] json section(const char* name) const {
        return config_.contains(name) ? config_[name] : json::object();
    }
    [[nodiscard]] const std::optional<std::uint64_t>& seed() const { return seed_; }

    void write_manifest(const fs::path& dir, const std::string& command, const json& resolved,
                        std::uint64_t seed, const std::vector<fs::path>& inputs,
                        const std::vector<fs::path>& outputs) const {
        json in = json::array(), out = json::array();
        for (const auto& p : inputs) in.push_back(p.string());
        for (const auto& p : outputs) out.push_back(p.string());
        const json manifest = {{"command", command},
                               {"argv", argv_},
                               {"config", resolved},
                               {"config_hash", vocab::sha256_hex(resolved.dump())},
                               {"seed", seed},
                               {"workdir", workdir_.string()},
                               {"inputs", in},
                               {"outputs", out},
                               {"started_at", started_},
                               {"finished_at", utc_now()},
                               {"versions",
                                {{"pedrisk", PEDRISK_VERSION},
                                 {"weight_format", model::kFormatVersion},
                                 {"prediction_schema", service::kSchemaVersion}}}};
        std::ofstream f(dir / "run_manifest.json");
        if (!f) throw Error(ErrorCode::Io, "cannot write " + (dir / "run_manifest.json").string());
        f << manifest.dump(2) << "\n";
    }

private:
    std::vector<std::string> argv_;
    fs::path workdir_;
    fs::path config_path_;
    fs::path config_dir_;
    json config_ = json::object();
    std::optional<std::uint64_t> seed_;
    std::string started_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
    f << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

train::TrainConfig train_config(const Context& ctx, const Options& o) {
    auto c = ctx.section("train").get<train::TrainConfig>();
    if (ctx.seed()) {
        c.seed = *ctx.seed();
        c.model.seed = *ctx.seed();
    }
    if (o.epochs) c.max_epochs = *o.epochs;
    if (o.bootstrap_reps) c.bootstrap_reps = *o.bootstrap_reps;
    c.validate();
    return c;
}

service::ServiceConfig service_config(const Context& ctx, const Options& o) {
    auto c = ctx.section("service").get<service::ServiceConfig>();
    const fs::path model_dir = ctx.in_dir(o.model.value_or("model"));
    c.weights_path = model_dir / "model.prsk";
    c.registry_path = model_dir / "model.registry.txt";
    c.lms_path = ctx.lms_path(o);
    if (o.host) c.host = *o.host;
    if (o.port) c.port = *o.port;
    if (o.token) c.auth_token = *o.token;
    if (o.ui) c.ui_dir = ctx.in_dir(*o.ui);
    c.validate();
    return c;
}

int cmd_synth(const Context& ctx, const Options& o, std::ostream& err) {
    auto c = ctx.section("synth").get<synth::SynthConfig>();
    if (ctx.seed()) c.seed = *ctx.seed();
    if (o.n) c.n_patients = *o.n;
    c.validate();
    const auto registry_path = ctx.registry_path(o);
    const auto lms_path = ctx.lms_path(o);
    const auto registry = vocab::load_registry(registry_path);
    const auto lms = growth::load_lms_table(lms_path);
    const fs::path dir = ctx.in_dir(o.out.value_or("cohort"));

    const auto patients = synth::generate(c, registry, lms);
    const auto cohort = synth::apply_eligibility(synth::members_of(patients));
    synth::write_cohort(cohort, dir);
    err << "synth: " << patients.size() << " generated, " << cohort.size() << " eligible -> " << dir.string() << "\n";
    ctx.write_manifest(dir, "synth", json(c), c.seed, {registry_path, lms_path}, {dir / "manifest.txt"});
    return kOk;
}

int cmd_train(const Context& ctx, const Options& o, std::ostream& err) {
    const auto c = train_config(ctx, o);
    const auto registry_path = ctx.registry_path(o);
    const auto lms_path = ctx.lms_path(o);
    const auto registry = vocab::load_registry(registry_path);
    const auto lms = growth::load_lms_table(lms_path);
    const fs::path in = ctx.in_dir(o.in.value_or("cohort"));
    const fs::path dir = ctx.in_dir(o.out.value_or("model"));

    const auto cohort = synth::apply_eligibility(synth::read_cohort(in));
    err << "train: " << cohort.size() << " patients from " << in.string() << "\n";
    train::TrainCallbacks callbacks;
    callbacks.on_epoch = [&err](const train::EpochLog& log) {
        err << "epoch " << log.epoch << " train_loss " << log.train_loss << " val_loss " << log.val_loss
            << (log.improved ? " *" : "") << "\n";
    };
    const auto result = train::train(c, cohort, registry, lms, callbacks);

    fs::create_directories(dir);
    model::save(result.weights, dir / "model.prsk");
    vocab::save_registry(result.registry, dir / "model.registry.txt");
    json report = result.report;
    json history = json::array();
    for (const auto& h : result.history) {
        history.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"val_loss", h.val_loss}});
    }
    report["history"] = history;
    write_text(dir / "eval_report.json", report.dump(2) + "\n");
    write_text(dir / "eval_report.txt", result.report.table());
    err << result.report.table();
    ctx.write_manifest(dir, "train", json(c), c.seed, {in / "manifest.txt", registry_path, lms_path},
                       {dir / "model.prsk", dir / "model.registry.txt", dir / "eval_report.json",
                        dir / "eval_report.txt"});
    return kOk;
}

int cmd_eval(const Context& ctx, const Options& o, std::ostream& out) {
    const auto c = train_config(ctx, o);
    const auto lms_path = ctx.lms_path(o);
    const auto lms = growth::load_lms_table(lms_path);
    const fs::path model_dir = ctx.in_dir(o.model.value_or("model"));
    const auto registry = vocab::load_registry(model_dir / "model.registry.txt");
    const auto weights = model::load(model_dir / "model.prsk", registry.fingerprint());
    const fs::path in = ctx.in_dir(o.in.value_or("cohort"));
    const fs::path dir = ctx.in_dir(o.out.value_or("eval"));
    const std::string split = o.split.value_or("test");
    if (split != "test" && split != "all") throw UsageError("--split must be test or all");

    const auto cohort = synth::apply_eligibility(synth::read_cohort(in));
    std::vector<std::size_t> members;
    if (split == "test") {
        members = train::split(cohort.size(), c.seed).test;
    } else {
        for (std::size_t i = 0; i < cohort.size(); ++i) members.push_back(i);
    }
    const auto schedule = features::make_schedule(weights.schedule);
    std::vector<train::LabeledExample> examples;
    for (std::size_t i : members) {
        auto ex = train::make_examples(cohort[i], registry, schedule, lms, c.windows);
        std::move(ex.begin(), ex.end(), std::back_inserter(examples));
    }
    train::EvalOptions opts;
    opts.bootstrap_reps = c.bootstrap_reps;
    opts.seed = c.seed;
    opts.geographic_site = c.geographic_site;
    const auto report = train::evaluate(weights, examples, opts);

    fs::create_directories(dir);
    write_text(dir / "eval_report.json", json(report).dump(2) + "\n");
    write_text(dir / "eval_report.txt", report.table());
    out << report.table();
    json resolved = c;
    resolved["split"] = split;
    ctx.write_manifest(dir, "eval", resolved, c.seed, {in / "manifest.txt", model_dir / "model.prsk", lms_path},
                       {dir / "eval_report.json", dir / "eval_report.txt"});
    return kOk;
}

int cmd_predict(const Context& ctx, const Options& o, std::ostream& out) {
    if (!o.in) throw UsageError("predict needs --in <bundle.json>");
    const auto config = service_config(ctx, o);
    const auto predictor = service::Predictor::load(config);
    const auto doc = predictor->predict_bundle(read_text(ctx.in_dir(*o.in)));
    if (o.out) {
        write_text(ctx.in_dir(*o.out), service::render(doc));
    } else {
        out << service::render(doc);
    }
    return kOk;
}

int cmd_serve(const Context& ctx, const Options& o, std::ostream& err) {
    const auto config = service_config(ctx, o);
    service::Server server(config);
    try {
        server.reload();
    } catch (const Error& e) {
        err << "serve: no model loaded (" << e.what() << "); health reports degraded\n";
    }

    // SIGINT/SIGTERM are taken by a watcher thread instead of an async handler.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    const int port = server.bind();
    err << "serve: listening on " << config.host << ":" << port << "\n";
    std::thread watcher([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        server.stop();
    });
    server.listen();
    if (watcher.joinable()) {
        pthread_kill(watcher.native_handle(), SIGTERM);
        watcher.join();
    }
    return kOk;
}

int exit_code_for(const Error& e) { return e.code() == ErrorCode::InvalidConfig ? kUsage : kDataError; }

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Pediatric obesity risk pipeline", "pedrisk"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("--config", common.config, "JSON config file")->envname("PEDRISK_CONFIG");
    app.add_option("--workdir", common.workdir, "Base directory for relative paths")->envname("PEDRISK_WORKDIR");
    app.add_option("--seed", common.seed, "Random seed")->envname("PEDRISK_SEED");

    Options o;
    const auto add_paths = [&o](CLI::App* sub, const char* in_help, const char* out_help) {
        if (in_help) sub->add_option("--in", o.in, in_help)->envname("PEDRISK_IN");
        if (out_help) sub->add_option("--out", o.out, out_help)->envname("PEDRISK_OUT");
        sub->add_option("--lms", o.lms, "CDC LMS table")->envname("PEDRISK_LMS");
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
    add_paths(synth, nullptr, "Cohort directory (default cohort)");
    synth->add_option("--registry", o.registry, "Feature registry")->envname("PEDRISK_REGISTRY");
    synth->add_option("-n,--patients", o.n, "Number of patients")->envname("PEDRISK_PATIENTS");

    auto* train = app.add_subcommand("train", "Train and evaluate a model on a cohort");
    add_paths(train, "Cohort directory (default cohort)", "Model directory (default model)");
    train->add_option("--registry", o.registry, "Feature registry")->envname("PEDRISK_REGISTRY");
    train->add_option("--epochs", o.epochs, "Maximum epochs")->envname("PEDRISK_EPOCHS");
    train->add_option("--bootstrap-reps", o.bootstrap_reps, "Bootstrap replicates")->envname("PEDRISK_BOOTSTRAP_REPS");

    auto* eval = app.add_subcommand("eval", "Evaluate a trained model");
    add_paths(eval, "Cohort directory (default cohort)", "Report directory (default eval)");
    eval->add_option("--model", o.model, "Model directory (default model)")->envname("PEDRISK_MODEL");
    eval->add_option("--split", o.split, "test (held-out split) or all")->envname("PEDRISK_SPLIT");
    eval->add_option("--bootstrap-reps", o.bootstrap_reps, "Bootstrap replicates")->envname("PEDRISK_BOOTSTRAP_REPS");

    auto* serve = app.add_subcommand("serve", "Run the prediction API");
    add_paths(serve, nullptr, nullptr);
    serve->add_option("--model", o.model, "Model directory (default model)")->envname("PEDRISK_MODEL");
    serve->add_option("--host", o.host, "Listen address")->envname("PEDRISK_HOST");
    serve->add_option("--port", o.port, "Listen port (0 picks one)")->envname("PEDRISK_PORT");
    serve->add_option("--token", o.token, "Bearer token clients must send")->envname("PEDRISK_TOKEN");
    serve->add_option("--ui", o.ui, "Static UI directory")->envname("PEDRISK_UI");

    auto* predict = app.add_subcommand("predict", "Predict for one FHIR bundle file");
    add_paths(predict, "Bundle JSON file", "Write the document here instead of stdout");
    predict->add_option("--model", o.model, "Model directory (default model)")->envname("PEDRISK_MODEL");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        if (code != 0 && e.get_name() != "CallForHelp" && e.get_name() != "CallForAllHelp") err << app.help();
        return code == 0 ? kOk : kUsage;
    }

    try {
        const Context ctx(common, std::vector<std::string>(argv, argv + argc));
        if (synth->parsed()) return cmd_synth(ctx, o, err);
        if (train->parsed()) return cmd_train(ctx, o, err);
        if (eval->parsed()) return cmd_eval(ctx, o, out);
        if (serve->parsed()) return cmd_serve(ctx, o, err);
        return cmd_predict(ctx, o, out);
    } catch (const UsageError& e) {
        err << "pedrisk: " << e.what() << "\n";
        return kUsage;
    } catch (const nlohmann::json::exception& e) {
        err << "pedrisk: bad config: " << e.what() << "\n";
        return kUsage;
    } catch (const Error& e) {
        err << "pedrisk: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const fs::filesystem_error& e) {
        err << "pedrisk: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        err << "pedrisk: internal error: " << e.what() << "\n";
        return kInternal;
    }
}

}  // namespace pedrisk::cli
