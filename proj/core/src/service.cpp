#include "pedrisk/service.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>

#include "httplib.h"
#include "pedrisk/fhir.hpp"

namespace pedrisk::service {

void ServiceConfig::validate() const {
    if (port < 0 || port > 65535) throw Error(ErrorCode::InvalidConfig, "port out of range");
    if (top_k < 1 || top_k > kMaxTopK) throw Error(ErrorCode::InvalidConfig, "top_k must be in [1, 10]");
    if (fhir_timeout_ms <= 0) throw Error(ErrorCode::InvalidConfig, "fhir_timeout_ms must be > 0");
    if (threads <= 0) throw Error(ErrorCode::InvalidConfig, "threads must be > 0");
    if (!schedule.empty()) (void)features::ScheduleConfig::named(schedule);
}

void to_json(nlohmann::json& j, const ServiceConfig& c) {
    j = {{"host", c.host},
         {"port", c.port},
         {"weights", c.weights_path.string()},
         {"registry", c.registry_path.string()},
         {"lms_table", c.lms_path.string()},
         {"fhir_server", c.fhir_server},
         {"fhir_token", c.fhir_token},
         {"fhir_timeout_ms", c.fhir_timeout_ms},
         {"auth_token", c.auth_token},
         {"top_k", c.top_k},
         {"schedule", c.schedule},
         {"ui_dir", c.ui_dir.string()},
         {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, ServiceConfig& c) {
    const ServiceConfig d;
    c.host = j.value("host", d.host);
    c.port = j.value("port", d.port);
    c.weights_path = j.value("weights", d.weights_path.string());
    c.registry_path = j.value("registry", d.registry_path.string());
    c.lms_path = j.value("lms_table", d.lms_path.string());
    c.fhir_server = j.value("fhir_server", d.fhir_server);
    c.fhir_token = j.value("fhir_token", d.fhir_token);
    c.fhir_timeout_ms = j.value("fhir_timeout_ms", d.fhir_timeout_ms);
    c.auth_token = j.value("auth_token", d.auth_token);
    c.top_k = j.value("top_k", d.top_k);
    c.schedule = j.value("schedule", d.schedule);
    c.ui_dir = j.value("ui_dir", d.ui_dir.string());
    c.threads = j.value("threads", d.threads);
}

// ---------------------------------------------------------------------------

Predictor::Predictor(model::ModelWeights weights, vocab::FeatureRegistry registry, growth::LmsTable lms,
                     std::size_t top_k)
    : weights_(std::move(weights)),
      registry_(std::move(registry)),
      lms_(std::move(lms)),
      schedule_(features::make_schedule(weights_.schedule)),
      top_k_(top_k) {
    if (top_k_ < 1 || top_k_ > kMaxTopK) throw Error(ErrorCode::InvalidConfig, "top_k must be in [1, 10]");
    if (weights_.registry_fingerprint != registry_.fingerprint()) {
        throw Error(ErrorCode::FingerprintMismatch, "weights were trained with registry " +
                                                        weights_.registry_fingerprint);
    }
    if (weights_.config.vocab_size != registry_.input_vocab_size()) {
        throw Error(ErrorCode::ShapeMismatch, "model vocabulary does not match the registry");
    }
}

std::shared_ptr<const Predictor> Predictor::load(const ServiceConfig& config) {
    config.validate();
    auto registry = vocab::load_registry(config.registry_path);
    auto weights = model::load(config.weights_path, registry.fingerprint());
    if (!config.schedule.empty() && features::ScheduleConfig::named(config.schedule) != weights.schedule) {
        throw Error(ErrorCode::InvalidConfig, "schedule " + config.schedule + " differs from the one the weights use");
    }
    auto lms = growth::load_lms_table(config.lms_path);
    return std::make_shared<const Predictor>(std::move(weights), std::move(registry), std::move(lms), config.top_k);
}

namespace {

double round_to(double x, int digits) {
    const double f = std::pow(10.0, digits);
    return std::round(x * f) / f;
}

nlohmann::json rounded_or_null(std::optional<double> x, int digits) {
    if (!x || !std::isfinite(*x)) return nullptr;
    return round_to(*x, digits);
}

std::optional<double> bmi_percentile(const growth::LmsTable& lms, Sex sex, double months, double bmi) {
    try {
        return growth::assess(lms, sex, months, bmi).percentile;
    } catch (const Error&) {
        return std::nullopt;
    }
}

// Height carried forward along its own stature-for-age z-score.
std::optional<double> projected_height(const growth::LmsTable& lms, Sex sex, const std::vector<GrowthPoint>& points,
                                       double target_months) {
    for (auto it = points.rbegin(); it != points.rend(); ++it) {
        if (!it->height_cm) continue;
        try {
            const double z = growth::lms_z(lms, growth::Metric::stature_for_age, sex, age_months(it->age_days),
                                           *it->height_cm);
            return growth::value_at_z(lms, growth::Metric::stature_for_age, sex, target_months, z);
        } catch (const Error&) {
            return std::nullopt;
        }
    }
    return std::nullopt;
}

}  // namespace

nlohmann::json Predictor::predict(const PatientRecord& record) const {
    using nlohmann::json;
    if (record.events.empty()) throw Error(ErrorCode::Ineligible, "record has no clinical events");
    std::int32_t as_of_days = 0;
    for (const auto& e : record.events) as_of_days = std::max(as_of_days, e.age_days);
    const double as_of_years = age_years(as_of_days);
    const int window = static_cast<int>(std::floor(as_of_years));
    if (window < 2 || window > 7) {
        char age[32];
        std::snprintf(age, sizeof age, "%.2f", as_of_years);
        throw Error(ErrorCode::Ineligible,
                    std::string("age ") + age + " years is outside the supported windows (2-7 years)");
    }

    const auto points = growth_points(record);
    json hist_age = json::array(), hist_bmi = json::array(), hist_pct = json::array(), hist_wt = json::array(),
         hist_ht = json::array();
    for (const auto& p : points) {
        if (!p.bmi) continue;
        hist_age.push_back(round_to(age_years(p.age_days), 2));
        hist_bmi.push_back(round_to(*p.bmi, 2));
        hist_pct.push_back(rounded_or_null(bmi_percentile(lms_, record.sex, age_months(p.age_days), *p.bmi), 1));
        hist_wt.push_back(rounded_or_null(p.weight_kg, 2));
        hist_ht.push_back(rounded_or_null(p.height_cm, 1));
    }
    if (hist_age.empty()) throw Error(ErrorCode::Ineligible, "no BMI history");

    const auto sequence = features::build_sequence(record, registry_, schedule_, window);
    const auto demo = features::encode_demographics(record, window, weights_.config.demo_cardinalities);
    const auto out = model::forward(weights_, sequence, demo);

    json predictions = json::array();
    json pred_age = json::array(), pred_bmi = json::array(), pred_pct = json::array(), pred_wt = json::array(),
         pred_lo = json::array(), pred_hi = json::array();
    for (int k = 0; k < model::kHorizons; ++k) {
        const int horizon = k + 1;
        const double target_years = window + horizon;
        const double target_months = target_years * 12.0;
        const auto& h = out.horizons[static_cast<std::size_t>(k)];
        const double half = weights_.calibration.half_width(window, k);
        const auto pct = bmi_percentile(lms_, record.sex, target_months, h.bmi_pred);
        const auto height = projected_height(lms_, record.sex, points, target_months);
        std::optional<double> weight;
        if (height) weight = h.bmi_pred * (*height / 100.0) * (*height / 100.0);

        predictions.push_back({{"horizon_years", horizon},
                               {"target_age_years", target_years},
                               {"risk", round_to(std::clamp(h.prob_obese, 0.0, 1.0), 4)},
                               {"bmi_pred", round_to(h.bmi_pred, 2)},
                               {"half_width", round_to(half, 2)},
                               {"percentile_pred", rounded_or_null(pct, 1)},
                               {"height_pred", rounded_or_null(height, 1)},
                               {"weight_pred", rounded_or_null(weight, 2)}});
        pred_age.push_back(target_years);
        pred_bmi.push_back(round_to(h.bmi_pred, 2));
        pred_pct.push_back(rounded_or_null(pct, 1));
        pred_wt.push_back(rounded_or_null(weight, 2));
        pred_lo.push_back(round_to(h.bmi_pred - half, 2));
        pred_hi.push_back(round_to(h.bmi_pred + half, 2));
    }

    json factors = json::array();
    for (const auto& f : model::rank_risk_factors(out, sequence, registry_, top_k_)) {
        factors.push_back({{"label", f.label}, {"domain", std::string(to_string(f.domain))}, {"score", round_to(f.score, 4)}});
    }

    return {{"schema_version", kSchemaVersion},
            {"patient",
             {{"id", record.patient_id},
              {"name", record.display_name},
              {"birth_date", format_date(record.birth_date)},
              {"sex", std::string(to_string(record.sex))}}},
            {"as_of_age_years", round_to(as_of_years, 2)},
            {"window_end_age_years", window},
            {"predictions", predictions},
            {"trajectory",
             {{"history",
               {{"age_years", hist_age},
                {"bmi", hist_bmi},
                {"percentile", hist_pct},
                {"weight_kg", hist_wt},
                {"height_cm", hist_ht}}},
              {"predicted",
               {{"age_years", pred_age},
                {"bmi", pred_bmi},
                {"bmi_lo", pred_lo},
                {"bmi_hi", pred_hi},
                {"percentile", pred_pct},
                {"weight_kg", pred_wt}}}}},
            {"risk_factors", factors},
            {"model_version", weights_.model_version},
            {"registry_fingerprint", weights_.registry_fingerprint},
            {"disclaimer_id", kDisclaimerId}};
}

nlohmann::json Predictor::predict_bundle(std::string_view body) const {
    return predict(fhir::to_patient_record(fhir::parse_bundle(body)));
}

nlohmann::json Predictor::model_info() const {
    const auto& c = weights_.config;
    return {{"schema_version", kSchemaVersion},
            {"model_version", weights_.model_version},
            {"registry_fingerprint", weights_.registry_fingerprint},
            {"config",
             {{"vocab_size", c.vocab_size},
              {"embed_dim", c.embed_dim},
              {"lstm_hidden", c.lstm_hidden},
              {"lstm_layers", c.lstm_layers},
              {"attention_dim", c.attention_dim},
              {"head_hidden", {c.head_hidden1, c.head_hidden2}},
              {"conformal_alpha", weights_.calibration.alpha}}},
            {"schedule", weights_.schedule},
            {"windows", {2, 3, 4, 5, 6, 7}},
            {"horizons", {1, 2, 3}},
            {"top_k", top_k_}};
}

std::string render(const nlohmann::json& document) { return document.dump(2) + "\n"; }

int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::MalformedDocument:
        case ErrorCode::MissingPatient:
        case ErrorCode::MultiplePatients:
        case ErrorCode::SchemaViolation:
        case ErrorCode::NegativeAge:
        case ErrorCode::MissingDate:
            return 400;
        case ErrorCode::NotFound:
            return 404;
        case ErrorCode::Ineligible:
            return 422;
        case ErrorCode::Transport:
        case ErrorCode::Unauthorized:
        case ErrorCode::PaginationLoop:
            return 502;
        default:
            return 500;
    }
}

// ---------------------------------------------------------------------------

struct Server::Impl {
    ServiceConfig config;
    httplib::Server http;
    mutable std::mutex mutex;
    std::shared_ptr<const Predictor> current;
    std::atomic<std::uint64_t> error_counter{0};
    std::uint64_t error_salt = std::random_device{}();

    std::shared_ptr<const Predictor> snapshot() const {
        std::lock_guard lock(mutex);
        return current;
    }

    static void send(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(render(body), "application/json");
    }

    void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
        send(res, status, {{"error", {{"status", status}, {"code", code}, {"message", message}}}});
    }

    // Internal failures get an opaque id; details stay in the server log.
    void send_internal(httplib::Response& res, const std::string& detail) {
        char id[17];
        std::snprintf(id, sizeof id, "%016llx",
                      static_cast<unsigned long long>(error_salt ^ (++error_counter * 0x9E3779B97F4A7C15ULL)));
        std::cerr << "pedrisk: internal error " << id << ": " << detail << "\n";
        send(res, 500, {{"error", {{"status", 500}, {"code", "internal"}, {"message", "internal error"}, {"id", id}}}});
    }

    void send_library_error(httplib::Response& res, const Error& e) {
        const int status = http_status(e.code());
        if (status == 500) return send_internal(res, e.what());
        send_error(res, status, to_string(e.code()), e.what());
    }

    // Runs a prediction, mapping failures onto the API's status codes.
    template <typename F>
    void guarded(httplib::Response& res, F&& f) {
        try {
            f();
        } catch (const Error& e) {
            send_library_error(res, e);
        } catch (const std::exception& e) {
            send_internal(res, e.what());
        }
    }

    bool authorized(const httplib::Request& req) const {
        if (config.auth_token.empty()) return true;
        return req.get_header_value("Authorization") == "Bearer " + config.auth_token;
    }

    void routes() {
        http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            if (req.path.rfind("/v1/", 0) != 0 || req.path == "/v1/health" || authorized(req)) {
                return httplib::Server::HandlerResponse::Unhandled;
            }
            res.set_header("WWW-Authenticate", "Bearer");
            send_error(res, 401, "Unauthorized", "missing or invalid bearer token");
            return httplib::Server::HandlerResponse::Handled;
        });

        http.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
            const auto p = snapshot();
            nlohmann::json body = {{"schema_version", kSchemaVersion}, {"status", p ? "ok" : "degraded"}};
            body["model_version"] = p ? nlohmann::json(p->weights().model_version) : nlohmann::json(nullptr);
            send(res, 200, body);
        });

        http.Get("/v1/model", [this](const httplib::Request&, httplib::Response& res) {
            const auto p = snapshot();
            if (!p) return send_error(res, 503, "NoModel", "no model loaded");
            send(res, 200, p->model_info());
        });

        http.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
            const auto p = snapshot();
            if (!p) return send_error(res, 503, "NoModel", "no model loaded");
            guarded(res, [&] { send(res, 200, p->predict_bundle(req.body)); });
        });

        http.Get(R"(/v1/patients/([^/]+)/predict)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto p = snapshot();
            if (!p) return send_error(res, 503, "NoModel", "no model loaded");
            const std::string server = req.has_param("server") ? req.get_param_value("server") : config.fhir_server;
            if (server.empty()) return send_error(res, 400, "MissingServer", "no FHIR server given");
            const std::string id = httplib::detail::decode_url(req.matches[1], false);
            guarded(res, [&] {
                fhir::FetchOptions options;
                if (!config.fhir_token.empty()) options.auth_token = config.fhir_token;
                options.timeout = std::chrono::milliseconds(config.fhir_timeout_ms);
                fhir::FhirResourceSet fetched;
                try {
                    fetched = fhir::fetch_patient_everything(server, id, options);
                } catch (const Error& e) {
                    // Anything but a missing patient is the upstream's fault.
                    if (e.code() == ErrorCode::NotFound) throw;
                    return send_error(res, 502, to_string(e.code()), e.what());
                }
                send(res, 200, p->predict(fhir::to_patient_record(fetched)));
            });
        });

        const auto smart = [this](const httplib::Request&, httplib::Response& res) {
            send_error(res, 501, "NotImplemented", "SMART launch is not supported");
        };
        http.Get("/v1/smart/launch", smart);
        http.Post("/v1/smart/launch", smart);

        http.Post("/v1/admin/reload", [this](const httplib::Request&, httplib::Response& res) {
            if (config.auth_token.empty()) {
                return send_error(res, 403, "Forbidden", "reload needs an auth token in the service config");
            }
            try {
                auto next = Predictor::load(config);
                {
                    std::lock_guard lock(mutex);
                    current = next;
                }
                send(res, 200, next->model_info());
            } catch (const std::exception& e) {
                send_internal(res, std::string("reload failed: ") + e.what());
            }
        });

        if (!config.ui_dir.empty()) http.set_mount_point("/", config.ui_dir.string());
    }
};

Server::Server(ServiceConfig config) : impl_(std::make_unique<Impl>()) {
    config.validate();
    impl_->config = std::move(config);
    const int threads = impl_->config.threads;
    impl_->http.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    impl_->routes();
}

Server::~Server() { stop(); }

void Server::reload() {
    auto next = Predictor::load(impl_->config);
    std::lock_guard lock(impl_->mutex);
    impl_->current = std::move(next);
}

void Server::set_predictor(std::shared_ptr<const Predictor> predictor) {
    std::lock_guard lock(impl_->mutex);
    impl_->current = std::move(predictor);
}

std::shared_ptr<const Predictor> Server::predictor() const { return impl_->snapshot(); }

int Server::bind() {
    const auto& c = impl_->config;
    const int port = c.port == 0 ? impl_->http.bind_to_any_port(c.host) : (impl_->http.bind_to_port(c.host, c.port) ? c.port : -1);
    if (port < 0) throw Error(ErrorCode::Io, "cannot bind " + c.host + ":" + std::to_string(c.port));
    return port;
}

void Server::listen() {
    if (!impl_->http.listen_after_bind()) throw Error(ErrorCode::Io, "server stopped with an error");
}

void Server::stop() {
    if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

void Server::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace pedrisk::service
