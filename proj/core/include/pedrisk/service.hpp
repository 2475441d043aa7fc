#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include "json.hpp"
#include "pedrisk/error.hpp"
#include "pedrisk/growth.hpp"
#include "pedrisk/model.hpp"
#include "pedrisk/record.hpp"
#include "pedrisk/sequencer.hpp"
#include "pedrisk/vocab.hpp"

/// Prediction documents and the HTTP API that serves them.
namespace pedrisk::service {

inline constexpr std::string_view kSchemaVersion = "v1";
inline constexpr std::string_view kDisclaimerId = "pedrisk.disclaimer.v1";
inline constexpr std::size_t kMaxTopK = 10;

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path weights_path = "model.prsk";
    std::filesystem::path registry_path = "model.registry.txt";
    std::filesystem::path lms_path = "cdc_lms.txt";
    std::string fhir_server;  // default upstream for GET-by-id when ?server= is absent
    std::string fhir_token;   // sent upstream as a bearer token
    int fhir_timeout_ms = 10'000;
    std::string auth_token;  // when set, every route but /v1/health needs it
    std::size_t top_k = 5;
    std::string schedule;  // empty: whatever the weights were trained with
    std::filesystem::path ui_dir;
    int threads = 8;

    void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

/// One immutable model, registry and growth table. Shared read-only between
/// concurrent requests; a reload builds a new one.
class Predictor {
public:
    /// Throws FingerprintMismatch when the weights were trained against a
    /// different registry, InvalidConfig for k outside [1, 10].
    Predictor(model::ModelWeights weights, vocab::FeatureRegistry registry, growth::LmsTable lms,
              std::size_t top_k = 5);

    /// Reads the three artifacts named in the config.
    static std::shared_ptr<const Predictor> load(const ServiceConfig& config);

    /// The PredictionResult document. Throws Error(Ineligible) when the age at
    /// the latest event is outside the supported windows or no BMI was ever recorded.
    [[nodiscard]] nlohmann::json predict(const PatientRecord& record) const;
    /// Parses and normalizes a posted Bundle, then predict().
    [[nodiscard]] nlohmann::json predict_bundle(std::string_view body) const;

    /// Version, config summary, fingerprint, supported windows and horizons.
    [[nodiscard]] nlohmann::json model_info() const;

    [[nodiscard]] const model::ModelWeights& weights() const { return weights_; }
    [[nodiscard]] const vocab::FeatureRegistry& registry() const { return registry_; }

private:
    model::ModelWeights weights_;
    vocab::FeatureRegistry registry_;
    growth::LmsTable lms_;
    features::BinSchedule schedule_;
    std::size_t top_k_;
};

/// The exact bytes both the CLI and the HTTP API emit for a document.
std::string render(const nlohmann::json& document);

/// HTTP status for a library error reaching the API.
int http_status(ErrorCode code);

class Server {
public:
    explicit Server(ServiceConfig config);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Loads the configured artifacts and swaps them in. On failure the
    /// previous model stays and the error propagates.
    void reload();
    void set_predictor(std::shared_ptr<const Predictor> predictor);
    [[nodiscard]] std::shared_ptr<const Predictor> predictor() const;

    /// Binds host:port (port 0 picks a free one) and returns the bound port.
    int bind();
    /// Serves until stop(); call after bind().
    void listen();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace pedrisk::service
