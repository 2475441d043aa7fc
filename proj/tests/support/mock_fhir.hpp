#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

namespace pedrisk::testing {

/// In-process FHIR R4 server for fetch tests: Patient reads plus paginated
/// `<Type>?patient=` searches over whatever resources were added.
class MockFhirServer {
public:
    MockFhirServer();
    ~MockFhirServer();

    [[nodiscard]] std::string base_url() const;

    /// Every resource of a Bundle (patients and clinical resources).
    void add_bundle(const nlohmann::json& bundle);
    void add_resource(const nlohmann::json& resource);

    void set_page_size(std::size_t n);
    /// For this resource type, page 2 links back to page 1.
    void loop_pages(const std::string& type);
    /// Requests without `Authorization: Bearer <token>` get 401.
    void require_token(const std::string& token);

    [[nodiscard]] std::size_t requests() const { return requests_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::atomic<std::size_t> requests_{0};
};

}  // namespace pedrisk::testing
