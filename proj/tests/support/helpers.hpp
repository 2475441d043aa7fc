#pragma once

#include <filesystem>
#include <string>

#include "pedrisk/growth.hpp"
#include "pedrisk/model.hpp"
#include "pedrisk/service.hpp"
#include "pedrisk/vocab.hpp"

namespace pedrisk::testing {

std::filesystem::path fixture(const std::string& name);
std::filesystem::path data_file(const std::string& name);
std::string read_file(const std::filesystem::path& path);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& name);

const growth::LmsTable& lms();
/// Demo registry with cohort quantiles fitted on a small synthetic cohort.
const vocab::FeatureRegistry& fitted_registry();

/// Small untrained model over fitted_registry() with fixed calibration,
/// written as model.prsk / model.registry.txt into `dir`.
struct ModelFiles {
    model::ModelWeights weights;
    service::ServiceConfig config;  // paths point at the written files
};
ModelFiles write_test_model(const std::filesystem::path& dir);

}  // namespace pedrisk::testing
