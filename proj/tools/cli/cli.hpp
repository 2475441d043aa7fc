#pragma once

#include <ostream>

namespace pedrisk::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kInternal = 3 };

/// `pedrisk synth|train|eval|serve|predict`. Settings resolve as flag, then
/// PEDRISK_* environment variable, then the --config file, then the default.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pedrisk::cli
