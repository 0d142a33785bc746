#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace icx::cli {

enum ExitCode : int {
  kSuccess = 0,
  kRuntimeFailure = 1,
  kUsageError = 2,
  kBackendUnreachable = 3,
};

/// Entry point of the `icx` tool. `args` excludes the program name.
/// Data goes to `out`, progress and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace icx::cli
