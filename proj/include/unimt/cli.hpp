#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace unimt::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kMissingFile = 3 };

/// Runs one subcommand. `args` excludes the program name. Results go to `out`,
/// diagnostics and JSON error objects to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Stable 64-bit FNV-1a digest of `text`, as 16 hex digits.
std::string config_hash(const std::string& text);

}  // namespace unimt::cli
