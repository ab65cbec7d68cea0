#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace patchmoe::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kNumeric = 4 };

/// Runs one command line (args[0] is the program name). Output goes to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchmoe::cli
