#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace diet {

/// Exit statuses of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

/// Runs one command line (without the program name). Machine-readable
/// results go to `out`, diagnostics to `err`; artifacts land in the
/// configured output directory.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace diet
