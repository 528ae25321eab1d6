#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace exitrf::cli {

/// Runs one command line (args[0] is the program name). Returns the process
/// exit status; diagnostics go to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace exitrf::cli
