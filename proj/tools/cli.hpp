#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace w2r2::cli {

enum ExitCode : int { ok = 0, config_error = 2, io_error = 3, numeric_error = 4, sweep_failed = 5 };

// Runs one command line (args[0] is the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace w2r2::cli
