#pragma once

#include <string>
#include <vector>

namespace dgsc {

/// Entry point of the `dgsc` command-line tool. Returns the process exit
/// status: 0 success, 1 usage, 2 config error, 3 I/O error, 4 estimation
/// failure.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

}  // namespace dgsc
