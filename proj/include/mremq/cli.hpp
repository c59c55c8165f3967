#pragma once

#include <string>
#include <vector>

namespace mremq {

// Full command-line entry point (also driven directly by the test suites).
// Returns the process exit status: 0 on success, nonzero with a one-line
// diagnostic on stderr otherwise.
int run_cli(const std::vector<std::string>& args);

}  // namespace mremq
