#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace unetmm::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kDataFormat = 3,
    kNumeric = 4,
};

/// Runs one invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace unetmm::cli
