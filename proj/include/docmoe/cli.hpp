#pragma once

#include <iosfwd>

namespace docmoe {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitUsage = 2,
    kExitConfig = 3,
    kExitCorrupt = 4,
    kExitDivergence = 5,
};

/// Entry point of the `docmoe` tool.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace docmoe
