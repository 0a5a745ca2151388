#pragma once

#include <iosfwd>

namespace sharplens {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

/// Entry point of the `sharplens` command. Output goes to `out`, diagnostics
/// and progress to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sharplens
