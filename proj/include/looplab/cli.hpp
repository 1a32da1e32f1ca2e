#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace looplab {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes of run_command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. `args` excludes the program name, e.g.
/// {"anisotropy", "--n", "100", "--out", "stats.csv"}.
/// Flags may also come from `--config FILE` (key=value lines, flag names
/// without dashes); explicit flags win over the file.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace looplab
