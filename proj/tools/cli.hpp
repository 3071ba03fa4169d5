#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace orthonet::cli {

// Exit statuses of the command-line driver.
inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

// Parses `args` (without the program name), runs the subcommand and
// returns the exit status. Progress goes to `out`, errors to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace orthonet::cli
