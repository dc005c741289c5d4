#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace aunet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Runs one subcommand (synth | train | eval | gradcheck | report). `args`
// excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aunet
