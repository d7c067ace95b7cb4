#ifndef DPQ_TOOLS_CLI_HPP
#define DPQ_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace dpq::cli {

// Stable exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;     // I/O, unreadable dataset, locked run directory
inline constexpr int kExitUsage = 2;     // bad flags or an invalid configuration
inline constexpr int kExitDiverged = 3;  // non-finite loss or parameters
inline constexpr int kExitCorrupt = 4;   // artifact or state file failed validation
inline constexpr int kExitGradCheck = 5;

struct Hooks {
  bool flip_value_grad_sign = false;  // mutation-test builds only
};

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const Hooks& hooks = {});

}  // namespace dpq::cli

#endif  // DPQ_TOOLS_CLI_HPP
