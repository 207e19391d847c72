#ifndef MGN_TOOLS_CLI_HPP
#define MGN_TOOLS_CLI_HPP

#include <string>
#include <vector>

namespace mgn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

/// Entry point of the `mgn` tool. Returns the process exit code.
int run(int argc, char** argv);
/// Same, with `args` excluding the program name.
int run(const std::vector<std::string>& args);

}  // namespace mgn::cli

#endif  // MGN_TOOLS_CLI_HPP
