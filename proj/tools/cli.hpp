#pragma once

#include <string>
#include <vector>

namespace permflow::cli {

// Exit codes returned by run().
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 1;
inline constexpr int kDataError = 2;
inline constexpr int kNumericError = 3;

// args excludes the program name. Errors are reported as a single
// "permflow: error: ..." line on stderr.
int run(const std::vector<std::string>& args);

}  // namespace permflow::cli
