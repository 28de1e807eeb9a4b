#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace residual_lens::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitBoundViolation = 3;

// Entry point shared by the executable and the tests. args excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Worker count for `analyze`: RESIDUAL_LENS_THREADS when set to a positive
// integer, else the hardware concurrency.
std::size_t thread_budget();

}  // namespace residual_lens::cli
