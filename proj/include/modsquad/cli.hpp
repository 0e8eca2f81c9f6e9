#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace modsquad::cli {

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kUsage = 2,
  kNumericAbort = 3,
};

// Parses argv and dispatches to a command; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace modsquad::cli
