#pragma once

#include <iosfwd>

namespace iwivig::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

// Entry point of the `iwivig` command line tool. Results go to `out`,
// progress and diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace iwivig::cli
