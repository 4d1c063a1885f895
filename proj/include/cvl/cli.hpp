#pragma once

namespace cvl::cli {

// Parses argv and dispatches to one subcommand. Returns the process exit
// code: 0 success, 2 usage error, 3 bad data, 4 numeric abort.
int run(int argc, const char* const* argv);

}  // namespace cvl::cli
