#pragma once

#include <stdexcept>
#include <string>

namespace cvl {

// Malformed or inconsistent input data (files, corpora, checkpoints).
// Mapped to exit code 3 by the CLI.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values or other numeric failures during optimization.
// Mapped to exit code 4 by the CLI.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace cvl
