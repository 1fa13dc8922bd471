#pragma once

#include <string>
#include <vector>

namespace repdib::cli {

// Entry point shared by the binary and the tests. Returns the process exit
// status; errors print a one-line reason to stderr.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace repdib::cli
