#pragma once

#include <string>
#include <vector>

namespace lp::cli {

// Entry point behind the lp binary. Exit code 0 on success, 2 on usage
// errors, 1 on runtime errors.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace lp::cli
