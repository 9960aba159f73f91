#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tristream::cli {

// Exit statuses.
constexpr int kOk = 0;
constexpr int kFailure = 1;  // runtime error, or a failed check in verify
constexpr int kUsage = 2;    // bad flags or configuration

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace tristream::cli
