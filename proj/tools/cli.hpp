#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace attnbench::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFlagged = 1;     // validate: contaminated records; run: incomplete cells
inline constexpr int kFailure = 2;     // usage or hard error

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace attnbench::cli
