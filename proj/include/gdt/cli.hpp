#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gdt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Parses and runs one command. Normal output goes to `out`; progress and the
/// one-line "error: <kind>: <message>" diagnostic go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gdt::cli
