#pragma once

#include <ostream>
#include <span>
#include <string>

namespace fundus::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one `fundus-netkit` invocation. args[0] is the program name.
int dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace fundus::cli
