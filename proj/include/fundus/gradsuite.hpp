#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fundus/gradcheck.hpp"

namespace fundus::gradsuite {

inline constexpr double kDefaultStep = 1e-3;
inline constexpr double kTolerance = 1e-3;

/// Operator cases, one per differentiable operator configuration.
std::vector<std::string> operator_cases();
/// End-to-end loss cases, each through a small two-layer network.
std::vector<std::string> loss_cases();
std::vector<std::string> all_cases();

/// Runs one case on a random instance drawn from `seed`. Instances that land
/// within 10*step of a kink are redrawn.
GradCheckResult run_case(const std::string& name, std::uint64_t seed, double step = kDefaultStep);

}  // namespace fundus::gradsuite
