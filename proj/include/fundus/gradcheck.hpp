#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fundus/graph.hpp"

namespace fundus {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[<flat index>]" of the largest error
  std::size_t probes = 0;
};

/// Compares analytic gradients with central differences.
///
/// `objective` evaluates the scalar being differentiated from the current
/// contents of `probes`. `analytic[i]` is its gradient w.r.t. `*probes[i]`.
/// The error at each probed element is |analytic - central| / max(1, |central|).
/// `max_probes` > 0 limits the number of elements probed per tensor (spread
/// evenly); 0 probes every element.
GradCheckResult finite_difference_check(const std::function<double()>& objective, std::span<Tensor* const> probes,
                                        std::span<const std::string> names, std::span<const Tensor> analytic,
                                        double step, std::size_t max_probes = 0);

/// Distance of the inputs from the nearest point where `node` is not
/// differentiable (relu at 0, maxpool window ties). Infinity for smooth ops.
double kink_distance(const OpNode& node, std::span<const Tensor> inputs);

/// Gradient check of one operator node against the objective sum(w * y)
/// with fixed pseudo-random weights w. Every input and parameter is probed.
/// Throws UnsupportedError for non-differentiable node kinds and
/// ArgumentError when an input lies within 10*step of a kink.
GradCheckResult finite_difference_check(const OpNode& node, std::span<const Tensor> inputs, double step,
                                        ops::Mode mode = ops::Mode::Train, std::uint64_t seed = 0,
                                        std::size_t max_probes = 0);

}  // namespace fundus
