#pragma once

#include <cstddef>
#include <functional>

namespace fundus {

/// Worker threads available to operators. Defaults to the
/// FUNDUS_NETKIT_THREADS environment variable when set, otherwise the
/// hardware concurrency.
int num_threads();
void set_num_threads(int n);

/// Runs fn(begin, end) over contiguous chunks of [0, count). Chunks write
/// disjoint outputs, so results never depend on the thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace fundus
