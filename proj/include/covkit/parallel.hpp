#pragma once

#include <cstddef>
#include <functional>

namespace covkit {

/// Worker count: COVKIT_THREADS if set, else hardware concurrency.
unsigned worker_count();

/// Runs fn(i) for i in [0, n). Work items must write only to their own slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace covkit
