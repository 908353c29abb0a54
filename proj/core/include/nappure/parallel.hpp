#pragma once

#include <cstddef>
#include <functional>

namespace nappure {

// Runs fn(i) for i in [0, n) across up to `threads` workers (0 = hardware
// concurrency). Work items must be independent; results keyed by index stay
// deterministic regardless of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned threads = 0);

}  // namespace nappure
