#pragma once

#include <cstddef>
#include <functional>
#include <optional>

namespace sharplens {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// independent; callers write results into per-index slots and reduce in
/// index order, so results never depend on the worker count. If any item
/// throws, the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Worker count from an explicit value, else SHARPLENS_THREADS, else 1.
std::size_t resolve_threads(std::optional<std::size_t> requested);

}  // namespace sharplens
