#pragma once

#include <cstddef>
#include <functional>

namespace segaware {

// Worker cap: min(hardware threads, SEGAWARE_THREADS when set). At least 1.
std::size_t worker_count();

// Runs fn(row_begin, row_end) over a static partition of [0, rows). Each
// worker owns a contiguous block and must write only its own output rows;
// per-row reductions stay sequential, so results do not depend on the
// number of workers. Small row counts run inline.
void parallel_for_rows(std::size_t rows, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace segaware
