#pragma once

#include <cstddef>

namespace hmr::alloc_stats {

// Byte counters over all tensor buffers. `peak_bytes` is the high-water
// mark since the last `reset_peak`; the benchmark harness uses it as the
// transient-memory measure of an inference path.
void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);
void reset_peak();
std::size_t current_bytes();
std::size_t peak_bytes();

}  // namespace hmr::alloc_stats
