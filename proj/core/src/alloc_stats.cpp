#include "hmr/alloc_stats.hpp"

#include <atomic>

namespace hmr::alloc_stats {

namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

void note_alloc(std::size_t bytes) {
    std::size_t cur = g_current.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t peak = g_peak.load(std::memory_order_relaxed);
    while (cur > peak && !g_peak.compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
    }
}

void note_free(std::size_t bytes) {
    g_current.fetch_sub(bytes, std::memory_order_relaxed);
}

void reset_peak() {
    g_peak.store(g_current.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

std::size_t current_bytes() {
    return g_current.load(std::memory_order_relaxed);
}

std::size_t peak_bytes() {
    return g_peak.load(std::memory_order_relaxed);
}

}  // namespace hmr::alloc_stats
