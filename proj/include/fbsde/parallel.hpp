#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace fbsde {

inline std::size_t default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs body(begin, end) over contiguous chunks of [0, n). Each index is handled exactly once
// and bodies must only write to index-owned storage, so results do not depend on the worker count.
template <typename Body>
void parallel_chunks(std::size_t n, std::size_t workers, Body&& body) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1 || n < 2048) {
    body(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(std::size_t{0}, std::min(n, chunk));
}

// Pairwise summation in a fixed order: reproducible and accurate to O(log n) ulps.
template <typename F>
double pairwise_sum(std::size_t begin, std::size_t end, const F& term) {
  if (end - begin <= 32) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += term(i);
    return s;
  }
  const std::size_t mid = begin + (end - begin) / 2;
  return pairwise_sum(begin, mid, term) + pairwise_sum(mid, end, term);
}

}  // namespace fbsde
