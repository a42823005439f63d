#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fixelfit {

// Work is cut into fixed-size chunks whose boundaries do not depend on the
// thread count. Callers that reduce per-chunk partials in chunk order get
// bitwise identical results for any number of threads.
inline constexpr std::size_t kChunkSize = 32;

inline std::size_t chunk_count(std::size_t n) {
  return (n + kChunkSize - 1) / kChunkSize;
}

inline int default_threads() {
  if (const char* env = std::getenv("FIXELFIT_THREADS")) {
    int t = std::atoi(env);
    if (t > 0) return t;
  }
  return 1;
}

// fn(chunk_index, begin, end) is called once per chunk.
template <class Fn>
void for_each_chunk(std::size_t n, int threads, Fn&& fn) {
  const std::size_t chunks = chunk_count(n);
  const auto run = [&](std::size_t c) {
    const std::size_t begin = c * kChunkSize;
    fn(c, begin, std::min(n, begin + kChunkSize));
  };
  const std::size_t workers =
      std::min<std::size_t>(chunks, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) run(c);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace fixelfit
