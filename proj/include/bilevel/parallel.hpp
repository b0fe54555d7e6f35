#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace bilevel {

/// Number of workers used when data-parallel execution is requested.
inline std::size_t worker_count(bool parallel) {
  if (!parallel) return 1;
  return std::max<std::size_t>(2, std::thread::hardware_concurrency());
}

/// Splits [0, count) into one contiguous chunk per worker and calls
/// fn(begin, end, worker). Chunk boundaries depend only on count and the
/// worker count, so each item is always processed by the same code path.
template <class Fn>
void parallel_for_chunks(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    fn(std::size_t{0}, count, std::size_t{0});
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  threads.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(count, w * chunk);
    const std::size_t end = std::min(count, begin + chunk);
    threads.emplace_back([&, begin, end, w] {
      try {
        fn(begin, end, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace bilevel
