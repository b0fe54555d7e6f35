#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace bilevel {

// Process-wide byte counters fed by TrackedAllocator. Only containers built
// during correspondence construction use the allocator, so the peak reflects
// that stage alone.
namespace alloc_stats {

std::size_t current_bytes() noexcept;
std::size_t peak_bytes() noexcept;
/// Sets the peak to the current value; call before the region to measure.
void reset_peak() noexcept;

void record_allocate(std::size_t bytes) noexcept;
void record_deallocate(std::size_t bytes) noexcept;

}  // namespace alloc_stats

template <class T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    alloc_stats::record_allocate(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    alloc_stats::record_deallocate(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using TrackedVector = std::vector<T, TrackedAllocator<T>>;

/// Measures the peak tracked bytes above the starting level while alive.
class PeakScope {
 public:
  PeakScope() noexcept : base_(alloc_stats::current_bytes()) { alloc_stats::reset_peak(); }
  std::size_t peak_above_base() const noexcept {
    const std::size_t p = alloc_stats::peak_bytes();
    return p > base_ ? p - base_ : 0;
  }

 private:
  std::size_t base_;
};

}  // namespace bilevel
