#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bilevel/grid.hpp"
#include "bilevel/sinkhorn_topk.hpp"

namespace bilevel {

struct BenchSize {
  std::size_t height;
  std::size_t width;
  std::size_t channels;
};

struct BenchOptions {
  std::vector<BenchSize> sizes{{32, 32, 8}, {64, 64, 8}, {128, 128, 8}};
  std::size_t block_side = 2;
  std::size_t k = 3;
  double tau = 0.07;
  SinkhornOptions sinkhorn{};
  std::size_t repetitions = 1;
  std::uint64_t seed = 0;
  bool parallel = false;
  /// When false the ms column is written as 0 so reruns are byte-identical.
  bool timing = true;
  /// The dense baseline is not attempted when its weight matrix would exceed this.
  std::size_t dense_limit_bytes = std::size_t{3} << 30;
};

struct BenchRecord {
  std::string method;  // "dense" or "ras"
  std::size_t features = 0;
  std::size_t block_size = 0;
  std::size_t k = 0;
  std::size_t entries = 0;
  std::size_t ranking_scores = 0;
  std::size_t peak_bytes = 0;
  double ms = 0.0;
  double warp_l1 = 0.0;  // mean |RAS warp - dense warp|; NaN when dense failed
  bool failed = false;
};

/// Uniform [-1, 1) features from a 64-bit Mersenne Twister, mapped bitwise so
/// the values do not depend on the standard library's distributions.
FeatureGrid random_grid(std::size_t height, std::size_t width, std::size_t channels,
                        std::uint64_t seed);

/// Dense and RAS records for every size, in that order.
std::vector<BenchRecord> run_bench(const BenchOptions& options);

/// CSV with header method,L,b,k,entries,ranking_scores,peak_bytes,ms,warp_l1.
std::string bench_csv(const std::vector<BenchRecord>& records);

}  // namespace bilevel
