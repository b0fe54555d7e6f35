#include "bilevel/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <new>
#include <optional>
#include <random>

#include "bilevel/metrics.hpp"
#include "bilevel/ras_correspondence.hpp"
#include "bilevel/tracked_alloc.hpp"

namespace bilevel {
namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class Build>
auto timed_builds(std::size_t reps, Build&& build, double& ms, std::size_t& peak) {
  std::vector<double> times;
  std::optional<decltype(build())> kept;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, reps); ++r) {
    kept.reset();
    PeakScope scope;
    const auto t0 = Clock::now();
    kept.emplace(build());
    const auto t1 = Clock::now();
    if (r == 0) peak = scope.peak_above_base();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  ms = median(std::move(times));
  return std::move(*kept);
}

void append_number(std::string& s, double v) {
  if (std::isnan(v)) {
    s += "nan";
    return;
  }
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  s.append(buf, end);
}

}  // namespace

FeatureGrid random_grid(std::size_t height, std::size_t width, std::size_t channels,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<float> data(height * width * channels);
  for (float& v : data) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<float>(2.0 * u - 1.0);
  }
  return FeatureGrid(height, width, channels, std::move(data));
}

std::vector<BenchRecord> run_bench(const BenchOptions& options) {
  std::vector<BenchRecord> records;
  for (std::size_t si = 0; si < options.sizes.size(); ++si) {
    const BenchSize& size = options.sizes[si];
    const std::uint64_t base = options.seed * 0x9E3779B97F4A7C15ull + 2 * si;
    const FeatureGrid cond = random_grid(size.height, size.width, size.channels, base);
    const FeatureGrid exemplar = random_grid(size.height, size.width, size.channels, base + 1);
    const std::size_t L = cond.sites();
    const std::size_t b = options.block_side * options.block_side;

    BenchRecord dense{"dense", L, b, options.k};
    std::optional<FeatureGrid> dense_warp;
    if (L * L * sizeof(float) > options.dense_limit_bytes) {
      dense.failed = true;
    } else {
      try {
        auto corr = timed_builds(
            options.repetitions,
            [&] { return dense_correspondence_baseline(cond, exemplar, options.tau, options.parallel); },
            dense.ms, dense.peak_bytes);
        dense.entries = entry_count(corr);
        dense_warp = warp(corr, exemplar);
      } catch (const std::bad_alloc&) {
        dense.failed = true;
      }
    }
    if (dense.failed) {
      dense.ms = std::numeric_limits<double>::quiet_NaN();
      dense.warp_l1 = std::numeric_limits<double>::quiet_NaN();
    }

    BenchRecord ras{"ras", L, b, options.k};
    AlignOptions align;
    align.block_side = options.block_side;
    align.tau = options.tau;
    align.rank.k = options.k;
    align.rank.sinkhorn = options.sinkhorn;
    align.rank.parallel = options.parallel;
    auto result = timed_builds(
        options.repetitions, [&] { return align_ras(cond, exemplar, align); }, ras.ms,
        ras.peak_bytes);
    ras.entries = entry_count(result.correspondence);
    ras.ranking_scores = result.ranking.scored_pairs();
    ras.warp_l1 = dense_warp ? consistency_loss(warp(result.correspondence, exemplar), *dense_warp)
                             : std::numeric_limits<double>::quiet_NaN();

    if (!options.timing) {
      if (!dense.failed) dense.ms = 0.0;
      ras.ms = 0.0;
    }
    records.push_back(std::move(dense));
    records.push_back(std::move(ras));
  }
  return records;
}

std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::string s = "method,L,b,k,entries,ranking_scores,peak_bytes,ms,warp_l1\n";
  for (const auto& r : records) {
    s += r.method + ',' + std::to_string(r.features) + ',' + std::to_string(r.block_size) + ',' +
         std::to_string(r.k) + ',' + std::to_string(r.entries) + ',' +
         std::to_string(r.ranking_scores) + ',' + std::to_string(r.peak_bytes) + ',';
    append_number(s, r.ms);
    s += ',';
    append_number(s, r.warp_l1);
    s += '\n';
  }
  return s;
}

}  // namespace bilevel
