#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "bilevel/bench.hpp"
#include "bilevel/metrics.hpp"
#include "oracles.hpp"

using namespace bilevel;

namespace {

SparseCorrespondence from_links(std::size_t h, std::size_t w, std::size_t le, std::size_t width,
                                std::vector<std::uint32_t> idx, std::vector<float> wt) {
  return SparseCorrespondence(h, w, le, width, TrackedVector<std::uint32_t>(idx.begin(), idx.end()),
                              TrackedVector<float>(wt.begin(), wt.end()));
}

SparseCorrespondence identity(std::size_t h, std::size_t w) {
  std::vector<std::uint32_t> idx(h * w);
  std::iota(idx.begin(), idx.end(), 0u);
  return from_links(h, w, h * w, 1, idx, std::vector<float>(h * w, 1.0f));
}

// Random row-stochastic links, `width` per row, duplicates allowed.
SparseCorrespondence random_links(std::mt19937_64& rng, std::size_t h, std::size_t w,
                                  std::size_t le, std::size_t width) {
  std::vector<std::uint32_t> idx;
  std::vector<float> wt;
  for (std::size_t q = 0; q < h * w; ++q) {
    std::vector<double> raw(width);
    double total = 0.0;
    for (auto& r : raw) total += r = oracle::uniform(rng, 0.05, 1.0);
    for (std::size_t j = 0; j < width; ++j) {
      idx.push_back(static_cast<std::uint32_t>(rng() % le));
      wt.push_back(static_cast<float>(raw[j] / total));
    }
  }
  return from_links(h, w, le, width, idx, wt);
}

BenchOptions quiet(std::vector<BenchSize> sizes) {
  BenchOptions o;
  o.sizes = std::move(sizes);
  o.timing = false;
  return o;
}

}  // namespace

TEST(CycleLoss, IdentityIsZero) {
  std::mt19937_64 rng(1);
  const auto z = oracle::random_grid(rng, 5, 7, 3);
  EXPECT_EQ(cycle_loss(identity(5, 7), z), 0.0);
}

TEST(CycleLoss, CollapseLosesInformation) {
  std::mt19937_64 rng(2);
  const auto z = oracle::random_grid(rng, 4, 4, 2);
  const auto collapse = from_links(4, 4, 16, 1, std::vector<std::uint32_t>(16, 5),
                                   std::vector<float>(16, 1.0f));
  EXPECT_GT(cycle_loss(collapse, z), 0.1);
}

TEST(CycleLoss, MatchesDenseEvaluation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t h = 1 + rng() % 6, w = 1 + rng() % 6, d = 1 + rng() % 4;
    const std::size_t zh = 1 + rng() % 6, zw = 1 + rng() % 6;
    const auto z = oracle::random_grid(rng, zh, zw, d);
    const auto corr = random_links(rng, h, w, zh * zw, 1 + rng() % 5);
    const double expect = static_cast<double>(oracle::dense_cycle_loss(oracle::to_dense(corr), z));
    EXPECT_NEAR(cycle_loss(corr, z), expect, 1e-5) << "trial " << trial;
  }
}

TEST(CycleLoss, InvariantUnderJointPermutation) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 4, w = 5, le = 20, d = 3, width = 3;
    const auto z = oracle::random_grid(rng, 4, 5, d);
    const auto corr = random_links(rng, h, w, le, width);

    std::vector<std::uint32_t> pq(h * w), pe(le);
    std::iota(pq.begin(), pq.end(), 0u);
    std::iota(pe.begin(), pe.end(), 0u);
    std::shuffle(pq.begin(), pq.end(), rng);
    std::shuffle(pe.begin(), pe.end(), rng);

    // Query row q moves to pq[q]; exemplar feature e moves to pe[e].
    std::vector<std::uint32_t> idx(h * w * width);
    std::vector<float> wt(h * w * width);
    for (std::size_t q = 0; q < h * w; ++q)
      for (std::size_t j = 0; j < width; ++j) {
        idx[pq[q] * width + j] = pe[corr.index(q, j)];
        wt[pq[q] * width + j] = corr.weight(q, j);
      }
    std::vector<float> zp(le * d);
    for (std::size_t e = 0; e < le; ++e)
      for (std::size_t c = 0; c < d; ++c) zp[pe[e] * d + c] = z.site(e)[c];

    const double a = cycle_loss(corr, z);
    const double b = cycle_loss(from_links(h, w, le, width, idx, wt), FeatureGrid(4, 5, d, zp));
    EXPECT_NEAR(a, b, 1e-12);
  }
}

TEST(ConsistencyLoss, Examples) {
  std::mt19937_64 rng(5);
  const auto a = oracle::random_grid(rng, 3, 4, 2);
  EXPECT_EQ(consistency_loss(a, a), 0.0);
  std::vector<float> shifted(a.data().begin(), a.data().end());
  for (auto& v : shifted) v += 1.0f;
  EXPECT_NEAR(consistency_loss(a, FeatureGrid(3, 4, 2, shifted)), 1.0, 1e-6);
  EXPECT_THROW(consistency_loss(a, oracle::random_grid(rng, 4, 3, 2)), Error);
}

TEST(ConsistencyLoss, MatchesNaiveSum) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 1 + rng() % 8, w = 1 + rng() % 8, d = 1 + rng() % 5;
    const auto a = oracle::random_grid(rng, h, w, d, -10, 10);
    const auto b = oracle::random_grid(rng, h, w, d, -10, 10);
    oracle::real total = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
      total += std::abs(oracle::real(a.data()[i]) - oracle::real(b.data()[i]));
    EXPECT_NEAR(consistency_loss(a, b), double(total / a.data().size()), 1e-6);
  }
}

TEST(Bench, ClosedFormCounts) {
  const auto rec = run_bench(quiet({{16, 16, 4}, {32, 32, 4}}));
  ASSERT_EQ(rec.size(), 4u);
  const std::size_t L[] = {256, 1024};
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& dense = rec[2 * s];
    const auto& ras = rec[2 * s + 1];
    EXPECT_EQ(dense.method, "dense");
    EXPECT_EQ(ras.method, "ras");
    EXPECT_EQ(dense.entries, L[s] * L[s]);
    EXPECT_EQ(ras.entries, L[s] * 3 * 4);
    EXPECT_EQ(ras.ranking_scores, (L[s] / 4) * (L[s] / 4));
    EXPECT_FALSE(dense.failed);
    EXPECT_GT(ras.peak_bytes, 0u);
    EXPECT_GT(dense.peak_bytes, 0u);
    EXPECT_EQ(ras.ms, 0.0);
    EXPECT_TRUE(std::isfinite(ras.warp_l1));
  }
  EXPECT_EQ(rec[3].entries, 4 * rec[1].entries);
  EXPECT_EQ(rec[3].ranking_scores, 16 * rec[1].ranking_scores);
}

TEST(Bench, SingleBlockDegeneratesToDense) {
  auto o = quiet({{8, 8, 4}});
  o.block_side = 8;
  o.k = 1;
  const auto rec = run_bench(o);
  ASSERT_EQ(rec.size(), 2u);
  EXPECT_EQ(rec[1].entries, rec[0].entries);
  EXPECT_EQ(rec[1].entries, 64u * 64u);
  EXPECT_LT(rec[1].warp_l1, 1e-6);
}

TEST(Bench, DenseLimitRecordsFailure) {
  auto o = quiet({{16, 16, 2}});
  o.dense_limit_bytes = 1024;
  const auto rec = run_bench(o);
  EXPECT_TRUE(rec[0].failed);
  EXPECT_TRUE(std::isnan(rec[0].ms));
  EXPECT_TRUE(std::isnan(rec[1].warp_l1));
  const auto csv = bench_csv(rec);
  EXPECT_NE(csv.find(",nan,nan\n"), std::string::npos);
  EXPECT_NE(csv.find(",0,nan\n"), std::string::npos);
}

TEST(Bench, CsvIsDeterministic) {
  const auto o = quiet({{16, 16, 4}});
  const auto a = bench_csv(run_bench(o));
  EXPECT_EQ(a.substr(0, a.find('\n')), "method,L,b,k,entries,ranking_scores,peak_bytes,ms,warp_l1");
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 3);
  EXPECT_EQ(a, bench_csv(run_bench(o)));
}

TEST(Bench, ParallelKeepsCountsAndWarps) {
  auto o = quiet({{16, 16, 4}});
  const auto serial = run_bench(o);
  o.parallel = true;
  const auto par = run_bench(o);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].entries, par[i].entries);
    EXPECT_EQ(serial[i].ranking_scores, par[i].ranking_scores);
    EXPECT_EQ(serial[i].warp_l1, par[i].warp_l1);
  }
}

TEST(Bench, RandomGridIsSeededAndInRange) {
  const auto a = random_grid(4, 4, 3, 9);
  EXPECT_EQ(a, random_grid(4, 4, 3, 9));
  EXPECT_NE(a, random_grid(4, 4, 3, 10));
  for (float v : a.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LT(v, 1.0f);
  }
}
