#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>

#include "bilevel/grid.hpp"
#include "bilevel/sinkhorn_topk.hpp"
#include "bilevel/tracked_alloc.hpp"

namespace bilevel {

/// Tiling of an H x W grid into s x s blocks (b = s * s features per block).
/// Blocks are numbered in raster order over the block grid; features inside a
/// block are numbered in raster order over the block.
class BlockPartition {
 public:
  BlockPartition(std::size_t height, std::size_t width, std::size_t block_side);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t block_side() const noexcept { return side_; }
  std::size_t block_size() const noexcept { return side_ * side_; }
  std::size_t blocks_h() const noexcept { return height_ / side_; }
  std::size_t blocks_w() const noexcept { return width_ / side_; }
  std::size_t block_count() const noexcept { return blocks_h() * blocks_w(); }
  std::size_t feature_count() const noexcept { return height_ * width_; }

  /// Row-major feature index of the `offset`-th member of `block`.
  std::size_t feature_index(std::size_t block, std::size_t offset) const noexcept {
    const std::size_t by = block / blocks_w(), bx = block % blocks_w();
    const std::size_t oy = offset / side_, ox = offset % side_;
    return (by * side_ + oy) * width_ + bx * side_ + ox;
  }
  /// (block, offset) holding the row-major feature index.
  std::pair<std::size_t, std::size_t> locate(std::size_t feature) const noexcept {
    const std::size_t y = feature / width_, x = feature % width_;
    return {(y / side_) * blocks_w() + x / side_, (y % side_) * side_ + x % side_};
  }

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t side_;
};

/// Concatenated member vectors per block (dimension b * d) and their
/// L2-normalized copy.
struct BlockFeatures {
  std::size_t count = 0;
  std::size_t dim = 0;
  TrackedVector<float> raw;
  TrackedVector<double> normalized;

  std::span<const float> raw_block(std::size_t i) const { return {raw.data() + i * dim, dim}; }
  std::span<const double> unit_block(std::size_t i) const {
    return {normalized.data() + i * dim, dim};
  }
};

std::pair<BlockPartition, BlockFeatures> partition_blocks(const FeatureGrid& grid,
                                                          std::size_t block_side);

struct RankOptions {
  std::size_t k = 3;
  SinkhornOptions sinkhorn{};
  bool parallel = false;
  /// Full score rows are kept when the exemplar has at most this many blocks.
  std::size_t keep_scores_limit = 64;
};

/// Per query block: k retrieved exemplar blocks in ascending block order and
/// their soft-selection weights, plus the peak cosine over all exemplar blocks.
struct BlockRanking {
  std::size_t query_blocks = 0;
  std::size_t exemplar_blocks = 0;
  std::size_t k = 0;
  TrackedVector<std::uint32_t> candidates;  // query_blocks x k
  TrackedVector<double> gamma;              // query_blocks x k
  TrackedVector<double> peak_scores;        // query_blocks
  TrackedVector<double> score_rows;         // query_blocks x exemplar_blocks, or empty
  std::size_t unconverged = 0;              // solves that hit max_iters

  std::span<const std::uint32_t> candidates_of(std::size_t i) const {
    return {candidates.data() + i * k, k};
  }
  std::span<const double> gamma_of(std::size_t i) const { return {gamma.data() + i * k, k}; }
  std::span<const double> scores_of(std::size_t i) const {
    return {score_rows.data() + i * exemplar_blocks, exemplar_blocks};
  }
  bool has_scores() const noexcept { return !score_rows.empty(); }
  /// Cosine scores evaluated while ranking (query_blocks x exemplar_blocks).
  std::size_t scored_pairs() const noexcept { return query_blocks * exemplar_blocks; }
};

BlockRanking rank_blocks(const BlockFeatures& query, const BlockFeatures& exemplar,
                         const RankOptions& options);

/// Row-stochastic sparse matrix from query features to exemplar features with
/// the same number of links per row. The dense form stores no indices: row q
/// links to every exemplar feature in order.
class SparseCorrespondence {
 public:
  SparseCorrespondence(std::size_t query_height, std::size_t query_width,
                       std::size_t exemplar_count, std::size_t row_width,
                       TrackedVector<std::uint32_t> indices, TrackedVector<float> weights);

  std::size_t query_height() const noexcept { return query_height_; }
  std::size_t query_width() const noexcept { return query_width_; }
  std::size_t query_count() const noexcept { return query_height_ * query_width_; }
  std::size_t exemplar_count() const noexcept { return exemplar_count_; }
  std::size_t row_width() const noexcept { return row_width_; }
  bool is_dense() const noexcept { return indices_.empty(); }

  std::uint32_t index(std::size_t q, std::size_t j) const noexcept {
    return is_dense() ? static_cast<std::uint32_t>(j) : indices_[q * row_width_ + j];
  }
  float weight(std::size_t q, std::size_t j) const noexcept {
    return weights_[q * row_width_ + j];
  }
  std::span<const float> weights_of(std::size_t q) const noexcept {
    return {weights_.data() + q * row_width_, row_width_};
  }
  /// Number of stored weights.
  std::size_t entries() const noexcept { return weights_.size(); }

 private:
  std::size_t query_height_;
  std::size_t query_width_;
  std::size_t exemplar_count_;
  std::size_t row_width_;
  TrackedVector<std::uint32_t> indices_;
  TrackedVector<float> weights_;
};

/// Weight from query feature q (block i) to exemplar feature e in candidate
/// block j is gamma_ij * exp(cos(x_q, z_e) / tau), normalized per row.
SparseCorrespondence block_attention(const BlockPartition& partition, const FeatureGrid& query,
                                     const FeatureGrid& exemplar, const BlockRanking& ranking,
                                     double tau, bool parallel = false);

/// out_q = sum over links of weight * z_e.
FeatureGrid warp(const SparseCorrespondence& correspondence, const FeatureGrid& exemplar);

/// Full softmax over cos(x_q, z_e) / tau for every pair.
SparseCorrespondence dense_correspondence_baseline(const FeatureGrid& query,
                                                   const FeatureGrid& exemplar, double tau,
                                                   bool parallel = false);

std::size_t entry_count(const SparseCorrespondence& correspondence);

/// "query_index,exemplar_index,weight" lines after a header line.
void write_correspondence_csv(const SparseCorrespondence& correspondence,
                              const std::filesystem::path& path);

struct AlignOptions {
  std::size_t block_side = 2;
  RankOptions rank{};
  double tau = 0.07;
};

struct Alignment {
  BlockPartition partition;
  BlockRanking ranking;
  SparseCorrespondence correspondence;
};

/// Partition, rank and attend in one pass. `query` and `exemplar` are the
/// similarity features; warp the exemplar values with the returned
/// correspondence.
Alignment align_ras(const FeatureGrid& query, const FeatureGrid& exemplar,
                    const AlignOptions& options);

}  // namespace bilevel
