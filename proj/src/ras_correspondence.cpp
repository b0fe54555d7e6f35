#include "bilevel/ras_correspondence.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "bilevel/parallel.hpp"
#include "bilevel/tensor_io.hpp"

namespace bilevel {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Unit-norm copy of every site vector, in double.
TrackedVector<double> unit_sites(const FeatureGrid& grid) {
  const std::size_t d = grid.channels();
  TrackedVector<double> out(grid.data().size(), 0.0);
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    auto v = grid.site(s);
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm < kNormEpsilon) continue;
    for (std::size_t c = 0; c < d; ++c) out[s * d + c] = v[c] / norm;
  }
  return out;
}

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw Error(ErrorKind::InvalidArgument, "tau must be positive");
  }
}

}  // namespace

BlockPartition::BlockPartition(std::size_t height, std::size_t width, std::size_t block_side)
    : height_(height), width_(width), side_(block_side) {
  if (block_side == 0) throw Error(ErrorKind::InvalidArgument, "block side must be positive");
  if (height == 0 || width == 0 || height % block_side != 0 || width % block_side != 0) {
    throw Error(ErrorKind::Shape, std::to_string(height) + "x" + std::to_string(width) +
                                      " grid is not divisible into " +
                                      std::to_string(block_side) + "x" +
                                      std::to_string(block_side) + " blocks");
  }
}

std::pair<BlockPartition, BlockFeatures> partition_blocks(const FeatureGrid& grid,
                                                          std::size_t block_side) {
  BlockPartition part(grid.height(), grid.width(), block_side);
  const std::size_t d = grid.channels();
  const std::size_t b = part.block_size();
  BlockFeatures blocks;
  blocks.count = part.block_count();
  blocks.dim = b * d;
  blocks.raw.resize(blocks.count * blocks.dim);
  blocks.normalized.assign(blocks.count * blocks.dim, 0.0);
  for (std::size_t i = 0; i < blocks.count; ++i) {
    float* dst = blocks.raw.data() + i * blocks.dim;
    for (std::size_t o = 0; o < b; ++o) {
      auto v = grid.site(part.feature_index(i, o));
      std::copy(v.begin(), v.end(), dst + o * d);
    }
    double sq = 0.0;
    for (std::size_t c = 0; c < blocks.dim; ++c) sq += static_cast<double>(dst[c]) * dst[c];
    const double norm = std::sqrt(sq);
    if (norm < kNormEpsilon) continue;
    for (std::size_t c = 0; c < blocks.dim; ++c) {
      blocks.normalized[i * blocks.dim + c] = dst[c] / norm;
    }
  }
  return {std::move(part), std::move(blocks)};
}

BlockRanking rank_blocks(const BlockFeatures& query, const BlockFeatures& exemplar,
                         const RankOptions& options) {
  if (query.dim != exemplar.dim) {
    throw Error(ErrorKind::Shape, "query and exemplar block dimensions differ (" +
                                      std::to_string(query.dim) + " vs " +
                                      std::to_string(exemplar.dim) + ")");
  }
  const std::size_t n = exemplar.count;
  const std::size_t k = options.k;
  if (k < 1 || k > n) throw Error(ErrorKind::InvalidArgument, "k must lie in [1, exemplar blocks]");
  // Validates the solver options once up front.
  (void)TopKProblem(std::vector<double>(n, 0.0), k, options.sinkhorn);

  BlockRanking r;
  r.query_blocks = query.count;
  r.exemplar_blocks = n;
  r.k = k;
  r.candidates.resize(query.count * k);
  r.gamma.resize(query.count * k);
  r.peak_scores.resize(query.count);
  if (n <= options.keep_scores_limit) r.score_rows.resize(query.count * n);

  const std::size_t workers = std::min(worker_count(options.parallel), std::max<std::size_t>(1, query.count));
  // Per-worker scratch: scores, gamma, solver buffers (5n), top-k slots.
  std::vector<TrackedVector<double>> scratch(workers, TrackedVector<double>(7 * n));
  std::vector<TrackedVector<std::uint32_t>> slots(workers, TrackedVector<std::uint32_t>(k));
  std::vector<std::size_t> unconverged(workers, 0);

  parallel_for_chunks(query.count, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
    std::span<double> buf(scratch[w]);
    auto scores = buf.subspan(0, n);
    auto gamma = buf.subspan(n, n);
    auto solver = buf.subspan(2 * n, 5 * n);
    auto& top = slots[w];
    for (std::size_t i = begin; i < end; ++i) {
      const auto qv = query.unit_block(i);
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const double s = dot(qv, exemplar.unit_block(j));
        peak = std::max(peak, s);
        scores[j] = std::clamp(s, -1.0, 1.0);
      }
      r.peak_scores[i] = peak;
      if (!r.score_rows.empty()) std::copy(scores.begin(), scores.end(), r.score_rows.begin() + i * n);

      const auto res = solve_gamma_into(scores, k, options.sinkhorn, gamma, solver);
      if (!res.converged) ++unconverged[w];

      // k largest gamma. Every Sinkhorn iterate keeps gamma strictly increasing
      // in the score, so ranking on the score picks the same set without
      // tripping over gammas that saturate to identical doubles at large
      // lambda. Ties go to the lower index (displacing only on strictly better).
      auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; };
      std::size_t filled = 0;
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t pos;
        if (filled < k) {
          pos = filled++;
        } else if (better(j, top[k - 1])) {
          pos = k - 1;
        } else {
          continue;
        }
        while (pos > 0 && better(j, top[pos - 1])) {
          top[pos] = top[pos - 1];
          --pos;
        }
        top[pos] = static_cast<std::uint32_t>(j);
      }
      std::sort(top.begin(), top.end());
      for (std::size_t c = 0; c < k; ++c) {
        r.candidates[i * k + c] = top[c];
        r.gamma[i * k + c] = gamma[top[c]];
      }
    }
  });
  for (std::size_t u : unconverged) r.unconverged += u;
  return r;
}

SparseCorrespondence::SparseCorrespondence(std::size_t query_height, std::size_t query_width,
                                           std::size_t exemplar_count, std::size_t row_width,
                                           TrackedVector<std::uint32_t> indices,
                                           TrackedVector<float> weights)
    : query_height_(query_height),
      query_width_(query_width),
      exemplar_count_(exemplar_count),
      row_width_(row_width),
      indices_(std::move(indices)),
      weights_(std::move(weights)) {
  const std::size_t expected = query_height_ * query_width_ * row_width_;
  if (row_width_ == 0 || weights_.size() != expected) {
    throw Error(ErrorKind::Shape, "correspondence weight count does not match its rows");
  }
  if (indices_.empty()) {
    if (row_width_ != exemplar_count_) {
      throw Error(ErrorKind::Shape, "index-free correspondence must be fully dense");
    }
  } else {
    if (indices_.size() != expected) {
      throw Error(ErrorKind::Shape, "correspondence index count does not match its rows");
    }
    for (auto e : indices_) {
      if (e >= exemplar_count_) throw Error(ErrorKind::Shape, "correspondence index out of range");
    }
  }
  for (float w : weights_) {
    if (!(w >= 0.0f) || !std::isfinite(w)) {
      throw Error(ErrorKind::NonFinite, "correspondence weights must be finite and nonnegative");
    }
  }
}

SparseCorrespondence block_attention(const BlockPartition& partition, const FeatureGrid& query,
                                     const FeatureGrid& exemplar, const BlockRanking& ranking,
                                     double tau, bool parallel) {
  check_tau(tau);
  if (query.height() != partition.height() || query.width() != partition.width()) {
    throw Error(ErrorKind::Shape, "query grid does not match the partition");
  }
  if (query.channels() != exemplar.channels()) {
    throw Error(ErrorKind::Shape, "query and exemplar channel counts differ");
  }
  const BlockPartition ex_part(exemplar.height(), exemplar.width(), partition.block_side());
  if (ranking.query_blocks != partition.block_count() ||
      ranking.exemplar_blocks != ex_part.block_count()) {
    throw Error(ErrorKind::Shape, "ranking was built over a different partition");
  }

  const std::size_t d = query.channels();
  const std::size_t b = partition.block_size();
  const std::size_t k = ranking.k;
  const std::size_t width = k * b;
  const auto qn = unit_sites(query);
  const auto en = unit_sites(exemplar);

  TrackedVector<std::uint32_t> indices(partition.feature_count() * width);
  TrackedVector<float> weights(partition.feature_count() * width);

  const std::size_t workers = std::min(worker_count(parallel), std::max<std::size_t>(1, partition.block_count()));
  std::vector<TrackedVector<double>> scratch(workers, TrackedVector<double>(width));
  const double inv_tau = 1.0 / tau;

  parallel_for_chunks(partition.block_count(), workers,
                      [&](std::size_t begin, std::size_t end, std::size_t w) {
    auto& logw = scratch[w];
    for (std::size_t i = begin; i < end; ++i) {
      const auto cands = ranking.candidates_of(i);
      const auto gammas = ranking.gamma_of(i);
      for (std::size_t o = 0; o < b; ++o) {
        const std::size_t q = partition.feature_index(i, o);
        const std::span<const double> xq(qn.data() + q * d, d);
        std::uint32_t* row_idx = indices.data() + q * width;
        float* row_w = weights.data() + q * width;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double log_gate = gammas[c] > 0.0 ? std::log(gammas[c])
                                                  : -std::numeric_limits<double>::infinity();
          for (std::size_t eo = 0; eo < b; ++eo) {
            const std::size_t e = ex_part.feature_index(cands[c], eo);
            const std::size_t slot = c * b + eo;
            row_idx[slot] = static_cast<std::uint32_t>(e);
            logw[slot] = log_gate + dot(xq, std::span<const double>(en.data() + e * d, d)) * inv_tau;
            peak = std::max(peak, logw[slot]);
          }
        }
        double total = 0.0;
        if (std::isfinite(peak)) {
          for (std::size_t s = 0; s < width; ++s) {
            logw[s] = std::exp(logw[s] - peak);
            total += logw[s];
          }
        }
        if (!(total > 0.0)) {
          std::fill(logw.begin(), logw.end(), 1.0);
          total = static_cast<double>(width);
        }
        for (std::size_t s = 0; s < width; ++s) row_w[s] = static_cast<float>(logw[s] / total);
      }
    }
  });

  return SparseCorrespondence(partition.height(), partition.width(), ex_part.feature_count(),
                              width, std::move(indices), std::move(weights));
}

FeatureGrid warp(const SparseCorrespondence& corr, const FeatureGrid& exemplar) {
  if (exemplar.sites() != corr.exemplar_count()) {
    throw Error(ErrorKind::Shape, "exemplar has " + std::to_string(exemplar.sites()) +
                                      " features, correspondence expects " +
                                      std::to_string(corr.exemplar_count()));
  }
  const std::size_t d = exemplar.channels();
  std::vector<float> out(corr.query_count() * d);
  std::vector<double> acc(d);
  for (std::size_t q = 0; q < corr.query_count(); ++q) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < corr.row_width(); ++j) {
      const double w = corr.weight(q, j);
      if (w == 0.0) continue;
      auto z = exemplar.site(corr.index(q, j));
      for (std::size_t c = 0; c < d; ++c) acc[c] += w * z[c];
    }
    for (std::size_t c = 0; c < d; ++c) out[q * d + c] = static_cast<float>(acc[c]);
  }
  return FeatureGrid(corr.query_height(), corr.query_width(), d, std::move(out));
}

SparseCorrespondence dense_correspondence_baseline(const FeatureGrid& query,
                                                   const FeatureGrid& exemplar, double tau,
                                                   bool parallel) {
  check_tau(tau);
  if (query.channels() != exemplar.channels()) {
    throw Error(ErrorKind::Shape, "query and exemplar channel counts differ");
  }
  const std::size_t d = query.channels();
  const std::size_t lq = query.sites();
  const std::size_t le = exemplar.sites();
  const auto qn = unit_sites(query);
  const auto en = unit_sites(exemplar);
  TrackedVector<float> weights(lq * le);
  const std::size_t workers = std::min(worker_count(parallel), lq);
  std::vector<TrackedVector<double>> scratch(workers, TrackedVector<double>(le));
  const double inv_tau = 1.0 / tau;

  parallel_for_chunks(lq, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
    auto& logits = scratch[w];
    for (std::size_t q = begin; q < end; ++q) {
      const std::span<const double> xq(qn.data() + q * d, d);
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < le; ++e) {
        logits[e] = dot(xq, std::span<const double>(en.data() + e * d, d)) * inv_tau;
        peak = std::max(peak, logits[e]);
      }
      double total = 0.0;
      for (std::size_t e = 0; e < le; ++e) {
        logits[e] = std::exp(logits[e] - peak);
        total += logits[e];
      }
      float* row = weights.data() + q * le;
      for (std::size_t e = 0; e < le; ++e) row[e] = static_cast<float>(logits[e] / total);
    }
  });
  return SparseCorrespondence(query.height(), query.width(), le, le, {}, std::move(weights));
}

std::size_t entry_count(const SparseCorrespondence& correspondence) {
  return correspondence.entries();
}

void write_correspondence_csv(const SparseCorrespondence& corr,
                              const std::filesystem::path& path) {
  std::string text = "query_index,exemplar_index,weight\n";
  char buf[64];
  for (std::size_t q = 0; q < corr.query_count(); ++q) {
    for (std::size_t j = 0; j < corr.row_width(); ++j) {
      text += std::to_string(q);
      text += ',';
      text += std::to_string(corr.index(q, j));
      text += ',';
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, corr.weight(q, j));
      text.append(buf, end);
      text += '\n';
    }
  }
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Alignment align_ras(const FeatureGrid& query, const FeatureGrid& exemplar,
                    const AlignOptions& options) {
  auto [qpart, qblocks] = partition_blocks(query, options.block_side);
  auto [epart, eblocks] = partition_blocks(exemplar, options.block_side);
  auto ranking = rank_blocks(qblocks, eblocks, options.rank);
  auto corr = block_attention(qpart, query, exemplar, ranking, options.tau, options.rank.parallel);
  return Alignment{qpart, std::move(ranking), std::move(corr)};
}

}  // namespace bilevel
