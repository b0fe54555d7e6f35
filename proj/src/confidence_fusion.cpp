#include "bilevel/confidence_fusion.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace bilevel {
namespace {

// c == 0 and c == 1 return the inputs untouched (signed zeros included).
float blend(float x, float w, float c) {
  if (c == 0.0f) return x;
  if (c == 1.0f) return w;
  const double cd = c;
  return static_cast<float>(static_cast<double>(x) * (1.0 - cd) + static_cast<double>(w) * cd);
}

std::size_t block_side_for(const FeatureGrid& grid, const FeatureGrid& map) {
  if (grid.height() % map.height() != 0 || grid.width() % map.width() != 0) {
    throw Error(ErrorKind::Shape, "confidence map does not tile the feature grid");
  }
  const std::size_t sy = grid.height() / map.height();
  const std::size_t sx = grid.width() / map.width();
  if (sy != sx) throw Error(ErrorKind::Shape, "confidence map blocks must be square");
  return sy;
}

void check_range(const FeatureGrid& map) {
  for (float v : map.data()) {
    if (v < 0.0f || v > 1.0f) throw Error(ErrorKind::Shape, "confidence values must lie in [0, 1]");
  }
}

template <class ChannelPick>
FeatureGrid fuse_impl(const FeatureGrid& x, const FeatureGrid& w, const FeatureGrid& map,
                      ChannelPick pick) {
  if (!x.same_shape(w)) throw Error(ErrorKind::Shape, "conditional and warped shapes differ");
  const std::size_t side = block_side_for(x, map);
  check_range(map);
  const std::size_t d = x.channels();
  std::vector<float> out(x.data().size());
  for (std::size_t y = 0; y < x.height(); ++y) {
    for (std::size_t xx = 0; xx < x.width(); ++xx) {
      const auto conf = map.site(y / side, xx / side);
      const std::size_t base = (y * x.width() + xx) * d;
      for (std::size_t c = 0; c < d; ++c) {
        out[base + c] = blend(x.data()[base + c], w.data()[base + c], conf[pick(c)]);
      }
    }
  }
  return FeatureGrid(x.height(), x.width(), d, std::move(out));
}

}  // namespace

FeatureGrid confidence_map(const BlockRanking& ranking, const BlockPartition& partition) {
  if (ranking.query_blocks != partition.block_count()) {
    throw Error(ErrorKind::Shape, "ranking was built over a different partition");
  }
  std::vector<float> values(partition.block_count());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<float>(std::clamp(ranking.peak_scores[i], 0.0, 1.0));
  }
  return FeatureGrid(partition.blocks_h(), partition.blocks_w(), 1, std::move(values));
}

FeatureGrid fuse(const FeatureGrid& conditional, const FeatureGrid& warped,
                 const FeatureGrid& cmap) {
  if (cmap.channels() != 1) throw Error(ErrorKind::Shape, "confidence map must have one channel");
  return fuse_impl(conditional, warped, cmap, [](std::size_t) { return std::size_t{0}; });
}

FeatureGrid fuse_multichannel(const FeatureGrid& conditional, const FeatureGrid& warped,
                              const FeatureGrid& mmap) {
  if (mmap.channels() != conditional.channels()) {
    throw Error(ErrorKind::Shape, "multi-channel map has " + std::to_string(mmap.channels()) +
                                      " channels, features have " +
                                      std::to_string(conditional.channels()));
  }
  return fuse_impl(conditional, warped, mmap, [](std::size_t c) { return c; });
}

}  // namespace bilevel
