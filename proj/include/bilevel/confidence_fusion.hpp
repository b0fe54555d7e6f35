#pragma once

#include "bilevel/grid.hpp"
#include "bilevel/ras_correspondence.hpp"

namespace bilevel {

/// Block-grid confidence: blocks_h x blocks_w x 1, the peak cosine between
/// each query block and any exemplar block, clamped to [0, 1].
FeatureGrid confidence_map(const BlockRanking& ranking, const BlockPartition& partition);

/// F = X * (1 - c) + warped * c, with c taken from the block covering each site.
/// `cmap` must be (H / s) x (W / s) x 1 for some block side s.
FeatureGrid fuse(const FeatureGrid& conditional, const FeatureGrid& warped,
                 const FeatureGrid& cmap);

/// Per-channel variant: `mmap` is (H / s) x (W / s) x d.
FeatureGrid fuse_multichannel(const FeatureGrid& conditional, const FeatureGrid& warped,
                              const FeatureGrid& mmap);

}  // namespace bilevel
