#pragma once

#include <cstddef>

#include "bilevel/grid.hpp"

namespace bilevel {

// Position channels are H x W x 2 feature grids: channel 0 is the horizontal
// coordinate, channel 1 the vertical one, both in [-1, 1].

/// One coordinate frame for the whole image: -1 at the left/top edge, +1 at
/// the right/bottom edge. A length-1 axis maps to 0.
FeatureGrid vanilla_pe(std::size_t height, std::size_t width);

/// One coordinate frame per label. The origin is the center of the label's
/// bounding box and each axis is scaled by the box half-extent, so the box
/// edges land on -1 and +1. Labels shared by disconnected pieces form a single
/// region.
FeatureGrid semantic_pe(const LabelMask& mask);

/// Concatenates `channels` (scaled by `weight`) after the grid's own channels.
FeatureGrid append_position(const FeatureGrid& grid, const FeatureGrid& channels,
                            float weight = 1.0f);

}  // namespace bilevel
