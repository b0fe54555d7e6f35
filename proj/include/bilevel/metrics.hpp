#pragma once

#include "bilevel/grid.hpp"
#include "bilevel/ras_correspondence.hpp"

namespace bilevel {

/// Mean absolute difference between T^T (T Z) and Z. T^T reuses the stored
/// links transposed, each exemplar row renormalized to sum to one; an exemplar
/// feature no query links to reconstructs as zero.
double cycle_loss(const SparseCorrespondence& correspondence, const FeatureGrid& exemplar);

/// Mean absolute difference of two equally shaped grids.
double consistency_loss(const FeatureGrid& a, const FeatureGrid& b);

}  // namespace bilevel
