#include "bilevel/metrics.hpp"

#include <cmath>
#include <vector>

namespace bilevel {

double cycle_loss(const SparseCorrespondence& corr, const FeatureGrid& exemplar) {
  const FeatureGrid warped = warp(corr, exemplar);
  const std::size_t d = exemplar.channels();
  const std::size_t le = exemplar.sites();

  // Scatter pass: column mass and unnormalized T^T (T Z) per exemplar feature.
  std::vector<double> mass(le, 0.0);
  std::vector<double> back(le * d, 0.0);
  for (std::size_t q = 0; q < corr.query_count(); ++q) {
    auto wq = warped.site(q);
    for (std::size_t j = 0; j < corr.row_width(); ++j) {
      const double w = corr.weight(q, j);
      if (w == 0.0) continue;
      const std::size_t e = corr.index(q, j);
      mass[e] += w;
      for (std::size_t c = 0; c < d; ++c) back[e * d + c] += w * wq[c];
    }
  }

  double total = 0.0;
  for (std::size_t e = 0; e < le; ++e) {
    auto z = exemplar.site(e);
    const double inv = mass[e] > 0.0 ? 1.0 / mass[e] : 0.0;
    for (std::size_t c = 0; c < d; ++c) total += std::abs(back[e * d + c] * inv - z[c]);
  }
  return total / static_cast<double>(le * d);
}

double consistency_loss(const FeatureGrid& a, const FeatureGrid& b) {
  if (!a.same_shape(b)) throw Error(ErrorKind::Shape, "consistency loss needs equal shapes");
  double total = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    total += std::abs(static_cast<double>(da[i]) - static_cast<double>(db[i]));
  }
  return total / static_cast<double>(da.size());
}

}  // namespace bilevel
