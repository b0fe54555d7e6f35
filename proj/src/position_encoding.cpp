#include "bilevel/position_encoding.hpp"

#include <algorithm>
#include <map>
#include <vector>

namespace bilevel {
namespace {

// Maps pos in [lo, hi] onto [-1, 1]. Integer numerator and denominator keep the
// result independent of where the interval sits.
float normalized_offset(std::size_t pos, std::size_t lo, std::size_t hi) {
  if (hi == lo) return 0.0f;
  const double num = 2.0 * static_cast<double>(pos) - static_cast<double>(lo) -
                     static_cast<double>(hi);
  return static_cast<float>(num / static_cast<double>(hi - lo));
}

struct Box {
  std::size_t y0, y1, x0, x1;
};

}  // namespace

FeatureGrid vanilla_pe(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw Error(ErrorKind::Shape, "empty grid");
  std::vector<float> out(height * width * 2);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      out[(y * width + x) * 2] = normalized_offset(x, 0, width - 1);
      out[(y * width + x) * 2 + 1] = normalized_offset(y, 0, height - 1);
    }
  }
  return FeatureGrid(height, width, 2, std::move(out));
}

FeatureGrid semantic_pe(const LabelMask& mask) {
  const std::size_t h = mask.height();
  const std::size_t w = mask.width();
  std::map<std::uint32_t, Box> boxes;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      auto [it, fresh] = boxes.try_emplace(mask.at(y, x), Box{y, y, x, x});
      if (!fresh) {
        Box& b = it->second;
        b.y0 = std::min(b.y0, y);
        b.y1 = std::max(b.y1, y);
        b.x0 = std::min(b.x0, x);
        b.x1 = std::max(b.x1, x);
      }
    }
  }
  std::vector<float> out(h * w * 2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Box& b = boxes.at(mask.at(y, x));
      out[(y * w + x) * 2] = normalized_offset(x, b.x0, b.x1);
      out[(y * w + x) * 2 + 1] = normalized_offset(y, b.y0, b.y1);
    }
  }
  return FeatureGrid(h, w, 2, std::move(out));
}

FeatureGrid append_position(const FeatureGrid& grid, const FeatureGrid& channels, float weight) {
  if (grid.height() != channels.height() || grid.width() != channels.width()) {
    throw Error(ErrorKind::Shape, "position channels do not match the feature grid");
  }
  const std::size_t d = grid.channels();
  const std::size_t p = channels.channels();
  std::vector<float> out;
  out.reserve(grid.sites() * (d + p));
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    auto v = grid.site(s);
    out.insert(out.end(), v.begin(), v.end());
    for (float c : channels.site(s)) out.push_back(c * weight);
  }
  return FeatureGrid(grid.height(), grid.width(), d + p, std::move(out));
}

}  // namespace bilevel
