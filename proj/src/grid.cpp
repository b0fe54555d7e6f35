#include "bilevel/grid.hpp"

#include <cmath>

namespace bilevel {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::BadDtype: return "bad-dtype";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::TrailingBytes: return "trailing-bytes";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::InvalidArgument: return "invalid-argument";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

FeatureGrid::FeatureGrid(std::size_t height, std::size_t width,
                         std::size_t channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height_ == 0 || width_ == 0 || channels_ == 0) {
    throw Error(ErrorKind::Shape, "feature grid dimensions must be positive");
  }
  if (data_.size() != height_ * width_ * channels_) {
    throw Error(ErrorKind::Shape,
                "feature grid data length " + std::to_string(data_.size()) +
                    " does not match " + std::to_string(height_) + "x" +
                    std::to_string(width_) + "x" + std::to_string(channels_));
  }
  for (float v : data_) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::NonFinite, "feature grid contains NaN or Inf");
    }
  }
}

FeatureGrid FeatureGrid::zeros(std::size_t height, std::size_t width,
                               std::size_t channels) {
  return FeatureGrid(height, width, channels,
                     std::vector<float>(height * width * channels, 0.0f));
}

LabelMask::LabelMask(std::size_t height, std::size_t width,
                     std::vector<std::uint32_t> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  if (height_ == 0 || width_ == 0) {
    throw Error(ErrorKind::Shape, "label mask dimensions must be positive");
  }
  if (labels_.size() != height_ * width_) {
    throw Error(ErrorKind::Shape, "label mask length does not match its dimensions");
  }
}

FeatureGrid l2_normalize_features(const FeatureGrid& grid, double epsilon) {
  if (!(epsilon > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "epsilon must be positive");
  }
  const std::size_t d = grid.channels();
  std::vector<float> out(grid.data().size());
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    auto v = grid.site(s);
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm < epsilon) continue;  // zero in, zero out
    const double inv = 1.0 / norm;
    for (std::size_t c = 0; c < d; ++c) {
      out[s * d + c] = static_cast<float>(v[c] * inv);
    }
  }
  return FeatureGrid(grid.height(), grid.width(), d, std::move(out));
}

FeatureGrid slice_channels(const FeatureGrid& grid, std::size_t channels) {
  if (channels == 0 || channels > grid.channels()) {
    throw Error(ErrorKind::Shape, "channel slice out of range");
  }
  std::vector<float> out;
  out.reserve(grid.sites() * channels);
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    auto v = grid.site(s);
    out.insert(out.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(channels));
  }
  return FeatureGrid(grid.height(), grid.width(), channels, std::move(out));
}

}  // namespace bilevel
