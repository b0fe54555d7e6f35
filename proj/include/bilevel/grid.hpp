#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bilevel {

enum class ErrorKind {
  Io,
  BadMagic,
  BadDtype,
  Truncated,
  TrailingBytes,
  NonFinite,
  Shape,
  InvalidArgument,
};

const char* to_string(ErrorKind kind);

/// Every failure raised by the library carries one of the kinds above so the
/// CLI can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Dense H x W x d grid of 32-bit floats in row-major (y, x, channel) order.
/// Immutable once built; construction rejects bad lengths and non-finite data.
class FeatureGrid {
 public:
  FeatureGrid(std::size_t height, std::size_t width, std::size_t channels,
              std::vector<float> data);

  /// All-zero grid.
  static FeatureGrid zeros(std::size_t height, std::size_t width,
                           std::size_t channels);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t sites() const noexcept { return height_ * width_; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<const float> site(std::size_t index) const noexcept {
    return {data_.data() + index * channels_, channels_};
  }
  std::span<const float> site(std::size_t y, std::size_t x) const noexcept {
    return site(y * width_ + x);
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return data_[(y * width_ + x) * channels_ + c];
  }

  bool same_shape(const FeatureGrid& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t channels_;
  std::vector<float> data_;
};

/// H x W grid of region labels. Values need not be contiguous.
class LabelMask {
 public:
  LabelMask(std::size_t height, std::size_t width,
            std::vector<std::uint32_t> labels);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::span<const std::uint32_t> labels() const noexcept { return labels_; }
  std::uint32_t at(std::size_t y, std::size_t x) const noexcept {
    return labels_[y * width_ + x];
  }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::vector<std::uint32_t> labels_;
};

inline constexpr double kNormEpsilon = 1e-8;

/// Scales every site vector to unit L2 norm. Sites whose norm is below
/// `epsilon` come back as zero vectors.
FeatureGrid l2_normalize_features(const FeatureGrid& grid,
                                  double epsilon = kNormEpsilon);

/// First `channels` channels of every site.
FeatureGrid slice_channels(const FeatureGrid& grid, std::size_t channels);

}  // namespace bilevel
