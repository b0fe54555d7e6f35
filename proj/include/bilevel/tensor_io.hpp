#pragma once

#include <cstdint>
#include <filesystem>
#include <variant>
#include <vector>

#include "bilevel/grid.hpp"

namespace bilevel {

// FTN1 layout, all integers little-endian:
//   "FTN1" | dtype u8 (1 = f32, 2 = u32) | ndim u8 | ndim x u32 dims | payload
// Feature grids are stored with ndim 3 (H, W, d), masks with ndim 2 (H, W).

enum class Dtype : std::uint8_t { Float32 = 1, UInt32 = 2 };

using Tensor = std::variant<FeatureGrid, LabelMask>;

std::vector<std::uint8_t> encode_tensor(const FeatureGrid& grid);
std::vector<std::uint8_t> encode_tensor(const LabelMask& mask);

/// Parses an in-memory FTN1 image. A float tensor with ndim 2 is read as a
/// single-channel grid; a u32 tensor with ndim 3 must have a trailing 1.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

Tensor read_tensor(const std::filesystem::path& path);
FeatureGrid read_feature_grid(const std::filesystem::path& path);
LabelMask read_label_mask(const std::filesystem::path& path);

void write_tensor(const FeatureGrid& grid, const std::filesystem::path& path);
void write_tensor(const LabelMask& mask, const std::filesystem::path& path);

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes);

}  // namespace bilevel
