#pragma once

#include <filesystem>

#include "fundus/tensor.hpp"

namespace fundus::png {

/// 3 x H x W tensor in [0, 1] -> 8-bit RGB PNG (values rounded, clamped).
void write_rgb(const std::filesystem::path& path, const Tensor& image);
/// H x W tensor in {0, 1} -> 8-bit gray PNG with 0/255.
void write_mask(const std::filesystem::path& path, const Tensor& mask);

Tensor read_rgb(const std::filesystem::path& path);
/// Throws ParseError if any pixel is not 0 or 255.
Tensor read_mask(const std::filesystem::path& path);

}  // namespace fundus::png
