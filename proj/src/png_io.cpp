#include "fundus/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "fundus/errors.hpp"

namespace fundus::png {
namespace {

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

void write(const std::filesystem::path& path, int width, int height, png_uint_32 format,
           const std::vector<std::uint8_t>& pixels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
    throw IoError(path.string() + ": cannot write PNG (" + img.message + ")");
  }
}

std::vector<std::uint8_t> read(const std::filesystem::path& path, png_uint_32 format, int& width, int& height) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw ParseError(path.string() + ": cannot read PNG (" + img.message + ")");
  }
  img.format = format;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ParseError(path.string() + ": corrupt PNG (" + img.message + ")");
  }
  width = static_cast<int>(img.width);
  height = static_cast<int>(img.height);
  return pixels;
}

}  // namespace

void write_rgb(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("write_rgb: expected 3 x H x W, got " + shape_str(image.shape()));
  }
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> px(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) px[i * 3 + c] = quantize(image[c * plane + i]);
  write(path, w, h, PNG_FORMAT_RGB, px);
}

void write_mask(const std::filesystem::path& path, const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("write_mask: expected H x W, got " + shape_str(mask.shape()));
  std::vector<std::uint8_t> px(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) px[i] = mask[i] != 0.0f ? 255 : 0;
  write(path, mask.dim(1), mask.dim(0), PNG_FORMAT_GRAY, px);
}

Tensor read_rgb(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto px = read(path, PNG_FORMAT_RGB, w, h);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor t({3, h, w});
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) t[c * plane + i] = px[i * 3 + c] / 255.0f;
  return t;
}

Tensor read_mask(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto px = read(path, PNG_FORMAT_GRAY, w, h);
  Tensor t({h, w});
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (px[i] != 0 && px[i] != 255) {
      throw ParseError(path.string() + ": mask pixel " + std::to_string(i) + " has value " + std::to_string(px[i]) +
                       " (expected 0 or 255)");
    }
    t[i] = px[i] ? 1.0f : 0.0f;
  }
  return t;
}

}  // namespace fundus::png
