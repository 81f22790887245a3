#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace testing {

inline fundus::Tensor random_tensor(const fundus::Shape& shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  fundus::Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

inline fundus::Tensor random_tensor(const fundus::Shape& shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return random_tensor(shape, rng, sd);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

/// Max elementwise |a - b| / max(1, |b|).
inline double max_rel_diff(const fundus::Tensor& a, const fundus::Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(double(a[i]) - b[i]) / std::max(1.0, std::abs(double(b[i]))));
  }
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fundus_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Six-nested-loop cross-correlation.
inline fundus::Tensor naive_conv(const fundus::Tensor& x, const fundus::Tensor& k, const fundus::Tensor& bias, int stride,
                                 int pad, int dil) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  const int ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  fundus::Tensor y({n, co, oh, ow});
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < ci; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                const int yy = i * stride - pad + u * dil, xx = j * stride - pad + v * dil;
                if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
                acc += double(x.at(b, c, yy, xx)) * k.at(o, c, u, v);
              }
          y.at(b, o, i, j) = static_cast<float>(acc);
        }
  return y;
}

/// Luminance of a 3 x s x s image blurred with a Gaussian of `sigma` pixels.
inline std::vector<double> smoothed_luminance(const fundus::Tensor& image, double sigma = 1.5) {
  const int s = image.dim(1);
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  std::vector<double> lum(plane), tmp(plane, 0.0), out(plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) lum[i] = (image[i] + image[plane + i] + image[2 * plane + i]) / 3.0;
  const int rad = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * rad + 1);
  for (int d = -rad; d <= rad; ++d) k[d + rad] = std::exp(-d * d / (2 * sigma * sigma));
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      double acc = 0, wsum = 0;
      for (int d = -rad; d <= rad; ++d)
        if (j + d >= 0 && j + d < s) acc += k[d + rad] * lum[i * s + j + d], wsum += k[d + rad];
      tmp[i * s + j] = acc / wsum;
    }
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      double acc = 0, wsum = 0;
      for (int d = -rad; d <= rad; ++d)
        if (i + d >= 0 && i + d < s) acc += k[d + rad] * tmp[(i + d) * s + j], wsum += k[d + rad];
      out[i * s + j] = acc / wsum;
    }
  return out;
}

/// Darkest point of the smoothed luminance within `radius_px` of the normalized
/// point (gx, gy), refined by a parabola through the neighbours on each axis.
/// Returns normalized coordinates.
inline std::array<double, 2> locate_fovea(const fundus::Tensor& image, double gx, double gy, double radius_px) {
  const int s = image.dim(1);
  const auto lum = smoothed_luminance(image);
  int bi = -1, bj = -1;
  double best = 1e300;
  for (int i = 1; i < s - 1; ++i)
    for (int j = 1; j < s - 1; ++j) {
      if (std::hypot(j + 0.5 - gx * s, i + 0.5 - gy * s) > radius_px) continue;
      if (lum[i * s + j] < best) best = lum[i * s + j], bi = i, bj = j;
    }
  if (bi < 0) return {-1.0, -1.0};
  auto refine = [](double a, double b, double c) {
    const double den = a - 2 * b + c;
    return den > 0 ? std::clamp(0.5 * (a - c) / den, -0.5, 0.5) : 0.0;
  };
  const double ox = refine(lum[bi * s + bj - 1], lum[bi * s + bj], lum[bi * s + bj + 1]);
  const double oy = refine(lum[(bi - 1) * s + bj], lum[bi * s + bj], lum[(bi + 1) * s + bj]);
  return {(bj + 0.5 + ox) / s, (bi + 0.5 + oy) / s};
}

}  // namespace testing
