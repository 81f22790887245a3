#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "fundus/synth.hpp"
#include "fundus/tensor.hpp"

namespace fundus::augment {

struct AugmentConfig {
  double noise_mean = 0.01;
  double noise_var_min = 0.01;  // sigma^2 is drawn uniformly per image
  double noise_var_max = 0.05;
  double rotation_limit_deg = 30.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Unclamped additive noise field: sigma^2 ~ U[noise_var_min, noise_var_max]
/// once, then i.i.d. normal(noise_mean, sigma) per element. Reports the drawn
/// variance through `variance_out`.
Tensor noise_field(const Shape& shape, const AugmentConfig& cfg, std::mt19937_64& rng,
                   double* variance_out = nullptr);

/// image + noise_field, clamped to [0, 1].
Tensor gaussian_noise(const Tensor& image, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Rotates image (bilinear), mask (nearest) and fovea about the image center
/// by `degrees` (positive turns +x towards +y in image coordinates).
/// Pixels sampled from outside the image are 0. A fovea leaving [0, 1]^2
/// clears Sample::fovea_valid.
Sample rotate_sample(const Sample& sample, double degrees);

/// rotate_sample with an angle drawn from U[-limit, +limit].
Sample random_rotation(const Sample& sample, const AugmentConfig& cfg, std::mt19937_64& rng,
                       double* angle_out = nullptr);

/// Maps a normalized point through the rotation used by rotate_sample.
std::array<double, 2> rotate_point(double x, double y, double degrees);

/// (s, s/2, s/4) bilinear pyramid of a C x s x s or N x C x s x s image.
std::array<Tensor, 3> make_pyramid(const Tensor& image);

}  // namespace fundus::augment
