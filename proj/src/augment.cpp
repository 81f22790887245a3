#include "fundus/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fundus/errors.hpp"
#include "fundus/ops.hpp"

namespace fundus::augment {

void AugmentConfig::validate() const {
  if (!(noise_var_min > 0.0 && noise_var_min <= noise_var_max)) {
    throw ConfigError("augment: noise variance range must satisfy 0 < min <= max");
  }
  if (rotation_limit_deg < 0.0) throw ConfigError("augment: rotation limit must be >= 0");
}

Tensor noise_field(const Shape& shape, const AugmentConfig& cfg, std::mt19937_64& rng, double* variance_out) {
  cfg.validate();
  const double var = cfg.noise_var_min == cfg.noise_var_max
                         ? cfg.noise_var_min
                         : std::uniform_real_distribution<double>(cfg.noise_var_min, cfg.noise_var_max)(rng);
  if (variance_out) *variance_out = var;
  std::normal_distribution<double> dist(cfg.noise_mean, std::sqrt(var));
  Tensor field(shape);
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = static_cast<float>(dist(rng));
  return field;
}

Tensor gaussian_noise(const Tensor& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  Tensor out = add(image, noise_field(image.shape(), cfg, rng));
  for (float& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

std::array<double, 2> rotate_point(double x, double y, double degrees) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  return {0.5 + c * (x - 0.5) - s * (y - 0.5), 0.5 + s * (x - 0.5) + c * (y - 0.5)};
}

Sample rotate_sample(const Sample& sample, double degrees) {
  const Tensor& img = sample.image;
  if (img.rank() != 3) throw DimensionError("rotate_sample: image must be C x H x W");
  const int ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double t = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  const double cx = w / 2.0, cy = h / 2.0;

  Sample out = sample;
  out.image = Tensor(img.shape());
  const bool has_mask = !sample.disc_mask.empty();
  if (has_mask) out.disc_mask = Tensor(sample.disc_mask.shape());
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  auto at = [&](int cc, int y, int x) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
    return img[cc * plane + static_cast<std::size_t>(y) * w + x];
  };

  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      // Inverse map of the output pixel center, in source pixel-index space.
      const double ox = j + 0.5 - cx, oy = i + 0.5 - cy;
      const double sx = cx + c * ox + s * oy - 0.5;
      const double sy = cy - s * ox + c * oy - 0.5;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const std::size_t dst = static_cast<std::size_t>(i) * w + j;
      for (int cc = 0; cc < ch; ++cc) {
        const double top = (1 - fx) * at(cc, y0, x0) + fx * at(cc, y0, x0 + 1);
        const double bot = (1 - fx) * at(cc, y0 + 1, x0) + fx * at(cc, y0 + 1, x0 + 1);
        out.image[cc * plane + dst] = static_cast<float>((1 - fy) * top + fy * bot);
      }
      if (has_mask) {
        const int nx = static_cast<int>(std::lround(sx)), ny = static_cast<int>(std::lround(sy));
        out.disc_mask[dst] =
            (nx >= 0 && ny >= 0 && nx < w && ny < h) ? sample.disc_mask[static_cast<std::size_t>(ny) * w + nx] : 0.0f;
      }
    }
  }

  const auto p = rotate_point(sample.fovea_x, sample.fovea_y, degrees);
  out.fovea_x = p[0];
  out.fovea_y = p[1];
  if (p[0] < 0.0 || p[0] > 1.0 || p[1] < 0.0 || p[1] > 1.0) out.fovea_valid = false;
  return out;
}

Sample random_rotation(const Sample& sample, const AugmentConfig& cfg, std::mt19937_64& rng, double* angle_out) {
  cfg.validate();
  const double lim = cfg.rotation_limit_deg;
  const double angle = lim > 0 ? std::uniform_real_distribution<double>(-lim, lim)(rng) : 0.0;
  if (angle_out) *angle_out = angle;
  return rotate_sample(sample, angle);
}

std::array<Tensor, 3> make_pyramid(const Tensor& image) {
  const bool batched = image.rank() == 4;
  if (!batched && image.rank() != 3) throw DimensionError("make_pyramid: expected C x s x s or N x C x s x s");
  const Tensor x = batched ? image : image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  const int s = x.dim(2);
  if (x.dim(3) != s) throw DimensionError("make_pyramid: image must be square, got " + shape_str(image.shape()));
  if (s % 4 != 0) throw DimensionError("make_pyramid: side " + std::to_string(s) + " not divisible by 4");
  Tensor half = ops::bilinear_resize(x, s / 2, s / 2);
  Tensor quarter = ops::bilinear_resize(half, s / 4, s / 4);
  if (batched) return {image, std::move(half), std::move(quarter)};
  const int c = image.dim(0);
  return {image, half.reshaped({c, s / 2, s / 2}), quarter.reshaped({c, s / 4, s / 4})};
}

}  // namespace fundus::augment
