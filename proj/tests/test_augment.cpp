#include <catch_amalgamated.hpp>

#include <cmath>

#include "fundus/augment.hpp"
#include "fundus/errors.hpp"
#include "fundus/synth.hpp"
#include "support.hpp"

using namespace fundus;
using Catch::Matchers::WithinAbs;

namespace {

struct Moments {
  double mean = 0, var = 0;
};

Moments moments(const Tensor& t) {
  double m = 0;
  for (float v : t.data()) m += v;
  m /= static_cast<double>(t.size());
  double s = 0;
  for (float v : t.data()) s += (v - m) * (v - m);
  return {m, s / static_cast<double>(t.size())};
}

}  // namespace

TEST_CASE("noise statistics") {
  augment::AugmentConfig cfg;
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    double drawn = 0;
    const Tensor n = augment::noise_field({3, 128, 128}, cfg, rng, &drawn);
    const auto mo = moments(n);
    CHECK_THAT(mo.mean, WithinAbs(0.01, 0.002));
    CHECK(mo.var >= 0.01 * 0.97);
    CHECK(mo.var <= 0.05 * 1.03);
    CHECK(drawn >= 0.01);
    CHECK(drawn <= 0.05);
    CHECK_THAT(mo.var, WithinAbs(drawn, 0.03 * drawn));
  }

  cfg.noise_var_max = 0.01;
  const auto flat = moments(augment::noise_field({3, 128, 128}, cfg, rng));
  CHECK_THAT(flat.var, WithinAbs(0.01, 0.001));

  // Clamped output of a zero image stays in [0, 1].
  const Tensor img = augment::gaussian_noise(Tensor({3, 16, 16}), augment::AugmentConfig{}, rng);
  for (float v : img.data()) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("noise is reproducible per seed") {
  const Tensor img({3, 16, 16}, 0.5f);
  augment::AugmentConfig cfg;
  std::mt19937_64 a(7), b(7), c(8);
  const Tensor x = augment::gaussian_noise(img, cfg, a);
  CHECK(x == augment::gaussian_noise(img, cfg, b));
  CHECK_FALSE(x == augment::gaussian_noise(img, cfg, c));
}

TEST_CASE("augment config validation") {
  augment::AugmentConfig cfg;
  cfg.noise_var_min = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.noise_var_min = 0.06;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.rotation_limit_deg = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("rotation examples") {
  synth::SynthParams p;
  auto rng = synth::sample_rng(3, 0);
  Sample s = synth::generate_sample(p, 0, rng);

  const Sample same = augment::rotate_sample(s, 0.0);
  CHECK(max_abs_diff(same.image, s.image) <= 1e-6);
  CHECK(same.disc_mask == s.disc_mask);
  CHECK(same.fovea_x == s.fovea_x);
  CHECK(same.fovea_y == s.fovea_y);

  const auto q = augment::rotate_point(0.75, 0.5, 90.0);
  CHECK_THAT(q[0], WithinAbs(0.5, 1e-12));
  CHECK_THAT(q[1], WithinAbs(0.75, 1e-12));

  // The pixel grid turns the same way as the coordinates.
  Sample dot = s;
  dot.image = Tensor({3, 16, 16});
  dot.disc_mask = Tensor({16, 16});
  for (int c = 0; c < 3; ++c) dot.image[c * 256 + 8 * 16 + 12] = 1.0f;  // x = 12.5 / 16, y = 8.5 / 16
  dot.fovea_x = 12.5 / 16;
  dot.fovea_y = 8.5 / 16;
  const Sample turned = augment::rotate_sample(dot, 90.0);
  CHECK_THAT(turned.fovea_x, WithinAbs(7.5 / 16, 1e-12));
  CHECK_THAT(turned.fovea_y, WithinAbs(12.5 / 16, 1e-12));
  CHECK_THAT(turned.image[12 * 16 + 7], WithinAbs(1.0, 1e-6));

  // Leaving the unit square invalidates the fovea.
  Sample corner = s;
  corner.fovea_x = 0.95;
  corner.fovea_y = 0.95;
  CHECK_FALSE(augment::rotate_sample(corner, 30.0).fovea_valid);
  CHECK(augment::rotate_sample(s, 30.0).fovea_valid);
}

TEST_CASE("rotation preserves a centered disc area") {
  Sample s;
  s.image = Tensor({3, 64, 64});
  s.disc_mask = Tensor({64, 64});
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      if (std::hypot(i + 0.5 - 32, j + 0.5 - 32) <= 12) s.disc_mask[i * 64 + j] = 1.0f;
  auto area = [](const Tensor& m) {
    double a = 0;
    for (float v : m.data()) a += v;
    return a;
  };
  const double before = area(s.disc_mask);
  for (double deg = -30; deg <= 30; deg += 2.5) {
    const double after = area(augment::rotate_sample(s, deg).disc_mask);
    CHECK(std::abs(after - before) < 0.05 * before);
  }
}

TEST_CASE("random rotation draws within the limit and relocates the fovea marker") {
  synth::SynthParams p;
  augment::AugmentConfig cfg;
  std::mt19937_64 rng(11);
  double worst = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    auto srng = synth::sample_rng(4, i);
    const Sample s = synth::generate_sample(p, static_cast<int>(i % 2), srng);
    double angle = 0;
    const Sample r = augment::random_rotation(s, cfg, rng, &angle);
    CHECK(std::abs(angle) <= 30.0);
    const auto want = augment::rotate_point(s.fovea_x, s.fovea_y, angle);
    CHECK(r.fovea_x == want[0]);
    CHECK(r.fovea_y == want[1]);
    const auto found = testing::locate_fovea(r.image, want[0], want[1], 6.0);
    worst = std::max(worst, std::hypot(found[0] - want[0], found[1] - want[1]) * p.size);
  }
  INFO("worst marker offset " << worst << " px");
  CHECK(worst <= 1.5);
}

TEST_CASE("input pyramid") {
  const auto big = augment::make_pyramid(Tensor({3, 512, 512}));
  CHECK(big[0].shape() == Shape{3, 512, 512});
  CHECK(big[1].shape() == Shape{3, 256, 256});
  CHECK(big[2].shape() == Shape{3, 128, 128});

  const auto flat = augment::make_pyramid(Tensor({2, 3, 32, 32}, 0.4f));
  for (const auto& level : flat)
    for (float v : level.data()) CHECK_THAT(v, WithinAbs(0.4, 1e-7));

  Tensor board({1, 64, 64});
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j) board[i * 64 + j] = static_cast<float>((i + j) % 2);
  const auto pyr = augment::make_pyramid(board);
  const double m0 = moments(pyr[0]).mean;
  for (int k = 0; k < 3; ++k) {
    CHECK(pyr[k].size() * (std::size_t(1) << (2 * k)) == pyr[0].size());
    CHECK_THAT(moments(pyr[k]).mean, WithinAbs(m0, 1e-3));
  }
  const Tensor x = testing::random_tensor({3, 16, 16}, 2);
  CHECK(augment::make_pyramid(x)[0] == x);
  CHECK_THROWS_AS(augment::make_pyramid(Tensor({3, 18, 18})), DimensionError);
}
