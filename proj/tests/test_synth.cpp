#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fundus/errors.hpp"
#include "fundus/png_io.hpp"
#include "fundus/synth.hpp"
#include "support.hpp"

using namespace fundus;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

}  // namespace

TEST_CASE("synthetic sample geometry") {
  synth::SynthParams p;
  p.size = 64;
  for (std::size_t i = 0; i < 40; ++i) {
    auto rng = synth::sample_rng(5, i);
    synth::SampleGeometry geo;
    const Sample s = synth::generate_sample(p, static_cast<int>(i % 2), rng, &geo);
    INFO("sample " << i);
    REQUIRE(s.image.shape() == Shape{3, 64, 64});
    for (float v : s.image.data()) REQUIRE((v >= 0.0f && v <= 1.0f));

    double area = 0;
    for (float v : s.disc_mask.data()) {
      REQUIRE((v == 0.0f || v == 1.0f));
      area += v;
    }
    const double expected = std::numbers::pi * std::pow(geo.disc_radius * 64, 2);
    CHECK(area > 0.85 * expected);
    CHECK(area < 1.15 * expected);

    CHECK(std::hypot(s.fovea_x - 0.5, s.fovea_y - 0.5) < synth::kFieldRadius);
    const int fi = static_cast<int>(s.fovea_y * 64), fj = static_cast<int>(s.fovea_x * 64);
    CHECK(s.disc_mask[fi * 64 + fj] == 0.0f);

    const auto found = testing::locate_fovea(s.image, s.fovea_x, s.fovea_y, 6.0);
    CHECK(std::hypot(found[0] - s.fovea_x, found[1] - s.fovea_y) * 64 <= 2.0);

    if (s.label == 0) {
      CHECK(geo.lesions == 0);
      CHECK_FALSE(geo.crescent);
    } else {
      CHECK(geo.lesions >= p.lesion_min);
      CHECK(geo.lesions <= p.lesion_max);
    }
  }
}

TEST_CASE("synthetic params validation") {
  synth::SynthParams p;
  p.disc_radius_min = 0.09;
  p.disc_radius_max = 0.08;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.lesion_min = 3;
  p.lesion_max = 2;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.size = 8;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  auto rng = synth::sample_rng(1, 0);
  CHECK_THROWS_AS(synth::generate_sample({}, 2, rng), ArgumentError);
}

TEST_CASE("png round trip") {
  const auto dir = testing::scratch_dir("png");
  const Tensor img = testing::random_tensor({3, 5, 7}, 1, 0.3);
  png::write_rgb(dir / "a.png", img);
  const Tensor back = png::read_rgb(dir / "a.png");
  REQUIRE(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(std::abs(back[i] - std::clamp(img[i], 0.0f, 1.0f)) <= 0.5f / 255.0f + 1e-6f);
  }
  Tensor mask({4, 6});
  mask[3] = mask[10] = 1.0f;
  png::write_mask(dir / "m.png", mask);
  CHECK(png::read_mask(dir / "m.png") == mask);
  CHECK_THROWS_AS(png::read_rgb(dir / "missing.png"), ParseError);
}

TEST_CASE("dataset generation on disk") {
  const auto dir = testing::scratch_dir("gen");
  synth::SynthParams p;
  p.size = 32;
  p.seed = 9;
  const auto manifest = synth::generate_dataset(p, 2, dir / "a");
  CHECK(manifest.ids.size() == 4);
  CHECK(manifest.labels == std::vector<int>{0, 1, 0, 1});
  int images = 0, masks = 0;
  for (const auto& e : fs::directory_iterator(dir / "a" / "images")) images += e.path().extension() == ".png";
  for (const auto& e : fs::directory_iterator(dir / "a" / "masks")) masks += e.path().extension() == ".png";
  CHECK(images == 4);
  CHECK(masks == 4);
  CHECK(fs::exists(dir / "a" / "labels.csv"));
  CHECK(fs::exists(dir / "a" / "fovea.csv"));

  const std::string labels = slurp(dir / "a" / "labels.csv");
  CHECK(labels.rfind("id,label\n", 0) == 0);
  CHECK(labels.find('\r') == std::string::npos);
  CHECK(slurp(dir / "a" / "fovea.csv").rfind("id,x,y\n", 0) == 0);

  synth::generate_dataset(p, 2, dir / "b");
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    CHECK(slurp(e.path()) == slurp(dir / "b" / rel));
  }
  p.seed = 10;
  synth::generate_dataset(p, 2, dir / "c");
  CHECK(slurp(dir / "a" / "fovea.csv") != slurp(dir / "c" / "fovea.csv"));
}

TEST_CASE("dataset load round trip and errors") {
  const auto dir = testing::scratch_dir("load");
  synth::SynthParams p;
  p.size = 32;
  const auto samples = synth::generate_samples(p, 2);
  synth::write_dataset(samples, dir / "ok");
  const auto back = synth::load_dataset(dir / "ok");
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].id == samples[i].id);
    CHECK(back[i].label == samples[i].label);
    CHECK(back[i].fovea_x == samples[i].fovea_x);
    CHECK(back[i].fovea_y == samples[i].fovea_y);
    CHECK(back[i].disc_mask == samples[i].disc_mask);
    CHECK(max_abs_diff(back[i].image, samples[i].image) <= 0.5 / 255.0 + 1e-6);
  }

  fs::copy(dir / "ok", dir / "trunc", fs::copy_options::recursive);
  std::string fovea = slurp(dir / "trunc" / "fovea.csv");
  const auto third = fovea.find('\n', fovea.find('\n', fovea.find('\n') + 1) + 1);
  fovea = fovea.substr(0, fovea.rfind(',', third)) + fovea.substr(third);  // line 3 loses its y field
  spit(dir / "trunc" / "fovea.csv", fovea);
  try {
    synth::load_dataset(dir / "trunc");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("fovea.csv:3") != std::string::npos);
  }

  fs::copy(dir / "ok", dir / "badmask", fs::copy_options::recursive);
  // A mask pixel of 128, written through the RGB path.
  Tensor rgb({3, 32, 32});
  for (int c = 0; c < 3; ++c) rgb[c * 1024 + 5] = 128.0f / 255.0f;
  png::write_rgb(dir / "badmask" / "masks" / (samples[0].id + ".png"), rgb);
  CHECK_THROWS_AS(synth::load_dataset(dir / "badmask"), ParseError);

  fs::create_directories(dir / "empty");
  CHECK_THROWS_AS(synth::load_dataset(dir / "empty"), ParseError);
}
