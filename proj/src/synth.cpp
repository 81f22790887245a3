#include "fundus/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "fundus/errors.hpp"
#include "fundus/png_io.hpp"

namespace fundus::synth {

void SynthParams::validate() const {
  if (size < 16) throw ConfigError("synth: size must be >= 16");
  if (!(disc_radius_min > 0 && disc_radius_min <= disc_radius_max && disc_radius_max < 0.15)) {
    throw ConfigError("synth: disc radius range must satisfy 0 < min <= max < 0.15");
  }
  if (!(fovea_offset_min > 0 && fovea_offset_min <= fovea_offset_max && fovea_offset_max < 0.35)) {
    throw ConfigError("synth: fovea offset range must satisfy 0 < min <= max < 0.35");
  }
  if (lesion_min < 1 || lesion_min > lesion_max) throw ConfigError("synth: lesion count range must satisfy 1 <= min <= max");
  if (vessel_count < 0) throw ConfigError("synth: vessel_count must be >= 0");
}

namespace {

constexpr double kPi = std::numbers::pi;

double round6(double v) { return std::round(v * 1e6) / 1e6; }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Rgb {
  double r, g, b;
};

Rgb blend(Rgb a, Rgb b, double t) { return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t}; }

double seg_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct Vessel {
  std::vector<double> xs, ys;
  double width;
};

struct Blob {
  double x, y, sigma;
};

}  // namespace

std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x46u};
  return std::mt19937_64(seq);
}

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04zu", index);
  return buf;
}

Sample generate_sample(const SynthParams& p, int label, std::mt19937_64& rng, SampleGeometry* geometry) {
  p.validate();
  if (label != 0 && label != 1) throw ArgumentError("generate_sample: label must be 0 or 1");
  const int s = p.size;

  // Geometry: fovea first, disc nasal to it, both well inside the field.
  double fx = 0, fy = 0, dx = 0, dy = 0, r = 0;
  for (;;) {
    fx = uniform(rng, 0.32, 0.68);
    fy = uniform(rng, 0.36, 0.64);
    r = uniform(rng, p.disc_radius_min, p.disc_radius_max);
    const double offset = uniform(rng, p.fovea_offset_min, p.fovea_offset_max);
    const double lift = uniform(rng, -0.05, 0.02);
    const int side = rng() % 2 ? 1 : -1;
    bool placed = false;
    for (int attempt : {side, -side}) {
      dx = fx + attempt * offset;
      dy = fy + lift;
      if (std::hypot(dx - 0.5, dy - 0.5) + r <= kFieldRadius - 0.04) {
        placed = true;
        break;
      }
    }
    if (placed && std::hypot(dx - fx, dy - fy) > r + 0.1) break;
  }
  fx = round6(fx);
  fy = round6(fy);
  const double elong = uniform(rng, 1.0, 1.12);
  const double rx = r / std::sqrt(elong), ry = r * std::sqrt(elong);

  // Low-frequency background texture.
  double wave[3][4];
  for (auto& w : wave) {
    w[0] = uniform(rng, 2.0, 6.0);
    w[1] = uniform(rng, 0.0, 2 * kPi);
    w[2] = uniform(rng, 0.0, 2 * kPi);
    w[3] = uniform(rng, 0.0, 0.035);
  }

  std::vector<Vessel> vessels;
  const double away = dx > fx ? 1.0 : -1.0;  // direction from fovea to disc
  for (int k = 0; k < p.vessel_count; ++k) {
    Vessel v;
    v.width = uniform(rng, 0.007, 0.014);
    const double up = k % 2 ? -1.0 : 1.0;
    double angle = up * kPi / 2 + uniform(rng, -0.6, 0.6);
    const double bend = -away * up * uniform(rng, 0.03, 0.08);
    double x = dx, y = dy;
    v.xs.push_back(x);
    v.ys.push_back(y);
    for (int step = 0; step < 60; ++step) {
      x += 0.012 * std::cos(angle);
      y += 0.012 * std::sin(angle);
      angle += bend;
      v.xs.push_back(x);
      v.ys.push_back(y);
      if (std::hypot(x - 0.5, y - 0.5) > kFieldRadius) break;
    }
    vessels.push_back(std::move(v));
  }

  std::vector<Blob> lesions;
  bool crescent = false;
  if (label == 1) {
    crescent = true;
    const int count = std::uniform_int_distribution<int>(p.lesion_min, p.lesion_max)(rng);
    while (static_cast<int>(lesions.size()) < count) {
      const double lx = uniform(rng, 0.12, 0.88), ly = uniform(rng, 0.12, 0.88);
      const double sigma = uniform(rng, 0.018, 0.035);
      if (std::hypot(lx - 0.5, ly - 0.5) > kFieldRadius - 0.08) continue;
      if (std::hypot(lx - fx, ly - fy) < 0.14 + sigma) continue;
      if (std::hypot(lx - dx, ly - dy) < r * 1.7 + 2 * sigma) continue;
      lesions.push_back({lx, ly, sigma});
    }
  }
  const double crescent_dir = std::atan2(fy - dy, fx - dx);
  const double crescent_span = uniform(rng, 0.7, 1.1);

  Sample out;
  out.label = label;
  out.fovea_x = fx;
  out.fovea_y = fy;
  out.image = Tensor({3, s, s});
  out.disc_mask = Tensor({s, s});
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  std::normal_distribution<double> pixel_noise(0.0, 0.008);

  const Rgb base{0.80, 0.38, 0.16};
  const Rgb disc_rgb{0.98, 0.88, 0.62};
  const Rgb cup_rgb{1.0, 0.96, 0.82};
  const Rgb vessel_rgb{0.50, 0.10, 0.07};
  const Rgb pale{0.93, 0.78, 0.58};
  const Rgb lesion_rgb{0.30, 0.14, 0.07};

  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      const double u = (j + 0.5) / s, v = (i + 0.5) / s;
      const double rho = std::hypot(u - 0.5, v - 0.5) / kFieldRadius;
      const std::size_t idx = static_cast<std::size_t>(i) * s + j;
      Rgb c{0, 0, 0};
      if (rho <= 1.0) {
        double tex = 1.0;
        for (const auto& w : wave) tex += w[3] * std::sin(w[0] * 2 * kPi * (u * std::cos(w[1]) + v * std::sin(w[1])) + w[2]);
        const double shade = (1.0 - 0.45 * rho * rho) * tex;
        c = {base.r * shade, base.g * shade, base.b * shade};

        const double df2 = (u - fx) * (u - fx) + (v - fy) * (v - fy);
        const double macula = 1.0 - 0.25 * std::exp(-df2 / (2 * 0.07 * 0.07)) - 0.35 * std::exp(-df2 / (2 * 0.022 * 0.022));
        c = {c.r * macula, c.g * macula, c.b * macula};

        const double qx = (u - dx) / rx, qy = (v - dy) / ry;
        const double q = std::sqrt(qx * qx + qy * qy);
        if (crescent && q > 1.0 && q < 1.6) {
          double diff = std::abs(std::remainder(std::atan2(v - dy, u - dx) - crescent_dir, 2 * kPi));
          if (diff < crescent_span) c = blend(c, pale, 0.8 * (1.0 - diff / crescent_span * 0.5));
        }
        for (const auto& l : lesions) {
          const double d2 = (u - l.x) * (u - l.x) + (v - l.y) * (v - l.y);
          c = blend(c, lesion_rgb, 0.75 * std::exp(-d2 / (2 * l.sigma * l.sigma)));
        }
        if (q <= 1.08) {
          const double alpha = std::clamp((1.08 - q) / 0.16, 0.0, 1.0);
          c = blend(c, disc_rgb, alpha);
          if (q < 0.5) c = blend(c, cup_rgb, std::clamp((0.5 - q) / 0.2, 0.0, 1.0));
        }
        if (q <= 1.0) out.disc_mask[idx] = 1.0f;

        if (std::sqrt(df2) > 0.1) {
          for (const auto& ves : vessels) {
            double best = 1e9;
            for (std::size_t k = 1; k < ves.xs.size(); ++k)
              best = std::min(best, seg_distance(u, v, ves.xs[k - 1], ves.ys[k - 1], ves.xs[k], ves.ys[k]));
            const double half = ves.width / 2;
            if (best < half + 0.5 / s) c = blend(c, vessel_rgb, 0.7 * std::clamp((half + 0.5 / s - best) * s, 0.0, 1.0));
          }
        }
        c = {c.r + pixel_noise(rng), c.g + pixel_noise(rng), c.b + pixel_noise(rng)};
      }
      out.image[idx] = static_cast<float>(std::clamp(c.r, 0.0, 1.0));
      out.image[plane + idx] = static_cast<float>(std::clamp(c.g, 0.0, 1.0));
      out.image[2 * plane + idx] = static_cast<float>(std::clamp(c.b, 0.0, 1.0));
    }
  }

  if (geometry) *geometry = SampleGeometry{dx, dy, r, static_cast<int>(lesions.size()), crescent};
  return out;
}

std::vector<Sample> generate_samples(const SynthParams& p, int n_per_class) {
  if (n_per_class < 1) throw ArgumentError("generate_samples: n_per_class must be >= 1");
  std::vector<Sample> out;
  for (std::size_t i = 0; i < static_cast<std::size_t>(2 * n_per_class); ++i) {
    auto rng = sample_rng(p.seed, i);
    Sample s = generate_sample(p, static_cast<int>(i % 2), rng);
    s.id = sample_id(i);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << text;
  if (!f) throw IoError(path.string() + ": write failed");
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) fields.push_back(cur);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

using Rows = std::vector<std::pair<int, std::vector<std::string>>>;  // (line number, fields)

Rows read_csv(const std::filesystem::path& path, const std::string& header, std::size_t fields) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(path.string() + ": missing file");
  std::string line;
  if (!std::getline(f, line) || line != header) {
    throw ParseError(path.string() + ":1: expected header '" + header + "'");
  }
  Rows rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto parts = split_csv(line);
    if (parts.size() != fields) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(fields) +
                       " fields, got " + std::to_string(parts.size()));
    }
    for (const auto& p : parts)
      if (p.empty()) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": empty field");
    rows.emplace_back(lineno, std::move(parts));
  }
  return rows;
}

double parse_number(const std::string& text, const std::filesystem::path& path, int lineno) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (...) {
    used = 0;
  }
  if (used != text.size()) {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed number '" + text + "'");
  }
  return v;
}

}  // namespace

void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError(out_dir.string() + ": cannot create dataset directories (" + ec.message() + ")");
  std::string labels = "id,label\n", fovea = "id,x,y\n";
  for (const auto& s : samples) {
    png::write_rgb(out_dir / "images" / (s.id + ".png"), s.image);
    png::write_mask(out_dir / "masks" / (s.id + ".png"), s.disc_mask);
    labels += s.id + "," + std::to_string(s.label) + "\n";
    fovea += s.id + "," + fixed6(s.fovea_x) + "," + fixed6(s.fovea_y) + "\n";
  }
  write_text(out_dir / "labels.csv", labels);
  write_text(out_dir / "fovea.csv", fovea);
}

Manifest generate_dataset(const SynthParams& p, int n_per_class, const std::filesystem::path& out_dir) {
  const auto samples = generate_samples(p, n_per_class);
  write_dataset(samples, out_dir);
  Manifest m;
  for (const auto& s : samples) {
    m.ids.push_back(s.id);
    m.labels.push_back(s.label);
  }
  return m;
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  const auto labels_path = dir / "labels.csv";
  const auto fovea_path = dir / "fovea.csv";
  const Rows label_rows = read_csv(labels_path, "id,label", 2);
  const Rows fovea_rows = read_csv(fovea_path, "id,x,y", 3);
  if (label_rows.empty()) throw ParseError(labels_path.string() + ": no samples");

  std::map<std::string, std::pair<double, double>> coords;
  for (const auto& [lineno, f] : fovea_rows) {
    const double x = parse_number(f[1], fovea_path, lineno);
    const double y = parse_number(f[2], fovea_path, lineno);
    if (!coords.emplace(f[0], std::make_pair(x, y)).second) {
      throw ParseError(fovea_path.string() + ":" + std::to_string(lineno) + ": duplicate id '" + f[0] + "'");
    }
  }
  if (coords.size() != label_rows.size()) {
    throw ParseError(fovea_path.string() + ": " + std::to_string(coords.size()) + " rows but labels.csv has " +
                     std::to_string(label_rows.size()));
  }

  std::vector<Sample> out;
  for (const auto& [lineno, f] : label_rows) {
    Sample s;
    s.id = f[0];
    if (f[1] != "0" && f[1] != "1") {
      throw ParseError(labels_path.string() + ":" + std::to_string(lineno) + ": label must be 0 or 1, got '" + f[1] + "'");
    }
    s.label = f[1] == "1";
    auto it = coords.find(s.id);
    if (it == coords.end()) throw ParseError(fovea_path.string() + ": no row for id '" + s.id + "'");
    s.fovea_x = it->second.first;
    s.fovea_y = it->second.second;
    s.image = png::read_rgb(dir / "images" / (s.id + ".png"));
    s.disc_mask = png::read_mask(dir / "masks" / (s.id + ".png"));
    if (s.image.dim(1) != s.disc_mask.dim(0) || s.image.dim(2) != s.disc_mask.dim(1)) {
      throw ParseError((dir / "masks" / (s.id + ".png")).string() + ": mask size differs from image");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fundus::synth
