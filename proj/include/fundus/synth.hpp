#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus {

/// One fundus record with its ground truth.
struct Sample {
  std::string id;
  Tensor image;  // 3 x s x s, values in [0, 1]
  int label = 0;  // 0 non-pathological, 1 pathological
  double fovea_x = 0.0;  // normalized by image width
  double fovea_y = 0.0;  // normalized by image height
  Tensor disc_mask;  // s x s, values in {0, 1}
  /// False once a geometric augmentation moved the fovea outside [0, 1]^2.
  bool fovea_valid = true;

  int size() const { return image.dim(2); }
};

namespace synth {

struct SynthParams {
  int size = 64;
  double disc_radius_min = 0.055;  // fractions of the image side
  double disc_radius_max = 0.075;
  double fovea_offset_min = 0.20;  // disc-to-fovea distance
  double fovea_offset_max = 0.28;
  int lesion_min = 1;  // pathological samples only
  int lesion_max = 5;
  int vessel_count = 6;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Ground-truth geometry drawn for a sample, reported for verification.
struct SampleGeometry {
  double disc_x = 0, disc_y = 0;  // normalized
  double disc_radius = 0;         // fraction of the side; the ellipse has area pi r^2
  int lesions = 0;
  bool crescent = false;
};

inline constexpr double kFieldRadius = 0.46;

/// Renders one synthetic fundus image. Pure function of (params, label, rng state).
Sample generate_sample(const SynthParams& p, int label, std::mt19937_64& rng, SampleGeometry* geometry = nullptr);

/// The rng stream for sample `index` of a dataset.
std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t index);
std::string sample_id(std::size_t index);

/// In-memory dataset: 2 * n_per_class samples, labels alternating 0, 1.
std::vector<Sample> generate_samples(const SynthParams& p, int n_per_class);

struct Manifest {
  std::vector<std::string> ids;
  std::vector<int> labels;
};

/// Writes images/<id>.png, masks/<id>.png, labels.csv and fovea.csv.
Manifest generate_dataset(const SynthParams& p, int n_per_class, const std::filesystem::path& out_dir);
void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& out_dir);
std::vector<Sample> load_dataset(const std::filesystem::path& dir);

}  // namespace synth
}  // namespace fundus
