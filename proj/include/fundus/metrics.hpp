#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include "fundus/tensor.hpp"

namespace fundus::metrics {

/// Published full-scale results, kept for reference only.
/// They come from training on real fundus data and are not targets
/// for this toolkit.
namespace reference {
inline constexpr double kClassifierAuc = 0.998;
inline constexpr double kFoveaMeanEuclid = 0.0295;
inline constexpr double kFoveaVarEuclid = 4.53e-06;
inline constexpr double kResNet50MeanEuclid = 0.0389;
inline constexpr double kResNet50VarEuclid = 2.16e-05;
inline constexpr double kVgg19MeanEuclid = 0.0371;
inline constexpr double kVgg19VarEuclid = 1.38e-05;
}  // namespace reference

/// Rank-based (Mann-Whitney) area under the ROC curve; tied scores count 1/2.
/// Throws ArgumentError unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct EuclidStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance of the per-sample distances
};

/// preds, truths: N x 2 normalized coordinates.
EuclidStats euclid_stats(const Tensor& preds, const Tensor& truths);

/// Hard Dice 2|A n B| / (|A| + |B|) of two binary masks; 1 when both are empty.
double dice_eval(const Tensor& pred_mask, const Tensor& gt_mask);

double accuracy(std::span<const int> pred_labels, std::span<const int> gt_labels);

struct MetricsReport {
  std::optional<double> auc;
  std::optional<double> mean_euclid;
  std::optional<double> var_euclid;
  std::optional<double> dice;
  std::optional<double> accuracy;
  int n = 0;

  /// `metric=value` lines, fixed 6 decimals, LF endings. Absent metrics are
  /// omitted; n is printed as an integer.
  std::string serialize() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace fundus::metrics
