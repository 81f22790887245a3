#include "fundus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <vector>

#include "fundus/errors.hpp"

namespace fundus::metrics {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ArgumentError("auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ArgumentError("auc: undefined without both positive and negative samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of 1-based ranks of the positives, ties sharing their average rank.
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += rank;
    i = j + 1;
  }
  const double u = pos_rank_sum - static_cast<double>(pos) * (pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

EuclidStats euclid_stats(const Tensor& preds, const Tensor& truths) {
  if (preds.rank() != 2 || preds.dim(1) != 2 || preds.shape() != truths.shape()) {
    throw DimensionError("euclid_stats: expected matching N x 2 tensors, got " + shape_str(preds.shape()) + " and " +
                         shape_str(truths.shape()));
  }
  const int n = preds.dim(0);
  if (n < 1) throw DimensionError("euclid_stats: need at least one sample");
  std::vector<double> d(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double dx = static_cast<double>(preds[2 * i]) - truths[2 * i];
    const double dy = static_cast<double>(preds[2 * i + 1]) - truths[2 * i + 1];
    d[static_cast<std::size_t>(i)] = std::sqrt(dx * dx + dy * dy);
  }
  EuclidStats s;
  for (double v : d) s.mean += v;
  s.mean /= n;
  for (double v : d) s.variance += (v - s.mean) * (v - s.mean);
  s.variance /= n;
  return s;
}

double dice_eval(const Tensor& pred_mask, const Tensor& gt_mask) {
  if (pred_mask.shape() != gt_mask.shape()) {
    throw DimensionError("dice_eval: shape " + shape_str(pred_mask.shape()) + " vs " + shape_str(gt_mask.shape()));
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    const bool p = pred_mask[i] != 0.0f, g = gt_mask[i] != 0.0f;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double accuracy(std::span<const int> pred_labels, std::span<const int> gt_labels) {
  if (pred_labels.size() != gt_labels.size()) throw DimensionError("accuracy: length mismatch");
  if (pred_labels.empty()) throw DimensionError("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred_labels.size(); ++i) hits += pred_labels[i] == gt_labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred_labels.size());
}

std::string MetricsReport::serialize() const {
  std::string out;
  auto line = [&](const char* key, const std::optional<double>& v) {
    if (!v) return;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s=%.6f\n", key, *v);
    out += buf;
  };
  line("auc", auc);
  line("accuracy", accuracy);
  line("mean_euclid", mean_euclid);
  line("var_euclid", var_euclid);
  line("dice", dice);
  out += "n=" + std::to_string(n) + "\n";
  return out;
}

void MetricsReport::write(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << serialize();
  if (!f) throw IoError(path.string() + ": write failed");
}

}  // namespace fundus::metrics
