#pragma once

#include <span>

#include "fundus/tensor.hpp"

namespace fundus::losses {

/// Scalar objective plus its gradient w.r.t. the prediction it was given.
struct LossValue {
  double value = 0.0;
  Tensor grad;
};

/// Mean over the batch of -log softmax(logits)[label]. logits: N x C, C >= 2.
LossValue cross_entropy(const Tensor& logits, std::span<const int> labels);

inline constexpr double kEuclidEps = 1e-12;

/// Mean over the batch of sqrt(dx^2 + dy^2 + eps) for N x 2 normalized
/// coordinates.
LossValue euclidean_loss(const Tensor& pred, const Tensor& truth, double eps = kEuclidEps);

inline constexpr double kDiceSmooth = 1.0;

struct DiceValue {
  double score = 0.0;
  Tensor grad;  // d score / d pred, same shape as pred
};

/// Soft Dice (2*sum(p*m) + s) / (sum(p) + sum(m) + s) over every element of
/// the batch. `pred` and `mask` share a shape (N x H x W).
double dice(const Tensor& pred, const Tensor& mask, double smooth = kDiceSmooth);
DiceValue dice_with_grad(const Tensor& pred, const Tensor& mask, double smooth = kDiceSmooth);

struct SegLossOptions {
  double dice_weight = 1.0;  // lambda
  double smooth = kDiceSmooth;
};

/// Per-pixel categorical cross-entropy (mean) plus
/// dice_weight * (1 - dice(softmax channel 1, mask)).
/// logits: N x 2 x H x W; mask: N x H x W (or N x 1 x H x W) with values in {0, 1}.
LossValue combined_seg_loss(const Tensor& logits, const Tensor& mask, const SegLossOptions& opts = {});

/// The two terms of combined_seg_loss, exposed for inspection.
LossValue seg_cross_entropy(const Tensor& logits, const Tensor& mask);
LossValue seg_dice_loss(const Tensor& logits, const Tensor& mask, const SegLossOptions& opts = {});

/// Foreground probability map N x H x W from N x 2 x H x W logits.
Tensor foreground_probs(const Tensor& logits);

}  // namespace fundus::losses
