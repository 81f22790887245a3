#include "fundus/losses.hpp"

#include <cmath>
#include <string>

#include "fundus/errors.hpp"
#include "fundus/ops.hpp"

namespace fundus::losses {

LossValue cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be N x C, got " + shape_str(logits.shape()));
  const int n = logits.dim(0), c = logits.dim(1);
  if (c < 2) throw ArgumentError("cross_entropy: need at least two classes");
  if (labels.size() != static_cast<std::size_t>(n)) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(n));
  }
  LossValue out{0.0, Tensor({n, c})};
  const Tensor probs = ops::softmax(logits);
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw ArgumentError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const std::size_t row = static_cast<std::size_t>(i) * c;
    double mx = logits[row];
    for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(logits[row + k]));
    double sum = 0.0;
    for (int k = 0; k < c; ++k) sum += std::exp(logits[row + k] - mx);
    out.value += (mx + std::log(sum)) - logits[row + y];
    for (int k = 0; k < c; ++k) {
      out.grad[row + k] = static_cast<float>((probs[row + k] - (k == y ? 1.0 : 0.0)) / n);
    }
  }
  out.value /= n;
  return out;
}

LossValue euclidean_loss(const Tensor& pred, const Tensor& truth, double eps) {
  if (pred.rank() != 2 || pred.dim(1) != 2) {
    throw DimensionError("euclidean_loss: pred must be N x 2, got " + shape_str(pred.shape()));
  }
  if (truth.shape() != pred.shape()) {
    throw DimensionError("euclidean_loss: truth " + shape_str(truth.shape()) + " vs pred " + shape_str(pred.shape()));
  }
  const int n = pred.dim(0);
  LossValue out{0.0, Tensor(pred.shape())};
  for (int i = 0; i < n; ++i) {
    const double dx = static_cast<double>(pred[2 * i]) - truth[2 * i];
    const double dy = static_cast<double>(pred[2 * i + 1]) - truth[2 * i + 1];
    const double d = std::sqrt(dx * dx + dy * dy + eps);
    out.value += d;
    out.grad[2 * i] = static_cast<float>(dx / (d * n));
    out.grad[2 * i + 1] = static_cast<float>(dy / (d * n));
  }
  out.value /= n;
  return out;
}

DiceValue dice_with_grad(const Tensor& pred, const Tensor& mask, double smooth) {
  if (pred.size() != mask.size()) {
    throw DimensionError("dice: pred " + shape_str(pred.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  double inter = 0.0, sum_p = 0.0, sum_m = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred[i]) * mask[i];
    sum_p += pred[i];
    sum_m += mask[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = sum_p + sum_m + smooth;
  DiceValue out{num / den, Tensor(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.grad[i] = static_cast<float>((2.0 * mask[i] * den - num) / (den * den));
  }
  return out;
}

double dice(const Tensor& pred, const Tensor& mask, double smooth) {
  if (pred.size() != mask.size()) {
    throw DimensionError("dice: pred " + shape_str(pred.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  double inter = 0.0, sum_p = 0.0, sum_m = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred[i]) * mask[i];
    sum_p += pred[i];
    sum_m += mask[i];
  }
  return (2.0 * inter + smooth) / (sum_p + sum_m + smooth);
}

namespace {

void check_seg(const Tensor& logits, const Tensor& mask) {
  if (logits.rank() != 4 || logits.dim(1) != 2) {
    throw DimensionError("combined_seg_loss: logits must be N x 2 x H x W, got " + shape_str(logits.shape()));
  }
  const std::size_t pixels = static_cast<std::size_t>(logits.dim(0)) * logits.dim(2) * logits.dim(3);
  if (mask.size() != pixels) {
    throw DimensionError("combined_seg_loss: mask " + shape_str(mask.shape()) + " does not cover logits " +
                         shape_str(logits.shape()));
  }
  for (float v : mask.data()) {
    if (v != 0.0f && v != 1.0f) throw ArgumentError("combined_seg_loss: mask must be binary {0, 1}");
  }
}

}  // namespace

Tensor foreground_probs(const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(1) != 2) {
    throw DimensionError("foreground_probs: logits must be N x 2 x H x W, got " + shape_str(logits.shape()));
  }
  const Tensor probs = ops::softmax(logits);
  return ops::slice_channels(probs, 1, 1).reshaped({logits.dim(0), logits.dim(2), logits.dim(3)});
}

LossValue seg_cross_entropy(const Tensor& logits, const Tensor& mask) {
  check_seg(logits, mask);
  const int n = logits.dim(0);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  const double count = static_cast<double>(n) * hw;
  LossValue out{0.0, Tensor(logits.shape())};
  for (int b = 0; b < n; ++b)
    for (std::size_t q = 0; q < hw; ++q) {
      const std::size_t i0 = static_cast<std::size_t>(b) * 2 * hw + q, i1 = i0 + hw;
      const double z0 = logits[i0], z1 = logits[i1];
      const double mx = std::max(z0, z1);
      const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
      const bool fg = mask[static_cast<std::size_t>(b) * hw + q] != 0.0f;
      out.value += lse - (fg ? z1 : z0);
      const double p1 = std::exp(z1 - lse);
      const double p0 = std::exp(z0 - lse);
      out.grad[i0] = static_cast<float>((p0 - (fg ? 0.0 : 1.0)) / count);
      out.grad[i1] = static_cast<float>((p1 - (fg ? 1.0 : 0.0)) / count);
    }
  out.value /= count;
  return out;
}

LossValue seg_dice_loss(const Tensor& logits, const Tensor& mask, const SegLossOptions& opts) {
  check_seg(logits, mask);
  const int n = logits.dim(0);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  const Tensor p = foreground_probs(logits);
  const DiceValue d = dice_with_grad(p, mask, opts.smooth);
  LossValue out{opts.dice_weight * (1.0 - d.score), Tensor(logits.shape())};
  for (int b = 0; b < n; ++b)
    for (std::size_t q = 0; q < hw; ++q) {
      const std::size_t pix = static_cast<std::size_t>(b) * hw + q;
      const std::size_t i0 = static_cast<std::size_t>(b) * 2 * hw + q, i1 = i0 + hw;
      const double pv = p[pix];
      // p = sigmoid(z1 - z0)
      const double dl_dp = -opts.dice_weight * d.grad[pix];
      const double dp = pv * (1.0 - pv);
      out.grad[i1] = static_cast<float>(dl_dp * dp);
      out.grad[i0] = static_cast<float>(-dl_dp * dp);
    }
  return out;
}

LossValue combined_seg_loss(const Tensor& logits, const Tensor& mask, const SegLossOptions& opts) {
  LossValue ce = seg_cross_entropy(logits, mask);
  const LossValue dl = seg_dice_loss(logits, mask, opts);
  ce.value += dl.value;
  add_inplace(ce.grad, dl.grad);
  return ce;
}

}  // namespace fundus::losses
