#pragma once

// Differentiable operators over N x C x H x W tensors. Every forward
// function is pure; each has a matching *_backward that maps the gradient of
// a scalar objective w.r.t. the output onto inputs and parameters.
//
// Storage is 32-bit; all reductions accumulate in 64-bit.

#include <cstdint>
#include <span>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus::ops {

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
};

/// Output extent of a convolution along one axis.
int conv_out_extent(int in, int kernel, const ConvGeometry& g);
/// Output extent of a transposed convolution along one axis.
int transposed_conv_out_extent(int in, int kernel, int stride, int pad);

// ---- conv2d --------------------------------------------------------------

/// Cross-correlation of `input` (N x Cin x H x W) with `kernel`
/// (Cout x Cin x kH x kW). `bias` is either empty or has Cout entries.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvGeometry& g);

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;  // empty when the forward call had no bias
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, bool has_bias, const Tensor& grad_out,
                          const ConvGeometry& g);

// ---- transposed conv2d -----------------------------------------------------

/// Adjoint of conv2d (dilation 1). `kernel` is Cin x Cout x kH x kW, where Cin
/// is the channel count of `input`.
Tensor transposed_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int pad);

ConvGrads transposed_conv2d_backward(const Tensor& input, const Tensor& kernel, bool has_bias,
                                     const Tensor& grad_out, int stride, int pad);

// ---- max pooling -----------------------------------------------------------

struct MaxPoolResult {
  Tensor output;
  /// Flat index into the input for each output element.
  std::vector<std::int64_t> argmax;
};

/// Ties resolve to the first element in row-major window order.
MaxPoolResult maxpool2d(const Tensor& input, int k, int stride);
Tensor maxpool2d_backward(const Shape& input_shape, std::span<const std::int64_t> argmax, const Tensor& grad_out);

// ---- batch normalization ---------------------------------------------------

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

enum class Mode { Train, Eval };

/// Running statistics carried between calls. `updates` counts train-mode
/// steps; eval mode is illegal while it is zero.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  std::int64_t updates = 0;

  static BatchNormState fresh(int channels);
};

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (population) variance of the batch
};

/// Train-mode normalization by batch statistics. Pure: running statistics
/// are not touched.
Tensor batchnorm2d_train(const Tensor& input, const Tensor& scale, const Tensor& shift, double eps,
                         BatchNormStats* stats_out = nullptr);

Tensor batchnorm2d_eval(const Tensor& input, const Tensor& scale, const Tensor& shift, const BatchNormState& state,
                        double eps);

/// Stateful entry point: train mode normalizes by batch statistics and folds
/// them into `state` with momentum 0.1 (unbiased variance); eval mode uses
/// the running statistics.
Tensor batchnorm2d(const Tensor& input, const Tensor& scale, const Tensor& shift, BatchNormState& state, Mode mode,
                   double eps = kBatchNormEps);

void batchnorm_update_running(BatchNormState& state, const BatchNormStats& stats, std::size_t count_per_channel,
                              double momentum = kBatchNormMomentum);

struct BatchNormGrads {
  Tensor input;
  Tensor scale;
  Tensor shift;
};

BatchNormGrads batchnorm2d_train_backward(const Tensor& input, const Tensor& scale, double eps,
                                          const Tensor& grad_out);
BatchNormGrads batchnorm2d_eval_backward(const Tensor& input, const Tensor& scale, const BatchNormState& state,
                                         double eps, const Tensor& grad_out);

// ---- pointwise ---------------------------------------------------------------

/// max(0, x); the subgradient at 0 is 0.
Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

Tensor sigmoid(const Tensor& input);
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out);

// ---- dense -------------------------------------------------------------------

/// input N x D, weight D x K, bias K (or empty).
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

LinearGrads linear_backward(const Tensor& input, const Tensor& weight, bool has_bias, const Tensor& grad_out);

// ---- pooling / reshaping ---------------------------------------------------

/// Spatial mean per channel: N x C x H x W -> N x C.
Tensor global_avg_pool(const Tensor& input);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);

Tensor concat_channels(std::span<const Tensor* const> parts);
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Channels [begin, begin + count) of a 4-D tensor.
Tensor slice_channels(const Tensor& input, int begin, int count);

/// Align-corners-false bilinear resampling with edge clamping.
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);
Tensor bilinear_resize_backward(const Shape& input_shape, const Tensor& grad_out);

/// Softmax along axis 1 (classes/channels) for rank-2 or rank-4 tensors.
Tensor softmax(const Tensor& input);

}  // namespace fundus::ops
