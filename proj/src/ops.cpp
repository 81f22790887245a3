#include "fundus/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "fundus/errors.hpp"
#include "fundus/parallel.hpp"

namespace fundus::ops {
namespace {

using MatD = Eigen::MatrixXd;  // column-major
using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<MatD>;
using ConstMapD = Eigen::Map<const MatD>;

void require_rank(const Tensor& t, int rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Patch layout shared by im2col/col2im. The image is C x H x W; the patch
// grid is Ho x Wo; a column holds one C*kH*kW patch.
struct PatchGeometry {
  int channels, height, width;
  int kh, kw;
  int stride, pad, dilation;
  int out_h, out_w;

  std::size_t rows() const { return static_cast<std::size_t>(channels) * kh * kw; }
  std::size_t grid() const { return static_cast<std::size_t>(out_h) * out_w; }
  std::size_t image() const { return static_cast<std::size_t>(channels) * height * width; }

  // Columns per tile; depends only on the geometry, so tiling (and thus
  // summation order) is identical for every thread count.
  std::size_t tile() const {
    const std::size_t t = std::max<std::size_t>(32, 65536 / std::max<std::size_t>(rows(), 1));
    return std::min(t, grid());
  }
};

// Columns [p0, p1) of one image, written column-major into `out`.
void im2col_tile(const float* img, const PatchGeometry& g, std::size_t p0, std::size_t p1, double* out) {
  const std::size_t rows = g.rows();
  for (std::size_t p = p0; p < p1; ++p) {
    const int oh = static_cast<int>(p / g.out_w), ow = static_cast<int>(p % g.out_w);
    double* col = out + (p - p0) * rows;
    std::size_t r = 0;
    for (int c = 0; c < g.channels; ++c) {
      const float* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
      for (int i = 0; i < g.kh; ++i) {
        const int ih = oh * g.stride - g.pad + i * g.dilation;
        const bool row_ok = ih >= 0 && ih < g.height;
        for (int j = 0; j < g.kw; ++j, ++r) {
          const int iw = ow * g.stride - g.pad + j * g.dilation;
          col[r] = (row_ok && iw >= 0 && iw < g.width) ? plane[ih * g.width + iw] : 0.0;
        }
      }
    }
  }
}

// Scatter-adds columns [p0, p1) back into one image accumulator.
void col2im_tile(const double* cols, const PatchGeometry& g, std::size_t p0, std::size_t p1, double* img) {
  const std::size_t rows = g.rows();
  for (std::size_t p = p0; p < p1; ++p) {
    const int oh = static_cast<int>(p / g.out_w), ow = static_cast<int>(p % g.out_w);
    const double* col = cols + (p - p0) * rows;
    std::size_t r = 0;
    for (int c = 0; c < g.channels; ++c) {
      double* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
      for (int i = 0; i < g.kh; ++i) {
        const int ih = oh * g.stride - g.pad + i * g.dilation;
        const bool row_ok = ih >= 0 && ih < g.height;
        for (int j = 0; j < g.kw; ++j, ++r) {
          const int iw = ow * g.stride - g.pad + j * g.dilation;
          if (row_ok && iw >= 0 && iw < g.width) plane[ih * g.width + iw] += col[r];
        }
      }
    }
  }
}

// Channel-major tile (C x (p1 - p0)) of one sample's C x HW plane stack.
void gather_tile(const float* sample, int channels, std::size_t hw, std::size_t p0, std::size_t p1, double* out) {
  const std::size_t t = p1 - p0;
  for (std::size_t j = 0; j < t; ++j)
    for (int c = 0; c < channels; ++c) out[j * channels + c] = sample[c * hw + p0 + j];
}

RowMatD kernel_matrix(const Tensor& kernel) {
  const int rows = kernel.dim(0);
  const std::size_t cols = kernel.size() / static_cast<std::size_t>(std::max(rows, 1));
  RowMatD m(rows, static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < kernel.size(); ++i) m.data()[i] = kernel[i];
  return m;
}

// Sums per-sample partials in sample order.
Tensor sum_partials(const std::vector<RowMatD>& parts, const Shape& shape) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double acc = 0.0;
    for (const auto& p : parts) acc += p.data()[i];
    t[i] = static_cast<float>(acc);
  }
  return t;
}

Tensor tensor_from(const std::vector<double>& v, const Shape& shape) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

Tensor bias_grad(const Tensor& grad_out) {
  const int n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t hw = static_cast<std::size_t>(grad_out.dim(2)) * grad_out.dim(3);
  Tensor g({c});
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int b = 0; b < n; ++b) {
      const float* src = grad_out.data().data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) acc += src[q];
    }
    g[ch] = static_cast<float>(acc);
  }
  return g;
}

void check_bias(const Tensor& bias, int channels, const char* op) {
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != channels)) {
    throw DimensionError(std::string(op) + ": bias must have " + std::to_string(channels) + " entries, got " +
                         shape_str(bias.shape()));
  }
}
PatchGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const ConvGeometry& g, const char* op) {
  require_rank(input, 4, op, "input");
  require_rank(kernel, 4, op, "kernel");
  if (g.stride < 1) throw ArgumentError(std::string(op) + ": stride must be positive");
  if (g.dilation < 1) throw ArgumentError(std::string(op) + ": dilation must be positive");
  if (g.pad < 0) throw ArgumentError(std::string(op) + ": pad must be non-negative");
  if (input.dim(1) != kernel.dim(1)) {
    throw DimensionError(std::string(op) + ": channel axis (1) mismatch: input has " + std::to_string(input.dim(1)) +
                         ", kernel expects " + std::to_string(kernel.dim(1)));
  }
  const int span_h = g.dilation * (kernel.dim(2) - 1) + 1;
  const int span_w = g.dilation * (kernel.dim(3) - 1) + 1;
  if (input.dim(2) + 2 * g.pad < span_h) {
    throw DimensionError(std::string(op) + ": height axis (2) too small: " + std::to_string(input.dim(2)) +
                         " + 2*pad < dilated kernel extent " + std::to_string(span_h));
  }
  if (input.dim(3) + 2 * g.pad < span_w) {
    throw DimensionError(std::string(op) + ": width axis (3) too small: " + std::to_string(input.dim(3)) +
                         " + 2*pad < dilated kernel extent " + std::to_string(span_w));
  }
  return PatchGeometry{input.dim(1),
                       input.dim(2),
                       input.dim(3),
                       kernel.dim(2),
                       kernel.dim(3),
                       g.stride,
                       g.pad,
                       g.dilation,
                       conv_out_extent(input.dim(2), kernel.dim(2), g),
                       conv_out_extent(input.dim(3), kernel.dim(3), g)};
}

PatchGeometry transposed_geometry(const Tensor& input, const Tensor& kernel, int stride, int pad, const char* op) {
  require_rank(input, 4, op, "input");
  require_rank(kernel, 4, op, "kernel");
  if (stride < 1) throw ArgumentError(std::string(op) + ": stride must be positive");
  if (pad < 0) throw ArgumentError(std::string(op) + ": pad must be non-negative");
  if (input.dim(1) != kernel.dim(0)) {
    throw DimensionError(std::string(op) + ": channel axis (1) mismatch: input has " + std::to_string(input.dim(1)) +
                         ", kernel expects " + std::to_string(kernel.dim(0)));
  }
  const int out_h = transposed_conv_out_extent(input.dim(2), kernel.dim(2), stride, pad);
  const int out_w = transposed_conv_out_extent(input.dim(3), kernel.dim(3), stride, pad);
  if (out_h < 1) throw DimensionError(std::string(op) + ": height axis (2) produces empty output");
  if (out_w < 1) throw DimensionError(std::string(op) + ": width axis (3) produces empty output");
  // Columns live on the input grid; the image is the (larger) output.
  return PatchGeometry{kernel.dim(1), out_h, out_w, kernel.dim(2), kernel.dim(3), stride, pad, 1,
                       input.dim(2),  input.dim(3)};
}

}  // namespace

int conv_out_extent(int in, int kernel, const ConvGeometry& g) {
  return (in + 2 * g.pad - g.dilation * (kernel - 1) - 1) / g.stride + 1;
}

int transposed_conv_out_extent(int in, int kernel, int stride, int pad) { return stride * (in - 1) + kernel - 2 * pad; }


// ---- conv2d ------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvGeometry& g) {
  const PatchGeometry geo = conv_geometry(input, kernel, g, "conv2d");
  check_bias(bias, kernel.dim(0), "conv2d");
  const int n = input.dim(0), cout = kernel.dim(0);
  const RowMatD w = kernel_matrix(kernel);
  const std::size_t rows = geo.rows(), grid = geo.grid(), tile = geo.tile();
  Tensor out({n, cout, geo.out_h, geo.out_w});
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b0, std::size_t b1) {
    std::vector<double> cols(rows * tile);
    MatD y;
    for (std::size_t b = b0; b < b1; ++b) {
      const float* img = input.data().data() + b * geo.image();
      float* dst = out.data().data() + b * cout * grid;
      for (std::size_t p0 = 0; p0 < grid; p0 += tile) {
        const std::size_t p1 = std::min(grid, p0 + tile), t = p1 - p0;
        im2col_tile(img, geo, p0, p1, cols.data());
        y.noalias() = w * ConstMapD(cols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t));
        for (int co = 0; co < cout; ++co) {
          const double shift = bias.empty() ? 0.0 : bias[co];
          for (std::size_t j = 0; j < t; ++j)
            dst[co * grid + p0 + j] = static_cast<float>(y(co, static_cast<Eigen::Index>(j)) + shift);
        }
      }
    }
  });
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, bool has_bias, const Tensor& grad_out,
                          const ConvGeometry& g) {
  const PatchGeometry geo = conv_geometry(input, kernel, g, "conv2d_backward");
  const int n = input.dim(0), cout = kernel.dim(0);
  const Shape expected{n, cout, geo.out_h, geo.out_w};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv2d_backward: grad_out " + shape_str(grad_out.shape()) + ", expected " +
                         shape_str(expected));
  }
  const RowMatD w = kernel_matrix(kernel);
  const std::size_t rows = geo.rows(), grid = geo.grid(), tile = geo.tile();
  std::vector<RowMatD> dw(static_cast<std::size_t>(n), RowMatD::Zero(cout, static_cast<Eigen::Index>(rows)));
  ConvGrads grads;
  grads.input = Tensor(input.shape());
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b0, std::size_t b1) {
    std::vector<double> cols(rows * tile), dy(static_cast<std::size_t>(cout) * tile), dx(geo.image());
    MatD dcols;
    for (std::size_t b = b0; b < b1; ++b) {
      const float* img = input.data().data() + b * geo.image();
      const float* gout = grad_out.data().data() + b * cout * grid;
      std::fill(dx.begin(), dx.end(), 0.0);
      for (std::size_t p0 = 0; p0 < grid; p0 += tile) {
        const std::size_t p1 = std::min(grid, p0 + tile), t = p1 - p0;
        im2col_tile(img, geo, p0, p1, cols.data());
        gather_tile(gout, cout, grid, p0, p1, dy.data());
        const ConstMapD dy_m(dy.data(), cout, static_cast<Eigen::Index>(t));
        const ConstMapD cols_m(cols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t));
        dw[b].noalias() += dy_m * cols_m.transpose();
        dcols.noalias() = w.transpose() * dy_m;
        col2im_tile(dcols.data(), geo, p0, p1, dx.data());
      }
      float* gin = grads.input.data().data() + b * geo.image();
      for (std::size_t i = 0; i < dx.size(); ++i) gin[i] = static_cast<float>(dx[i]);
    }
  });
  grads.kernel = sum_partials(dw, kernel.shape());
  if (has_bias) grads.bias = bias_grad(grad_out);
  return grads;
}

// ---- transposed conv2d -----------------------------------------------------------

Tensor transposed_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
  const PatchGeometry geo = transposed_geometry(input, kernel, stride, pad, "transposed_conv2d");
  check_bias(bias, kernel.dim(1), "transposed_conv2d");
  const int n = input.dim(0), cin = input.dim(1);
  const RowMatD w = kernel_matrix(kernel);
  const std::size_t grid = geo.grid(), tile = geo.tile();
  const std::size_t plane = static_cast<std::size_t>(geo.height) * geo.width;
  Tensor out({n, geo.channels, geo.height, geo.width});
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b0, std::size_t b1) {
    std::vector<double> x(static_cast<std::size_t>(cin) * tile), img(geo.image());
    MatD cols;
    for (std::size_t b = b0; b < b1; ++b) {
      const float* src = input.data().data() + b * cin * grid;
      std::fill(img.begin(), img.end(), 0.0);
      for (std::size_t p0 = 0; p0 < grid; p0 += tile) {
        const std::size_t p1 = std::min(grid, p0 + tile), t = p1 - p0;
        gather_tile(src, cin, grid, p0, p1, x.data());
        cols.noalias() = w.transpose() * ConstMapD(x.data(), cin, static_cast<Eigen::Index>(t));
        col2im_tile(cols.data(), geo, p0, p1, img.data());
      }
      float* dst = out.data().data() + b * geo.image();
      for (std::size_t i = 0; i < img.size(); ++i) {
        const double shift = bias.empty() ? 0.0 : bias[i / plane];
        dst[i] = static_cast<float>(img[i] + shift);
      }
    }
  });
  return out;
}

ConvGrads transposed_conv2d_backward(const Tensor& input, const Tensor& kernel, bool has_bias,
                                     const Tensor& grad_out, int stride, int pad) {
  const PatchGeometry geo = transposed_geometry(input, kernel, stride, pad, "transposed_conv2d_backward");
  const int n = input.dim(0), cin = input.dim(1);
  const Shape expected{n, geo.channels, geo.height, geo.width};
  if (grad_out.shape() != expected) {
    throw DimensionError("transposed_conv2d_backward: grad_out " + shape_str(grad_out.shape()) + ", expected " +
                         shape_str(expected));
  }
  const RowMatD w = kernel_matrix(kernel);
  const std::size_t rows = geo.rows(), grid = geo.grid(), tile = geo.tile();
  std::vector<RowMatD> dw(static_cast<std::size_t>(n), RowMatD::Zero(cin, static_cast<Eigen::Index>(rows)));
  ConvGrads grads;
  grads.input = Tensor(input.shape());
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b0, std::size_t b1) {
    std::vector<double> gcols(rows * tile), x(static_cast<std::size_t>(cin) * tile);
    MatD dx;
    for (std::size_t b = b0; b < b1; ++b) {
      const float* gimg = grad_out.data().data() + b * geo.image();
      const float* src = input.data().data() + b * cin * grid;
      float* gin = grads.input.data().data() + b * cin * grid;
      for (std::size_t p0 = 0; p0 < grid; p0 += tile) {
        const std::size_t p1 = std::min(grid, p0 + tile), t = p1 - p0;
        im2col_tile(gimg, geo, p0, p1, gcols.data());
        gather_tile(src, cin, grid, p0, p1, x.data());
        const ConstMapD g_m(gcols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t));
        const ConstMapD x_m(x.data(), cin, static_cast<Eigen::Index>(t));
        dx.noalias() = w * g_m;
        dw[b].noalias() += x_m * g_m.transpose();
        for (int c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < t; ++j) gin[c * grid + p0 + j] = static_cast<float>(dx(c, static_cast<Eigen::Index>(j)));
      }
    }
  });
  grads.kernel = sum_partials(dw, kernel.shape());
  if (has_bias) grads.bias = bias_grad(grad_out);
  return grads;
}

// ---- max pooling -----------------------------------------------------------------

MaxPoolResult maxpool2d(const Tensor& input, int k, int stride) {
  require_rank(input, 4, "maxpool2d", "input");
  if (k < 1 || stride < 1) throw ArgumentError("maxpool2d: window and stride must be positive");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < k) throw DimensionError("maxpool2d: height axis (2) smaller than window");
  if (w < k) throw DimensionError("maxpool2d: width axis (3) smaller than window");
  const int oh = (h - k) / stride + 1;
  const int ow = (w - k) / stride + 1;
  MaxPoolResult r{Tensor({n, c, oh, ow}), std::vector<std::int64_t>(static_cast<std::size_t>(n) * c * oh * ow)};
  const float* src = input.data().data();
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::int64_t base = static_cast<std::int64_t>(p) * h * w;
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x, ++o) {
        std::int64_t best = base + static_cast<std::int64_t>(y * stride) * w + x * stride;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const std::int64_t idx = base + static_cast<std::int64_t>(y * stride + i) * w + (x * stride + j);
            if (src[idx] > src[best]) best = idx;
          }
        r.output[o] = src[best];
        r.argmax[o] = best;
      }
  }
  return r;
}

Tensor maxpool2d_backward(const Shape& input_shape, std::span<const std::int64_t> argmax, const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) throw DimensionError("maxpool2d_backward: argmax/grad size mismatch");
  std::vector<double> acc(shape_numel(input_shape), 0.0);
  for (std::size_t i = 0; i < argmax.size(); ++i) acc[static_cast<std::size_t>(argmax[i])] += grad_out[i];
  return tensor_from(acc, input_shape);
}

// ---- batch normalization ---------------------------------------------------------

BatchNormState BatchNormState::fresh(int channels) {
  return BatchNormState{Tensor::zeros({channels}), Tensor::filled({channels}, 1.0f), 0};
}

namespace {

void check_bn(const Tensor& input, const Tensor& scale, const Tensor& shift, const char* op) {
  require_rank(input, 4, op, "input");
  const int c = input.dim(1);
  if (scale.size() != static_cast<std::size_t>(c)) {
    throw DimensionError(std::string(op) + ": channel axis (1) has " + std::to_string(c) + " channels, scale has " +
                         std::to_string(scale.size()));
  }
  if (!shift.empty() && shift.size() != static_cast<std::size_t>(c)) {
    throw DimensionError(std::string(op) + ": channel axis (1) has " + std::to_string(c) + " channels, shift has " +
                         std::to_string(shift.size()));
  }
}

BatchNormStats batch_stats(const Tensor& input) {
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  const double count = static_cast<double>(n) * hw;
  BatchNormStats s{std::vector<double>(c), std::vector<double>(c)};
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int b = 0; b < n; ++b) {
      const float* p = input.data().data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) sum += p[q];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (int b = 0; b < n; ++b) {
      const float* p = input.data().data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) sq += (p[q] - mean) * (p[q] - mean);
    }
    s.mean[ch] = mean;
    s.var[ch] = sq / count;
  }
  return s;
}

Tensor normalize(const Tensor& input, const Tensor& scale, const Tensor& shift, std::span<const double> mean,
                 std::span<const double> var, double eps) {
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  Tensor out(input.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double inv = 1.0 / std::sqrt(var[ch] + eps);
      const double g = scale[ch];
      const double beta = shift.empty() ? 0.0 : shift[ch];
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q)
        out[off + q] = static_cast<float>(g * (input[off + q] - mean[ch]) * inv + beta);
    }
  return out;
}

}  // namespace

Tensor batchnorm2d_train(const Tensor& input, const Tensor& scale, const Tensor& shift, double eps,
                         BatchNormStats* stats_out) {
  check_bn(input, scale, shift, "batchnorm2d");
  if (static_cast<std::size_t>(input.dim(0)) * input.dim(2) * input.dim(3) < 2) {
    throw DimensionError("batchnorm2d: train mode needs batch*H*W >= 2 values per channel");
  }
  BatchNormStats s = batch_stats(input);
  Tensor out = normalize(input, scale, shift, s.mean, s.var, eps);
  if (stats_out) *stats_out = std::move(s);
  return out;
}

Tensor batchnorm2d_eval(const Tensor& input, const Tensor& scale, const Tensor& shift, const BatchNormState& state,
                        double eps) {
  check_bn(input, scale, shift, "batchnorm2d");
  if (state.updates == 0) throw StateError("batchnorm2d: eval mode before any train step (running stats unset)");
  const int c = input.dim(1);
  std::vector<double> mean(c), var(c);
  for (int ch = 0; ch < c; ++ch) {
    mean[ch] = state.running_mean[ch];
    var[ch] = state.running_var[ch];
  }
  return normalize(input, scale, shift, mean, var, eps);
}

void batchnorm_update_running(BatchNormState& state, const BatchNormStats& stats, std::size_t count_per_channel,
                              double momentum) {
  const double unbias =
      count_per_channel > 1 ? static_cast<double>(count_per_channel) / (count_per_channel - 1) : 1.0;
  for (std::size_t ch = 0; ch < stats.mean.size(); ++ch) {
    state.running_mean[ch] =
        static_cast<float>((1.0 - momentum) * state.running_mean[ch] + momentum * stats.mean[ch]);
    state.running_var[ch] =
        static_cast<float>((1.0 - momentum) * state.running_var[ch] + momentum * stats.var[ch] * unbias);
  }
  ++state.updates;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& scale, const Tensor& shift, BatchNormState& state, Mode mode,
                   double eps) {
  if (mode == Mode::Eval) return batchnorm2d_eval(input, scale, shift, state, eps);
  BatchNormStats stats;
  Tensor out = batchnorm2d_train(input, scale, shift, eps, &stats);
  batchnorm_update_running(state, stats, static_cast<std::size_t>(input.dim(0)) * input.dim(2) * input.dim(3));
  return out;
}

BatchNormGrads batchnorm2d_train_backward(const Tensor& input, const Tensor& scale, double eps,
                                          const Tensor& grad_out) {
  check_bn(input, scale, Tensor{}, "batchnorm2d_backward");
  if (grad_out.shape() != input.shape()) throw DimensionError("batchnorm2d_backward: grad_out shape mismatch");
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  const double count = static_cast<double>(n) * hw;
  const BatchNormStats s = batch_stats(input);
  BatchNormGrads g{Tensor(input.shape()), Tensor({c}), Tensor({c})};
  for (int ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(s.var[ch] + eps);
    double sum_g = 0.0, sum_gx = 0.0;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) {
        const double xhat = (input[off + q] - s.mean[ch]) * inv;
        sum_g += grad_out[off + q];
        sum_gx += grad_out[off + q] * xhat;
      }
    }
    g.shift[ch] = static_cast<float>(sum_g);
    g.scale[ch] = static_cast<float>(sum_gx);
    const double k = scale[ch] * inv / count;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) {
        const double xhat = (input[off + q] - s.mean[ch]) * inv;
        g.input[off + q] = static_cast<float>(k * (count * grad_out[off + q] - sum_g - xhat * sum_gx));
      }
    }
  }
  return g;
}

BatchNormGrads batchnorm2d_eval_backward(const Tensor& input, const Tensor& scale, const BatchNormState& state,
                                         double eps, const Tensor& grad_out) {
  check_bn(input, scale, Tensor{}, "batchnorm2d_backward");
  if (grad_out.shape() != input.shape()) throw DimensionError("batchnorm2d_backward: grad_out shape mismatch");
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  BatchNormGrads g{Tensor(input.shape()), Tensor({c}), Tensor({c})};
  for (int ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) + eps);
    double sum_g = 0.0, sum_gx = 0.0;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) {
        const double go = grad_out[off + q];
        sum_g += go;
        sum_gx += go * (input[off + q] - state.running_mean[ch]) * inv;
        g.input[off + q] = static_cast<float>(go * scale[ch] * inv);
      }
    }
    g.shift[ch] = static_cast<float>(sum_g);
    g.scale[ch] = static_cast<float>(sum_gx);
  }
  return g;
}

// ---- pointwise -------------------------------------------------------------------

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0f ? input[i] : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  if (input.shape() != grad_out.shape()) throw DimensionError("relu_backward: shape mismatch");
  Tensor g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0.0f ? grad_out[i] : 0.0f;
  return g;
}

Tensor sigmoid(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = input[i];
    out[i] = static_cast<float>(x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)));
  }
  return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
  if (output.shape() != grad_out.shape()) throw DimensionError("sigmoid_backward: shape mismatch");
  Tensor g(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double y = output[i];
    g[i] = static_cast<float>(grad_out[i] * y * (1.0 - y));
  }
  return g;
}

// ---- dense -----------------------------------------------------------------------

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const int n = input.dim(0), d = input.dim(1), k = weight.dim(1);
  if (weight.dim(0) != d) {
    throw DimensionError("linear: inner axis mismatch: input has " + std::to_string(d) + " features, weight expects " +
                         std::to_string(weight.dim(0)));
  }
  check_bias(bias, k, "linear");
  Tensor out({n, k});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      double acc = bias.empty() ? 0.0 : bias[j];
      for (int p = 0; p < d; ++p)
        acc += static_cast<double>(input[static_cast<std::size_t>(i) * d + p]) * weight[static_cast<std::size_t>(p) * k + j];
      out[static_cast<std::size_t>(i) * k + j] = static_cast<float>(acc);
    }
  return out;
}

LinearGrads linear_backward(const Tensor& input, const Tensor& weight, bool has_bias, const Tensor& grad_out) {
  const int n = input.dim(0), d = input.dim(1), k = weight.dim(1);
  if (grad_out.shape() != Shape{n, k}) throw DimensionError("linear_backward: grad_out shape mismatch");
  LinearGrads g{Tensor({n, d}), Tensor({d, k}), Tensor{}};
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < d; ++p) {
      double acc = 0.0;
      for (int j = 0; j < k; ++j)
        acc += static_cast<double>(grad_out[static_cast<std::size_t>(i) * k + j]) * weight[static_cast<std::size_t>(p) * k + j];
      g.input[static_cast<std::size_t>(i) * d + p] = static_cast<float>(acc);
    }
  for (int p = 0; p < d; ++p)
    for (int j = 0; j < k; ++j) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        acc += static_cast<double>(input[static_cast<std::size_t>(i) * d + p]) * grad_out[static_cast<std::size_t>(i) * k + j];
      g.weight[static_cast<std::size_t>(p) * k + j] = static_cast<float>(acc);
    }
  if (has_bias) {
    g.bias = Tensor({k});
    for (int j = 0; j < k; ++j) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += grad_out[static_cast<std::size_t>(i) * k + j];
      g.bias[j] = static_cast<float>(acc);
    }
  }
  return g;
}

// ---- pooling / reshaping -------------------------------------------------------

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  Tensor out({n, c});
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
    double acc = 0.0;
    for (std::size_t q = 0; q < hw; ++q) acc += input[p * hw + q];
    out[p] = static_cast<float>(acc / static_cast<double>(hw));
  }
  return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  const std::size_t hw = static_cast<std::size_t>(input_shape.at(2)) * input_shape.at(3);
  Tensor g(input_shape);
  if (grad_out.size() * hw != g.size()) throw DimensionError("global_avg_pool_backward: shape mismatch");
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    const float v = static_cast<float>(grad_out[p] / static_cast<double>(hw));
    for (std::size_t q = 0; q < hw; ++q) g[p * hw + q] = v;
  }
  return g;
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: no inputs");
  const Tensor& first = *parts.front();
  require_rank(first, 4, "concat_channels", "input");
  int channels = 0;
  for (const Tensor* p : parts) {
    require_rank(*p, 4, "concat_channels", "input");
    for (int axis : {0, 2, 3}) {
      if (p->dim(axis) != first.dim(axis)) {
        static const char* names[] = {"batch", "", "height", "width"};
        throw DimensionError(std::string("concat_channels: ") + names[axis] + " axis (" + std::to_string(axis) +
                             ") mismatch: " + shape_str(first.shape()) + " vs " + shape_str(p->shape()));
      }
    }
    channels += p->dim(1);
  }
  const int n = first.dim(0);
  const std::size_t hw = static_cast<std::size_t>(first.dim(2)) * first.dim(3);
  Tensor out({n, channels, first.dim(2), first.dim(3)});
  float* dst = out.data().data();
  for (int b = 0; b < n; ++b)
    for (const Tensor* p : parts) {
      const std::size_t block = static_cast<std::size_t>(p->dim(1)) * hw;
      const float* src = p->data().data() + static_cast<std::size_t>(b) * block;
      dst = std::copy(src, src + block, dst);
    }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Tensor* parts[] = {&a, &b};
  return concat_channels(parts);
}

Tensor slice_channels(const Tensor& input, int begin, int count) {
  require_rank(input, 4, "slice_channels", "input");
  if (begin < 0 || count < 0 || begin + count > input.dim(1)) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside channel axis of " + shape_str(input.shape()));
  }
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  Tensor out({n, count, input.dim(2), input.dim(3)});
  float* dst = out.data().data();
  for (int b = 0; b < n; ++b) {
    const float* src = input.data().data() + (static_cast<std::size_t>(b) * c + begin) * hw;
    dst = std::copy(src, src + static_cast<std::size_t>(count) * hw, dst);
  }
  return out;
}

namespace {

struct Taps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

Taps resize_taps(int in, int out) {
  Taps t{std::vector<int>(out), std::vector<int>(out), std::vector<double>(out)};
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - lo;
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
  require_rank(input, 4, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) throw ArgumentError("bilinear_resize: output extents must be positive");
  const int planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const Taps ty = resize_taps(h, out_h), tx = resize_taps(w, out_w);
  Tensor out({input.dim(0), input.dim(1), out_h, out_w});
  for (int p = 0; p < planes; ++p) {
    const float* src = input.data().data() + static_cast<std::size_t>(p) * h * w;
    float* dst = out.data().data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const float* r0 = src + static_cast<std::size_t>(ty.lo[y]) * w;
      const float* r1 = src + static_cast<std::size_t>(ty.hi[y]) * w;
      const double fy = ty.frac[y];
      for (int x = 0; x < out_w; ++x) {
        const double fx = tx.frac[x];
        const double top = (1.0 - fx) * r0[tx.lo[x]] + fx * r0[tx.hi[x]];
        const double bot = (1.0 - fx) * r1[tx.lo[x]] + fx * r1[tx.hi[x]];
        dst[y * out_w + x] = static_cast<float>((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

Tensor bilinear_resize_backward(const Shape& input_shape, const Tensor& grad_out) {
  const int planes = input_shape.at(0) * input_shape.at(1), h = input_shape.at(2), w = input_shape.at(3);
  const int out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  const Taps ty = resize_taps(h, out_h), tx = resize_taps(w, out_w);
  std::vector<double> acc(shape_numel(input_shape), 0.0);
  for (int p = 0; p < planes; ++p) {
    double* dst = acc.data() + static_cast<std::size_t>(p) * h * w;
    const float* g = grad_out.data().data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const double fy = ty.frac[y];
      double* r0 = dst + static_cast<std::size_t>(ty.lo[y]) * w;
      double* r1 = dst + static_cast<std::size_t>(ty.hi[y]) * w;
      for (int x = 0; x < out_w; ++x) {
        const double fx = tx.frac[x];
        const double v = g[y * out_w + x];
        r0[tx.lo[x]] += v * (1.0 - fy) * (1.0 - fx);
        r0[tx.hi[x]] += v * (1.0 - fy) * fx;
        r1[tx.lo[x]] += v * fy * (1.0 - fx);
        r1[tx.hi[x]] += v * fy * fx;
      }
    }
  }
  return tensor_from(acc, input_shape);
}

Tensor softmax(const Tensor& input) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw DimensionError("softmax: expected rank 2 or 4, got " + shape_str(input.shape()));
  }
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t inner = input.rank() == 4 ? static_cast<std::size_t>(input.dim(2)) * input.dim(3) : 1;
  Tensor out(input.shape());
  std::vector<double> e(c);
  for (int b = 0; b < n; ++b)
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = static_cast<std::size_t>(b) * c * inner + q;
      double mx = input[base];
      for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(input[base + k * inner]));
      double sum = 0.0;
      for (int k = 0; k < c; ++k) sum += e[k] = std::exp(input[base + k * inner] - mx);
      for (int k = 0; k < c; ++k) out[base + k * inner] = static_cast<float>(e[k] / sum);
    }
  return out;
}

}  // namespace fundus::ops
