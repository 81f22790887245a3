#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fundus/errors.hpp"
#include "fundus/gradcheck.hpp"
#include "fundus/gradsuite.hpp"
#include "fundus/ops.hpp"
#include "support.hpp"

using namespace fundus;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using testing::random_tensor;

TEST_CASE("tensor construction and element round trip") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  t.at(1, 2, 3, 4) = 0.1f;
  CHECK(t.at(1, 2, 3, 4) == 0.1f);
  CHECK(t[t.size() - 1] == 0.1f);
  CHECK_THROWS_AS(Tensor({2, -1}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), DimensionError);
  CHECK_THROWS_AS(t.reshaped({7}), DimensionError);
  CHECK(t.reshaped({120})[119] == 0.1f);
}

TEST_CASE("conv2d examples") {
  const Tensor ones({1, 1, 3, 3}, 1.0f);
  const Tensor y = ops::conv2d(ones, Tensor({1, 1, 1, 1}, 2.0f), Tensor({1}), {});
  CHECK(y == Tensor({1, 1, 3, 3}, 2.0f));

  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  const Tensor out = ops::conv2d(x, k, b, {2, 1, 1});
  REQUIRE(out.shape() == Shape{1, 3, 3, 3});
  CHECK(testing::max_rel_diff(out, testing::naive_conv(x, k, b, 2, 1, 1)) < 1e-5);

  Tensor delta({1, 1, 9, 9});
  delta.at(0, 0, 4, 4) = 1.0f;
  const Tensor imp = ops::conv2d(delta, Tensor({1, 1, 3, 3}, 1.0f), Tensor(), {1, 2, 2});
  REQUIRE(imp.shape() == Shape{1, 1, 9, 9});
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) {
      const bool tap = (i == 2 || i == 4 || i == 6) && (j == 2 || j == 4 || j == 6);
      CHECK(imp.at(0, 0, i, j) == (tap ? 1.0f : 0.0f));
    }
}

TEST_CASE("conv2d matches the loop oracle on random hyperparameters") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pick(0, 2);
  const int strides[] = {1, 2, 1}, pads[] = {0, 1, 2}, dils[] = {1, 2, 6};
  for (int draw = 0; draw < 20; ++draw) {
    const int stride = strides[pick(rng) % 2], pad = pads[pick(rng)], dil = dils[pick(rng)];
    const int kk = 1 + pick(rng);
    const int side = dil * (kk - 1) + 1 + pick(rng) * 3;
    const Tensor x = random_tensor({2, 3, side, side + 1}, rng);
    const Tensor k = random_tensor({4, 3, kk, kk}, rng);
    const Tensor b = random_tensor({4}, rng);
    const Tensor y = ops::conv2d(x, k, b, {stride, pad, dil});
    CHECK(y.dim(2) == ops::conv_out_extent(side, kk, {stride, pad, dil}));
    CHECK(y.dim(2) == (side + 2 * pad - dil * (kk - 1) - 1) / stride + 1);
    CHECK(testing::max_rel_diff(y, testing::naive_conv(x, k, b, stride, pad, dil)) < 1e-5);
  }
}

TEST_CASE("conv2d argument errors") {
  const Tensor x({1, 2, 5, 5});
  CHECK_THROWS_AS(ops::conv2d(x, Tensor({1, 3, 3, 3}), Tensor(), {}), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor({1, 2, 3, 3}), Tensor(), {0, 0, 1}), ArgumentError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor({1, 2, 3, 3}), Tensor(), {1, 0, 0}), ArgumentError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor({1, 2, 7, 7}), Tensor(), {}), DimensionError);
  try {
    ops::conv2d(x, Tensor({1, 3, 3, 3}), Tensor(), {});
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
}

TEST_CASE("transposed conv2d examples and adjoint identity") {
  const Tensor y = ops::transposed_conv2d(Tensor({1, 1, 2, 2}, 1.0f), Tensor({1, 1, 2, 2}, 1.0f), Tensor(), 2, 0);
  CHECK(y == Tensor({1, 1, 4, 4}, 1.0f));
  CHECK(ops::transposed_conv2d(Tensor({1, 8, 16, 16}), Tensor({8, 4, 2, 2}), Tensor(), 2, 0).shape() ==
        Shape{1, 4, 32, 32});

  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      const Tensor x = random_tensor({1, 2, 4, 4}, rng);
      const Tensor k = random_tensor({2, 3, 3, 3}, rng);  // Cin x Cout for the transposed op
      const Tensor u = ops::transposed_conv2d(x, k, Tensor(), stride, pad);
      CHECK(u.dim(2) == stride * 3 + 3 - 2 * pad);
      const Tensor v = random_tensor(u.shape(), rng);
      // <T(x), v> == <x, conv(v)> with the same kernel read as Cout x Cin.
      const Tensor cv = ops::conv2d(v, k, Tensor(), {stride, pad, 1});
      REQUIRE(cv.shape() == x.shape());
      CHECK(testing::rel_diff(dot(u, v), dot(x, cv)) < 1e-4);
    }
  }
}

TEST_CASE("maxpool2d examples") {
  const auto r = ops::maxpool2d(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  CHECK(r.output == Tensor({1, 1, 1, 1}, {4}));

  const Tensor flat({1, 1, 4, 4}, 5.0f);
  const auto c = ops::maxpool2d(flat, 2, 2);
  CHECK(c.output == Tensor({1, 1, 2, 2}, 5.0f));
  const Tensor g = ops::maxpool2d_backward(flat.shape(), c.argmax, Tensor({1, 1, 2, 2}, 1.0f));
  // Ties go to the first element of each window in row-major order.
  CHECK(g.at(0, 0, 0, 0) == 1.0f);
  CHECK(g.at(0, 0, 0, 2) == 1.0f);
  CHECK(g.at(0, 0, 2, 0) == 1.0f);
  CHECK(g.at(0, 0, 2, 2) == 1.0f);
  double mass = 0;
  for (float v : g.data()) mass += v;
  CHECK(mass == 4.0);

  const Tensor x = random_tensor({1, 3, 8, 8}, 5);
  const Tensor y = ops::maxpool2d(x, 2, 2).output;
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        float m = -1e30f;
        for (int u = 0; u < 2; ++u)
          for (int v = 0; v < 2; ++v) m = std::max(m, x.at(0, ch, 2 * i + u, 2 * j + v));
        CHECK(y.at(0, ch, i, j) == m);
      }
  CHECK_THROWS_AS(ops::maxpool2d(Tensor({1, 1, 2, 2}), 3, 1), DimensionError);
}

TEST_CASE("batchnorm2d examples") {
  // Per-channel mean 5, variance 4.
  Tensor x({2, 2, 1, 2}, {3, 7, 3, 7, 7, 3, 7, 3});
  const Tensor y = ops::batchnorm2d_train(x, Tensor({2}, 1.0f), Tensor({2}), 0.0);
  for (int ch = 0; ch < 2; ++ch) {
    double m = 0, v = 0;
    for (int n = 0; n < 2; ++n)
      for (int j = 0; j < 2; ++j) m += y.at(n, ch, 0, j) / 4.0;
    for (int n = 0; n < 2; ++n)
      for (int j = 0; j < 2; ++j) v += std::pow(y.at(n, ch, 0, j) - m, 2) / 4.0;
    CHECK_THAT(m, WithinAbs(0.0, 1e-6));
    CHECK_THAT(v, WithinAbs(1.0, 1e-6));
  }
  const Tensor z = ops::batchnorm2d_train(x, Tensor({2}, 2.0f), Tensor({2}, 3.0f), 0.0);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK_THAT(z[i], WithinAbs(3.0 + 2.0 * y[i], 1e-5));

  auto state = ops::BatchNormState::fresh(2);
  CHECK_THROWS_AS(ops::batchnorm2d(x, Tensor({2}, 1.0f), Tensor({2}), state, ops::Mode::Eval), StateError);
  ops::batchnorm2d(x, Tensor({2}, 1.0f), Tensor({2}), state, ops::Mode::Train);
  CHECK(state.updates == 1);
  // Momentum 0.1 from (0, 1) towards (5, unbiased 16/3).
  CHECK_THAT(state.running_mean[0], WithinAbs(0.5, 1e-6));
  CHECK_THAT(state.running_var[0], WithinAbs(0.9 + 0.1 * 16.0 / 3.0, 1e-6));
  CHECK_NOTHROW(ops::batchnorm2d(x, Tensor({2}, 1.0f), Tensor({2}), state, ops::Mode::Eval));
  CHECK_THROWS_AS(ops::batchnorm2d_train(Tensor({1, 1, 1, 1}), Tensor({1}), Tensor({1}), 1e-5), DimensionError);
}

TEST_CASE("relu, linear, pooling, concat examples") {
  CHECK(ops::relu(Tensor({3}, {-1, 0, 2})) == Tensor({3}, {0, 0, 2}));
  const Tensor pos({2, 2}, {1, 2, 3, 4});
  CHECK(ops::relu(pos) == pos);
  const Tensor rx = random_tensor({2, 3, 4, 4}, 9);
  const Tensor rg = ops::relu_backward(rx, Tensor(rx.shape(), 1.0f));
  for (std::size_t i = 0; i < rx.size(); ++i) CHECK(rg[i] == (rx[i] > 0 ? 1.0f : 0.0f));
  CHECK(ops::relu_backward(Tensor({1}, {0.0f}), Tensor({1}, 1.0f))[0] == 0.0f);

  const Tensor in = random_tensor({2, 3}, 1);
  CHECK(ops::linear(in, Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor({3})) == in);
  const Tensor b({4}, {1, 2, 3, 4});
  const Tensor zb = ops::linear(random_tensor({2, 3}, 2), Tensor({3, 4}), b);
  for (int n = 0; n < 2; ++n)
    for (int k = 0; k < 4; ++k) CHECK(zb[n * 4 + k] == b[k]);
  const Tensor w = random_tensor({3, 4}, 3);
  const Tensor lin = ops::linear(in, w, b);
  for (int n = 0; n < 2; ++n)
    for (int k = 0; k < 4; ++k) {
      double acc = b[k];
      for (int d = 0; d < 3; ++d) acc += double(in[n * 3 + d]) * w[d * 4 + k];
      CHECK_THAT(lin[n * 4 + k], WithinAbs(acc, 1e-6));
    }
  CHECK_THROWS_AS(ops::linear(in, Tensor({4, 4}), Tensor()), DimensionError);

  CHECK(ops::global_avg_pool(Tensor({2, 3, 4, 4}, 1.5f)) == Tensor({2, 3}, 1.5f));
  const Tensor one = random_tensor({2, 3, 1, 1}, 4);
  CHECK(ops::global_avg_pool(one) == one.reshaped({2, 3}));
  const Tensor gx = random_tensor({2, 3, 3, 5}, 5);
  const Tensor gp = ops::global_avg_pool(gx);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (int i = 0; i < 15; ++i) acc += gx[(n * 3 + c) * 15 + i];
      CHECK_THAT(gp[n * 3 + c], WithinAbs(acc / 15, 1e-6));
    }

  const Tensor a = random_tensor({1, 64, 8, 8}, 6), c = random_tensor({1, 128, 8, 8}, 7);
  const Tensor ac = ops::concat_channels(a, c);
  CHECK(ac.shape() == Shape{1, 192, 8, 8});
  CHECK(ops::slice_channels(ac, 0, 64) == a);
  CHECK(ops::slice_channels(ac, 64, 128) == c);
  CHECK(ops::concat_channels(a, Tensor({1, 0, 8, 8})) == a);
  CHECK_THROWS_AS(ops::concat_channels(a, Tensor({1, 2, 4, 8})), DimensionError);
}

TEST_CASE("bilinear resize examples") {
  const Tensor x = random_tensor({1, 2, 4, 4}, 8);
  CHECK(ops::bilinear_resize(x, 4, 4) == x);
  const Tensor flat = ops::bilinear_resize(Tensor({1, 1, 3, 5}, 0.25f), 7, 2);
  for (float v : flat.data()) CHECK_THAT(v, WithinAbs(0.25, 1e-7));

  // Align-corners-false: output pixel j samples source coordinate (j + 0.5) / 2 - 0.5, clamped.
  const Tensor src({1, 1, 2, 2}, {0, 1, 2, 3});
  const Tensor up = ops::bilinear_resize(src, 4, 4);
  auto f = [&](double y, double x) {
    y = std::clamp(y, 0.0, 1.0);
    x = std::clamp(x, 0.0, 1.0);
    return (1 - y) * ((1 - x) * 0 + x * 1) + y * ((1 - x) * 2 + x * 3);
  };
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK_THAT(up.at(0, 0, i, j), WithinAbs(f((i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5), 1e-6));
  CHECK(up.at(0, 0, 0, 0) == 0.0f);
  CHECK_THAT(up.at(0, 0, 1, 1), WithinAbs(0.75, 1e-7));
}

TEST_CASE("softmax examples") {
  const Tensor eq = ops::softmax(Tensor({2, 5}, 3.0f));
  for (float v : eq.data()) CHECK_THAT(v, WithinAbs(0.2, 1e-7));
  const Tensor z = random_tensor({3, 4, 2, 2}, 12, 3.0);
  Tensor shifted = z;
  for (float& v : shifted.data()) v += 50.0f;
  const Tensor p = ops::softmax(z), q = ops::softmax(shifted);
  CHECK(max_abs_diff(p, q) < 1e-6);
  for (int n = 0; n < 3; ++n)
    for (int s = 0; s < 4; ++s) {
      double sum = 0, denom = 0;
      for (int c = 0; c < 4; ++c) denom += std::exp(double(z[n * 16 + c * 4 + s]));
      for (int c = 0; c < 4; ++c) {
        sum += p[n * 16 + c * 4 + s];
        CHECK_THAT(p[n * 16 + c * 4 + s], WithinAbs(std::exp(double(z[n * 16 + c * 4 + s])) / denom, 1e-6));
      }
      CHECK_THAT(sum, WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("finite difference check examples") {
  std::mt19937_64 rng(21);
  OpNode lin;
  lin.kind = OpKind::Linear;
  lin.name = "fc";
  lin.params = {{"weight", random_tensor({4, 3}, rng)}, {"bias", random_tensor({3}, rng)}};
  const std::vector<Tensor> lin_in{random_tensor({2, 4}, rng)};
  // Exactly linear, so only float32 output rounding (~ulp(y) / 2h) remains.
  CHECK(finite_difference_check(lin, lin_in, 1e-2).max_rel_error < 1e-5);

  OpNode conv;
  conv.kind = OpKind::Conv2d;
  conv.name = "conv";
  conv.pad = 1;
  conv.params = {{"weight", random_tensor({3, 2, 3, 3}, rng, 0.3)}, {"bias", random_tensor({3}, rng)}};
  const std::vector<Tensor> conv_in{random_tensor({1, 2, 5, 5}, rng)};
  CHECK(finite_difference_check(conv, conv_in, 1e-3).max_rel_error < 1e-3);

  OpNode bn;
  bn.kind = OpKind::BatchNorm2d;
  bn.name = "bn";
  bn.params = {{"scale", Tensor({3}, {0.8f, 1.0f, 1.2f})}, {"shift", Tensor({3}, {0.1f, -0.2f, 0.3f})}};
  const std::vector<Tensor> bn_in{random_tensor({2, 3, 4, 4}, rng)};
  CHECK(finite_difference_check(bn, bn_in, 1e-3).max_rel_error < 1e-3);

  OpNode input;
  input.kind = OpKind::Input;
  CHECK_THROWS_AS(finite_difference_check(input, lin_in, 1e-3), UnsupportedError);

  OpNode relu;
  relu.kind = OpKind::ReLU;
  relu.name = "relu";
  CHECK_THROWS_AS(finite_difference_check(relu, std::vector<Tensor>{Tensor({1, 1, 1, 2}, {0.5f, 0.0f})}, 1e-3),
                  ArgumentError);
}

TEST_CASE("every differentiable operator passes the gradient check on 5 seeds") {
  for (const auto& name : gradsuite::operator_cases()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto r = gradsuite::run_case(name, seed);
      INFO(name << " seed " << seed << " worst " << r.worst);
      CHECK(r.max_rel_error < gradsuite::kTolerance);
    }
  }
}
